//! Confusion counts, precision/recall/F1 and the step-wise precision-recall
//! curve with its average precision.
//!
//! ```bash
//! cargo run --release --example pr_metrics
//! ```

use drsmt::eval::{aupr, confusion, pr_curve, precision_recall_f1};

fn main() -> drsmt::Result<()> {
    let truth = [0, 0, 1, 1, 0, 1, 0, 0, 1, 0];
    let score = [-3.1, -0.4, 2.2, 0.3, 0.9, 4.0, -1.2, 0.3, -0.2, -2.5];
    let pred: Vec<u8> = score.iter().map(|&s| u8::from(s > 0.0)).collect();

    let c = confusion(&pred, &truth)?;
    let (p, r, f1) = precision_recall_f1(c);
    println!("tp {} fp {} fn {} tn {}", c.tp, c.fp, c.fn_, c.tn);
    println!("precision {p:.3}, recall {r:.3}, F1 {f1:.3}");

    for (recall, precision) in pr_curve(&score, &truth)? {
        println!("  recall {recall:.2}  precision {precision:.3}");
    }
    println!("AU-PR {:.4}", aupr(&score, &truth)?);
    println!(
        "constant score AU-PR {:.4} (positive rate 0.4)",
        aupr(&[0.0; 10], &truth)?
    );
    Ok(())
}
