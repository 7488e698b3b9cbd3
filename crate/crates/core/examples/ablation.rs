//! Full model against a fixed λ and against no active learning, on one data
//! split and seed. Smaller than the desk-scale run so it finishes quickly.
//!
//! ```bash
//! cargo run --release --example ablation
//! ```

use drsmt::cli::{ablation_csv, cmd_ablate, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = RunConfig::with_seed(11);
    cfg.paths.output = std::env::temp_dir().join("drsmt_runs");
    cfg.paths.run_name = Some("ablation".into());
    cfg.synth.timesteps = 4_000;
    cfg.vae.epochs = 20;
    cfg.agent.episodes = 12;
    cfg.agent.gamma = 0.9;
    cfg.agent.hidden = 32;
    cfg.agent.batch = 32;
    cfg.agent.train_every = 8;
    cfg.active.candidates = 512;
    cfg.ablation.fixed_lambda = Some(1.0);

    let (rows, arts) = cmd_ablate(&mut cfg)?;
    print!("{}", ablation_csv(&rows));
    for (row, art) in rows.iter().zip(&arts) {
        let last = art.lambda.history.last().map_or(f64::NAN, |h| h.lambda);
        println!(
            "{}: final λ {last:.4}, outputs in {}",
            row.variant,
            art.run_dir.display()
        );
    }
    Ok(())
}
