//! Trains the reconstruction model on normal training windows and compares
//! the per-timestep penalty on anomalous and normal rows.
//!
//! ```bash
//! cargo run --release --example vae_penalty
//! ```

use drsmt::cli::{prepare, vae_stage, RunConfig};
use drsmt::data::synth_generate;

fn main() -> drsmt::Result<()> {
    let mut cfg = RunConfig::with_seed(7);
    cfg.vae.epochs = 20;
    let raw = synth_generate(&cfg.synth)?;
    let prepared = prepare(&cfg, &raw)?;
    let stage = vae_stage(&cfg, &prepared)?;
    println!(
        "loss: first epoch {:.4}, last epoch {:.4}",
        stage.trace[0],
        stage.trace[stage.trace.len() - 1]
    );

    let n = cfg.data.n_steps;
    let (mut anom, mut norm) = ((0.0, 0usize), (0.0, 0usize));
    for t in n - 1..raw.timesteps() {
        let acc = if raw.labels()[t] == 1 { &mut anom } else { &mut norm };
        acc.0 += stage.penalty.get(t);
        acc.1 += 1;
    }
    let (a, b) = (anom.0 / anom.1 as f64, norm.0 / norm.1 as f64);
    println!("mean penalty: anomalous {a:.4}, normal {b:.4}, ratio {:.2}", a / b);
    println!("first entries (zero padded): {:?}", &stage.penalty.as_slice()[..n + 1]);
    Ok(())
}
