//! Steps the sliding-window environment with a threshold policy on the
//! reconstruction penalty and scores the decisions with the reward vector.
//!
//! ```bash
//! cargo run --release --example env_rollout
//! ```

use drsmt::cli::{prepare, vae_stage, RunConfig};
use drsmt::data::synth_generate;
use drsmt::env::Env;
use drsmt::eval::{confusion, precision_recall_f1};
use drsmt::reward::{reward_vector, RewardConfig};

fn main() -> drsmt::Result<()> {
    let mut cfg = RunConfig::with_seed(7);
    cfg.synth.timesteps = 3_000;
    cfg.vae.epochs = 15;
    let raw = synth_generate(&cfg.synth)?;
    let prepared = prepare(&cfg, &raw)?;
    let stage = vae_stage(&cfg, &prepared)?;

    let mut env = Env::new(prepared.table.clone(), stage.penalty.clone(), cfg.data.n_steps)?;
    let state = env.reset();
    println!(
        "{} decisions, first at t = {}, state {}x{}",
        env.decision_count(),
        state.t,
        state.view(0).rows(),
        state.view(0).cols()
    );

    let threshold = 3.0 * stage.penalty.as_slice().iter().sum::<f64>() / stage.penalty.len() as f64;
    let rewards = RewardConfig::default();
    let (mut preds, mut truths, mut total) = (Vec::new(), Vec::new(), 0.0);
    let mut t = state.t;
    loop {
        let action = u8::from(env.penalty().get(t) > threshold);
        let out = env.step(action)?;
        total += reward_vector(&rewards, out.label, out.penalty, 0.5)[action as usize];
        preds.push(action);
        truths.push(out.label);
        if out.done {
            break;
        }
        t = out.next_t;
    }
    let (p, r, f1) = precision_recall_f1(confusion(&preds, &truths)?);
    println!("penalty threshold {threshold:.3}: precision {p:.3}, recall {r:.3}, F1 {f1:.3}, reward {total:.1}");
    Ok(())
}
