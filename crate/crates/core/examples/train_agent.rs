//! End-to-end run on the synthetic series: VAE penalty, warm-up, DQN
//! training with active learning and the λ controller, then validation on
//! held-out slices against a coin-flip baseline.
//!
//! ```bash
//! cargo run --release --example train_agent            # 30 episodes, about 5 minutes
//! cargo run --release --example train_agent -- 5       # quicker look
//! ```

use drsmt::cli::{cmd_train, load_dataset, prepare, RunConfig};
use drsmt::eval::random_baseline;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let episodes = std::env::args().nth(1).map(|a| a.parse()).transpose()?.unwrap_or(30);
    let mut cfg = RunConfig::with_seed(7);
    cfg.paths.output = std::env::temp_dir().join("drsmt_runs");
    cfg.paths.run_name = Some("train_agent".into());
    cfg.agent.episodes = episodes;
    cfg.agent.gamma = 0.9;
    cfg.agent.hidden = 32;
    cfg.agent.batch = 32;
    cfg.agent.train_every = 8;
    cfg.active.candidates = 512;

    let art = cmd_train(&mut cfg)?;
    println!("episode,total_reward,lambda,epsilon,mean_loss,rollout_f1");
    for r in &art.log {
        println!(
            "{},{:.1},{:.4},{:.3},{:.4},{:.3}",
            r.episode, r.total_reward, r.lambda, r.epsilon, r.mean_loss, r.rollout_f1
        );
    }
    print!("{}", art.report.summary_csv());

    let prepared = prepare(&cfg, &load_dataset(&cfg)?)?;
    let slices = prepared.holdout_slices(cfg.data.folds, cfg.data.n_steps)?;
    let baseline = random_baseline(&slices, cfg.data.n_steps, &mut ChaCha8Rng::seed_from_u64(7))?;
    println!(
        "held-out F1 {:.3} vs random {:.3}; outputs in {}",
        art.report.mean_f1,
        baseline.mean_f1,
        art.run_dir.display()
    );
    Ok(())
}
