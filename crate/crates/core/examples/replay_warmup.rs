//! Seeds replay memory with outlier-guided random rollouts, then runs
//! Bellman updates from sampled minibatches with a periodically synced
//! target network.
//!
//! ```bash
//! cargo run --release --example replay_warmup
//! ```

use drsmt::agent::{sync_target, train_step, warm_up, QNet, ReplayMemory, SeedingStrategy, Transition};
use drsmt::cli::{prepare, vae_stage, RunConfig};
use drsmt::data::synth_generate;
use drsmt::diffkernel::Adam;
use drsmt::env::Env;
use drsmt::reward::RewardConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> drsmt::Result<()> {
    let mut cfg = RunConfig::with_seed(5);
    cfg.synth.timesteps = 3_000;
    cfg.data.n_steps = 10;
    cfg.vae.epochs = 10;
    let raw = synth_generate(&cfg.synth)?;
    let prepared = prepare(&cfg, &raw)?;
    let stage = vae_stage(&cfg, &prepared)?;
    let mut env = Env::new(
        prepared.train_table(),
        stage.penalty.rebase(0, prepared.train_end, 10),
        10,
    )?;
    let rewards = RewardConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    for strategy in [SeedingStrategy::Random, SeedingStrategy::OutlierGuided] {
        let mut memory = ReplayMemory::new(2_000);
        let report = warm_up(&mut env, &mut memory, 2_000, strategy, &rewards, 1.0, &mut rng)?;
        let anomalous = memory.iter().filter(|t| env.labels()[t.t] == 1).count();
        println!(
            "{strategy:?}: {} rollouts, {} outlier timesteps, {anomalous}/{} anomalous transitions",
            report.starts.len(),
            report.outliers,
            memory.len()
        );
    }

    let mut memory = ReplayMemory::new(2_000);
    warm_up(
        &mut env,
        &mut memory,
        2_000,
        SeedingStrategy::OutlierGuided,
        &rewards,
        1.0,
        &mut rng,
    )?;
    let mut net = QNet::new(10, env.features() + 1, 16, 1, &mut rng)?;
    let mut target = net.clone();
    let mut opt = Adam::new(&net.params, 1e-3);
    for step in 1..=600 {
        let batch: Vec<&Transition> = memory.sample(32, &mut rng);
        let loss = train_step(&mut net, &target, &batch, &mut opt, 0.9)?;
        if step % 100 == 0 {
            sync_target(&net, &mut target)?;
            println!("step {step}: loss {loss:.3}, target synced");
        }
    }
    Ok(())
}
