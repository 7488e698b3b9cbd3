//! The classification reward table, the shaped reward vector and the
//! proportional λ controller driven by a sequence of episode rewards.
//!
//! ```bash
//! cargo run --release --example reward_lambda
//! ```

use drsmt::reward::{classification_reward, reward_vector, LambdaState, PenaltyMode, RewardConfig};

fn main() -> drsmt::Result<()> {
    let cfg = RewardConfig::default();
    for (a, y) in [(1, 1), (0, 0), (1, 0), (0, 1)] {
        println!("action {a}, label {y}: {:+}", classification_reward(&cfg, a, y));
    }

    let penalty = 0.8;
    for mode in [PenaltyMode::AdditiveBoth, PenaltyMode::SubtractOnNormal] {
        let c = RewardConfig {
            penalty_mode: mode,
            ..cfg.clone()
        };
        println!(
            "{mode:?}, p = {penalty}, λ = 0.5: normal row {:?}, anomalous row {:?}",
            reward_vector(&c, 0, penalty, 0.5),
            reward_vector(&c, 1, penalty, 0.5)
        );
    }

    // Episode rewards above the target pull λ down until it hits the floor.
    let mut lambda = LambdaState::new(1.0, 1e-4, 5_000.0, 0.0, 10.0)?;
    for r in [9_000.0, 8_000.0, 7_000.0, 6_500.0, 5_200.0, 4_000.0, 4_500.0] {
        let next = lambda.update(r);
        println!("episode reward {r:>7.0} -> λ {next:.4}");
    }
    print!("{}", lambda.history_csv());
    Ok(())
}
