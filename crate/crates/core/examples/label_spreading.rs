//! Spreads a handful of labels over a kNN graph of two point clouds and
//! promotes the most confident windows to pseudo-labels.
//!
//! ```bash
//! cargo run --release --example label_spreading
//! ```

use drsmt::active::{assign_pseudo_labels, median_sigma, spread_labels, spread_residual, KnnGraph, LabelPool};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> drsmt::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, dim) = (400, 4);
    // Entries 0..360 sit around the origin, the rest around (3, 3, 3, 3).
    let truth: Vec<u8> = (0..n).map(|i| u8::from(i >= 360)).collect();
    let features: Vec<f64> = (0..n * dim)
        .map(|k| 3.0 * f64::from(truth[k / dim]) + rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut pool = LabelPool::new((0..n).collect(), features, dim)?;
    for i in [0, 50, 100, 200, 300, 365, 390] {
        pool.set_given(i, truth[i]);
    }

    let sigma = median_sigma(&pool, 256, &mut rng);
    let graph = KnnGraph::build(&pool, 10, sigma)?;
    let spread = spread_labels(&pool, &graph, 1.0, 2000, 1e-9)?;
    println!(
        "sigma {sigma:.3}: converged {} after {} sweeps, residual {:.1e}",
        spread.converged,
        spread.iterations,
        spread_residual(&pool, &graph, &spread.probs)
    );
    let correct = (0..n)
        .filter(|&i| u8::from(spread.probs[i][1] > 0.5) == truth[i])
        .count();
    println!("argmax agrees with the truth on {correct}/{n} entries");

    let chosen = assign_pseudo_labels(&mut pool, &spread.probs, 50, 0.8);
    let right = chosen
        .iter()
        .filter(|&&i| pool.entry(i).label == Some(truth[i]))
        .count();
    println!("{} pseudo-labels, {right} correct", chosen.len());
    Ok(())
}
