//! Margin-based uncertainty sampling, budgeted oracle labeling and label
//! spreading over a k-nearest-neighbour RBF graph of flattened windows.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{QNet, ReplayMemory, Transition};
use crate::diffkernel::Tensor2;
use crate::env::{augment, Env};
use crate::error::{Error, Result};
use crate::reward::{reward_vector, RewardConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Given,
    Oracle,
    Propagated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    /// Timestep whose window this entry represents.
    pub t: usize,
    pub label: Option<u8>,
    pub source: Option<LabelSource>,
}

impl PoolEntry {
    /// Given and oracle labels are held fixed during spreading.
    pub fn is_clamped(&self) -> bool {
        matches!(self.source, Some(LabelSource::Given | LabelSource::Oracle))
    }
}

/// Labeled set and unlabeled pool over a fixed collection of windows.
#[derive(Clone, Debug)]
pub struct LabelPool {
    entries: Vec<PoolEntry>,
    features: Vec<f64>,
    dim: usize,
    oracle_queries: usize,
    injected: Vec<Option<u8>>,
}

impl LabelPool {
    /// `features` holds one flat vector of length `dim` per entry.
    pub fn new(timesteps: Vec<usize>, features: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || features.len() != timesteps.len() * dim {
            return Err(Error::Config(format!(
                "label pool: {} feature values for {} entries of width {dim}",
                features.len(),
                timesteps.len()
            )));
        }
        let n = timesteps.len();
        Ok(Self {
            entries: timesteps
                .into_iter()
                .map(|t| PoolEntry {
                    t,
                    label: None,
                    source: None,
                })
                .collect(),
            features,
            dim,
            oracle_queries: 0,
            injected: vec![None; n],
        })
    }

    /// One entry per decision timestep of `env`, featurized by its window.
    pub fn from_env(env: &Env) -> Result<Self> {
        let ts: Vec<usize> = (env.first_decision()..env.table().timesteps()).collect();
        let mut features = Vec::with_capacity(ts.len() * env.n_steps() * env.features());
        for &t in &ts {
            features.extend_from_slice(env.window_flat(t));
        }
        Self::new(ts, features, env.n_steps() * env.features())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, i: usize) -> &PoolEntry {
        &self.entries[i]
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn oracle_queries(&self) -> usize {
        self.oracle_queries
    }

    pub fn set_given(&mut self, i: usize, label: u8) {
        self.entries[i].label = Some(label);
        self.entries[i].source = Some(LabelSource::Given);
    }

    pub fn unlabeled(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.entries[i].label.is_none()).collect()
    }

    pub fn count(&self, source: LabelSource) -> usize {
        self.entries.iter().filter(|e| e.source == Some(source)).count()
    }
}

pub fn margin(q: [f64; 2]) -> f64 {
    (q[0] - q[1]).abs()
}

/// The `k` candidates with the smallest margin, ties to the lower index,
/// in ascending margin order. Returns every candidate when `k` exceeds them.
pub fn select_by_margin(candidates: &[(usize, f64)], k: usize) -> Vec<usize> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    sorted.into_iter().take(k).map(|(i, _)| i).collect()
}

const MARGIN_BATCH: usize = 256;

/// Margins of the given pool entries under `net`, evaluated on their
/// windows with a zero indicator column.
pub fn pool_margins(pool: &LabelPool, net: &QNet, indices: &[usize], env: &Env) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(MARGIN_BATCH) {
        let states: Vec<Tensor2> = chunk
            .iter()
            .map(|&i| augment(&env.window(pool.entry(i).t), 0))
            .collect();
        let refs: Vec<&Tensor2> = states.iter().collect();
        for (&i, q) in chunk.iter().zip(net.q_values_batch(&refs)?) {
            out.push((i, margin(q)));
        }
    }
    Ok(out)
}

/// The `k` unlabeled entries with the smallest Q-margin.
pub fn select_uncertain(pool: &LabelPool, net: &QNet, env: &Env, k: usize) -> Result<Vec<usize>> {
    let margins = pool_margins(pool, net, &pool.unlabeled(), env)?;
    Ok(select_by_margin(&margins, k))
}

/// Labels `indices` from `truth` (indexed like the pool). Entries already
/// holding an oracle label are skipped. Returns the number newly labeled.
pub fn oracle_label(pool: &mut LabelPool, indices: &[usize], truth: &[u8]) -> usize {
    let mut added = 0;
    for &i in indices {
        let e = &mut pool.entries[i];
        if e.source == Some(LabelSource::Oracle) {
            continue;
        }
        e.label = Some(truth[i]);
        e.source = Some(LabelSource::Oracle);
        added += 1;
    }
    pool.oracle_queries += added;
    added
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn rbf_weight(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    (-sq_dist(a, b) / (2.0 * sigma * sigma)).exp()
}

/// Median pairwise distance over a random subsample of at most `sample`
/// entries. Falls back to 1 when every sampled pair coincides.
pub fn median_sigma<R: Rng + ?Sized>(pool: &LabelPool, sample: usize, rng: &mut R) -> f64 {
    let n = pool.len();
    let picked: Vec<usize> = if n <= sample {
        (0..n).collect()
    } else {
        let mut v = sample_indices(rng, n, sample).into_vec();
        v.sort_unstable();
        v
    };
    let mut d = Vec::with_capacity(picked.len() * picked.len().saturating_sub(1) / 2);
    for (a, &i) in picked.iter().enumerate() {
        for &j in &picked[a + 1..] {
            d.push(sq_dist(pool.feature(i), pool.feature(j)).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if *m > 0.0 {
        *m
    } else {
        1.0
    }
}

/// Directed kNN graph: row `i` lists its `k` nearest other entries with
/// their RBF weights, nearest first, ties to the lower index.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnGraph {
    pub sigma: f64,
    pub neighbors: Vec<Vec<(usize, f64)>>,
}

impl KnnGraph {
    pub fn build(pool: &LabelPool, k: usize, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::Config(format!("kernel width must be positive, got {sigma}")));
        }
        let n = pool.len();
        let k = k.min(n.saturating_sub(1));
        let order = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
        let mut neighbors = Vec::with_capacity(n);
        let mut dist: Vec<(usize, f64)> = Vec::with_capacity(n);
        for i in 0..n {
            dist.clear();
            let fi = pool.feature(i);
            dist.extend((0..n).filter(|&j| j != i).map(|j| (j, sq_dist(fi, pool.feature(j)))));
            if k > 0 && k < dist.len() {
                dist.select_nth_unstable_by(k - 1, order);
            }
            let mut near: Vec<(usize, f64)> = dist[..k].to_vec();
            near.sort_by(order);
            neighbors.push(
                near.into_iter()
                    .map(|(j, d2)| (j, (-d2 / (2.0 * sigma * sigma)).exp()))
                    .collect(),
            );
        }
        Ok(Self { sigma, neighbors })
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Spread {
    /// `[P(y=0), P(y=1)]` per pool entry.
    pub probs: Vec<[f64; 2]>,
    pub iterations: usize,
    pub converged: bool,
}

fn neighbor_average(graph: &KnnGraph, probs: &[[f64; 2]], i: usize) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for &(j, w) in &graph.neighbors[i] {
        num += w * probs[j][1];
        den += w;
    }
    (den > 0.0).then(|| num / den)
}

/// Iterates `P_i ← Σ_j w_ij P_j / Σ_j w_ij` over graph neighbours until the
/// largest change falls below `tolerance`. Clamped entries mix their one-hot
/// label with weight `clamp_alpha`. Sweeps update in place in index order.
pub fn spread_labels(
    pool: &LabelPool,
    graph: &KnnGraph,
    clamp_alpha: f64,
    max_iterations: usize,
    tolerance: f64,
) -> Result<Spread> {
    if graph.len() != pool.len() {
        return Err(Error::Config(format!(
            "graph has {} nodes for a pool of {}",
            graph.len(),
            pool.len()
        )));
    }
    if !pool.entries.iter().any(PoolEntry::is_clamped) {
        return Err(Error::Config(
            "label spreading needs at least one labeled window".into(),
        ));
    }
    let onehot = |l: u8| if l == 1 { [0.0, 1.0] } else { [1.0, 0.0] };
    let mut probs: Vec<[f64; 2]> = pool
        .entries
        .iter()
        .map(|e| match (e.is_clamped(), e.label) {
            (true, Some(l)) => onehot(l),
            _ => [0.5, 0.5],
        })
        .collect();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iterations {
        iterations += 1;
        let mut change: f64 = 0.0;
        for i in 0..probs.len() {
            let e = &pool.entries[i];
            let p1 = if e.is_clamped() {
                let fixed = onehot(e.label.expect("clamped entries carry labels"))[1];
                if clamp_alpha >= 1.0 {
                    continue;
                }
                let avg = neighbor_average(graph, &probs, i).unwrap_or(fixed);
                clamp_alpha * fixed + (1.0 - clamp_alpha) * avg
            } else {
                match neighbor_average(graph, &probs, i) {
                    Some(v) => v,
                    None => continue,
                }
            };
            change = change.max((p1 - probs[i][1]).abs());
            probs[i] = [1.0 - p1, p1];
        }
        if change < tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("label spreading stopped after {iterations} iterations without converging");
    }
    Ok(Spread {
        probs,
        iterations,
        converged,
    })
}

/// Largest violation of the neighbour-average fixed point over unclamped
/// entries that have at least one weighted neighbour.
pub fn spread_residual(pool: &LabelPool, graph: &KnnGraph, probs: &[[f64; 2]]) -> f64 {
    (0..pool.len())
        .filter(|&i| !pool.entries[i].is_clamped())
        .filter_map(|i| neighbor_average(graph, probs, i).map(|avg| (probs[i][1] - avg).abs()))
        .fold(0.0, f64::max)
}

/// Gives the `k_lp` most confident unlabeled entries (max class probability
/// at least `threshold`) their argmax class. Returns the indices assigned.
pub fn assign_pseudo_labels(pool: &mut LabelPool, probs: &[[f64; 2]], k_lp: usize, threshold: f64) -> Vec<usize> {
    let mut cand: Vec<(usize, f64)> = pool
        .unlabeled()
        .into_iter()
        .map(|i| (i, probs[i][0].max(probs[i][1])))
        .filter(|&(_, c)| c >= threshold)
        .collect();
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cand.truncate(k_lp);
    for &(i, _) in &cand {
        pool.entries[i].label = Some(u8::from(probs[i][1] > probs[i][0]));
        pool.entries[i].source = Some(LabelSource::Propagated);
    }
    cand.into_iter().map(|(i, _)| i).collect()
}

/// Pushes one transition per labeled entry whose label has not been
/// injected yet. The state carries a zero indicator, the action is the label
/// and the successor is the next window flagged with that label.
pub fn inject_labeled_transitions(
    pool: &mut LabelPool,
    env: &Env,
    reward_cfg: &RewardConfig,
    lambda: f64,
    memory: &mut ReplayMemory,
) -> usize {
    let last = env.table().timesteps() - 1;
    let mut count = 0;
    for i in 0..pool.len() {
        let Some(label) = pool.entries[i].label else {
            continue;
        };
        if pool.injected[i] == Some(label) {
            continue;
        }
        let t = pool.entries[i].t;
        let state = augment(&env.window(t), 0);
        let done = t >= last;
        let next_state = if done {
            state.clone()
        } else {
            augment(&env.window(t + 1), label)
        };
        memory.push(Transition {
            t,
            state,
            action: label,
            reward: reward_vector(reward_cfg, label, env.penalty().get(t), lambda),
            next_state,
            done,
        });
        pool.injected[i] = Some(label);
        count += 1;
    }
    count
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActiveConfig {
    /// Oracle queries per episode.
    pub k_al: usize,
    /// Pseudo-labels per episode.
    pub k_lp: usize,
    /// Cap on cumulative oracle labels as a fraction of all windows.
    pub oracle_cap: f64,
    pub knn: usize,
    /// Kernel width; the median pairwise distance when absent.
    pub sigma: Option<f64>,
    pub sigma_sample: usize,
    pub threshold: f64,
    pub clamp_alpha: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Unlabeled windows scored per episode; 0 scores them all.
    pub candidates: usize,
}

impl Default for ActiveConfig {
    fn default() -> Self {
        Self {
            k_al: 10,
            k_lp: 50,
            oracle_cap: 0.05,
            knn: 10,
            sigma: None,
            sigma_sample: 512,
            threshold: 0.8,
            clamp_alpha: 1.0,
            max_iterations: 2000,
            tolerance: 1e-9,
            candidates: 0,
        }
    }
}

impl ActiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.oracle_cap) {
            return Err(Error::Config("oracle_cap must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) || !(0.0..=1.0).contains(&self.clamp_alpha) {
            return Err(Error::Config("threshold and clamp_alpha must lie in [0, 1]".into()));
        }
        if matches!(self.sigma, Some(s) if !(s > 0.0)) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditRow {
    pub episode: usize,
    /// Timesteps sent to the oracle.
    pub queried: Vec<usize>,
    pub margins: Vec<f64>,
    pub oracle_labels: Vec<u8>,
    pub pseudo_labels: usize,
}

pub fn audit_csv(rows: &[AuditRow]) -> String {
    let join = |v: Vec<String>| v.join(";");
    let mut out = String::from("episode,queried_indices,margins,oracle_labels,pseudo_label_count\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.episode,
            join(r.queried.iter().map(|t| t.to_string()).collect()),
            join(r.margins.iter().map(|m| format!("{m:?}")).collect()),
            join(r.oracle_labels.iter().map(|l| l.to_string()).collect()),
            r.pseudo_labels
        )
        .expect("write to string");
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeReport {
    pub oracle_labels: usize,
    pub pseudo_labels: usize,
    pub injected: usize,
    pub spread_converged: bool,
}

/// Per-run active-learning state driven once per episode.
#[derive(Clone, Debug)]
pub struct ActiveLearner {
    pub config: ActiveConfig,
    pub pool: LabelPool,
    graph: Option<KnnGraph>,
    pub audit: Vec<AuditRow>,
}

impl ActiveLearner {
    pub fn new(config: ActiveConfig, env: &Env) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            pool: LabelPool::from_env(env)?,
            graph: None,
            audit: Vec::new(),
        })
    }

    pub fn oracle_budget(&self) -> usize {
        (self.config.oracle_cap * self.pool.len() as f64).floor() as usize
    }

    pub fn graph(&self) -> Option<&KnnGraph> {
        self.graph.as_ref()
    }

    /// Query, label, spread and inject for one episode.
    #[allow(clippy::too_many_arguments)]
    pub fn episode_pass<R: Rng + ?Sized>(
        &mut self,
        episode: usize,
        net: &QNet,
        env: &Env,
        reward_cfg: &RewardConfig,
        lambda: f64,
        memory: &mut ReplayMemory,
        rng: &mut R,
    ) -> Result<EpisodeReport> {
        let cfg = self.config.clone();
        let k = cfg
            .k_al
            .min(self.oracle_budget().saturating_sub(self.pool.oracle_queries()));
        let mut unlabeled = self.pool.unlabeled();
        if cfg.candidates > 0 && cfg.candidates < unlabeled.len() {
            let mut picked: Vec<usize> = sample_indices(rng, unlabeled.len(), cfg.candidates)
                .into_iter()
                .map(|i| unlabeled[i])
                .collect();
            picked.sort_unstable();
            unlabeled = picked;
        }
        let (queried, margins) = if k > 0 {
            let scored = pool_margins(&self.pool, net, &unlabeled, env)?;
            let chosen = select_by_margin(&scored, k);
            let margins = chosen
                .iter()
                .map(|i| scored.iter().find(|(j, _)| j == i).map(|s| s.1).unwrap_or(f64::NAN))
                .collect();
            (chosen, margins)
        } else {
            (Vec::new(), Vec::new())
        };
        let truth: Vec<u8> = self.pool.entries.iter().map(|e| env.labels()[e.t]).collect();
        let oracle_labels = oracle_label(&mut self.pool, &queried, &truth);

        let mut report = EpisodeReport {
            oracle_labels,
            spread_converged: true,
            ..EpisodeReport::default()
        };
        if cfg.k_lp > 0 && self.pool.entries.iter().any(PoolEntry::is_clamped) {
            if self.graph.is_none() {
                let sigma = match cfg.sigma {
                    Some(s) => s,
                    None => median_sigma(&self.pool, cfg.sigma_sample, rng),
                };
                self.graph = Some(KnnGraph::build(&self.pool, cfg.knn, sigma)?);
            }
            let graph = self.graph.as_ref().expect("graph built above");
            let spread = spread_labels(&self.pool, graph, cfg.clamp_alpha, cfg.max_iterations, cfg.tolerance)?;
            report.spread_converged = spread.converged;
            report.pseudo_labels = assign_pseudo_labels(&mut self.pool, &spread.probs, cfg.k_lp, cfg.threshold).len();
        }
        report.injected = inject_labeled_transitions(&mut self.pool, env, reward_cfg, lambda, memory);
        self.audit.push(AuditRow {
            episode,
            queried: queried.iter().map(|&i| self.pool.entry(i).t).collect(),
            margins,
            oracle_labels: queried.iter().map(|&i| truth[i]).collect(),
            pseudo_labels: report.pseudo_labels,
        });
        Ok(report)
    }

    pub fn write_audit(&self, path: &Path) -> Result<()> {
        fs::write(path, audit_csv(&self.audit)).map_err(|e| Error::io(path, e))
    }
}
