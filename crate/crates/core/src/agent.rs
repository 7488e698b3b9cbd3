//! LSTM Q-network agent: ε-greedy selection, ring-buffer replay,
//! warm-up seeding, two-head Bellman regression and target syncing.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::active::ActiveLearner;
use crate::checkpoint::Checkpoint;
use crate::diffkernel::{Activation, Adam, Dense, LstmCell, ParamSet, Tape, Tensor2, Var};
use crate::env::Env;
use crate::error::{Error, Result};
use crate::eval::{confusion, precision_recall_f1};
use crate::reward::{reward_vector, LambdaState, RewardConfig};

/// Stacked LSTM over the window followed by a dense head `(Q(s,0), Q(s,1))`.
#[derive(Clone, Debug)]
pub struct QNet {
    pub params: ParamSet,
    cells: Vec<LstmCell>,
    head: Dense,
    n_steps: usize,
    input_size: usize,
    hidden: usize,
}

impl QNet {
    pub fn new<R: Rng + ?Sized>(
        n_steps: usize,
        input_size: usize,
        hidden: usize,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_steps == 0 || input_size == 0 || hidden == 0 || layers == 0 {
            return Err(Error::Config("Q-network sizes must be positive".into()));
        }
        let mut params = ParamSet::new();
        let cells = (0..layers)
            .map(|l| {
                let inputs = if l == 0 { input_size } else { hidden };
                LstmCell::new(&mut params, &format!("lstm{l}"), inputs, hidden, rng)
            })
            .collect();
        let head = Dense::new(&mut params, "head", hidden, 2, Activation::Identity, rng);
        Ok(Self {
            params,
            cells,
            head,
            n_steps,
            input_size,
            hidden,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn layers(&self) -> usize {
        self.cells.len()
    }

    fn check_state(&self, s: &Tensor2) -> Result<()> {
        if s.shape() != (self.n_steps, self.input_size) {
            return Err(Error::shape("q_forward", s.shape(), (self.n_steps, self.input_size)));
        }
        Ok(())
    }

    /// Records the forward pass for a batch of states; returns the `B x 2` node.
    fn forward_tape(&self, tape: &mut Tape, states: &[&Tensor2]) -> Result<Var> {
        for s in states {
            self.check_state(s)?;
        }
        let b = states.len();
        let bound: Vec<_> = self.cells.iter().map(|c| c.bind(tape, &self.params)).collect();
        let mut h: Vec<Var> = (0..bound.len())
            .map(|_| tape.input(Tensor2::zeros(b, self.hidden)))
            .collect();
        let mut c = h.clone();
        for step in 0..self.n_steps {
            let mut x = Tensor2::zeros(b, self.input_size);
            for (i, s) in states.iter().enumerate() {
                x.row_mut(i).copy_from_slice(s.row(step));
            }
            let mut input = tape.input(x);
            for (l, cell) in bound.iter().enumerate() {
                let (h_next, c_next) = cell.step(tape, input, h[l], c[l])?;
                h[l] = h_next;
                c[l] = c_next;
                input = h_next;
            }
        }
        self.head
            .forward(tape, &self.params, *h.last().expect("at least one layer"))
    }

    pub fn q_values(&self, state: &Tensor2) -> Result<[f64; 2]> {
        Ok(self.q_values_batch(&[state])?[0])
    }

    pub fn q_values_batch(&self, states: &[&Tensor2]) -> Result<Vec<[f64; 2]>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let out = self.forward_tape(&mut tape, states)?;
        let q = tape.value(out);
        Ok((0..q.rows()).map(|r| [q.get(r, 0), q.get(r, 1)]).collect())
    }

    /// Mean squared error between the Q outputs and `targets` (B×2). The
    /// returned parameter copy carries the gradients.
    pub fn loss_and_grads(&self, states: &[&Tensor2], targets: &Tensor2) -> Result<(f64, ParamSet)> {
        let mut tape = Tape::new();
        let q = self.forward_tape(&mut tape, states)?;
        let y = tape.input(targets.clone());
        let loss = tape.mse(q, y)?;
        let mut grads = self.params.clone();
        tape.backward(loss, &mut grads)?;
        Ok((tape.value(loss).item(), grads))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new("qnet")
            .with_meta("n_steps", self.n_steps)
            .with_meta("input_size", self.input_size)
            .with_meta("hidden", self.hidden)
            .with_meta("layers", self.layers());
        ckpt.push_params(&self.params);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != "qnet" {
            return Err(Error::Config(format!(
                "expected a qnet checkpoint, found {:?}",
                ckpt.kind
            )));
        }
        let num = |k: &str| -> Result<usize> {
            ckpt.meta(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Config(format!("qnet checkpoint lacks a valid {k}")))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = QNet::new(
            num("n_steps")?,
            num("input_size")?,
            num("hidden")?,
            num("layers")?,
            &mut rng,
        )?;
        ckpt.load_params_into(&mut net.params)?;
        Ok(net)
    }
}

pub fn q_forward(net: &QNet, state: &Tensor2) -> Result<[f64; 2]> {
    net.q_values(state)
}

/// Argmax with ties going to action 0 ("normal").
pub fn greedy_action(q: [f64; 2]) -> u8 {
    u8::from(q[1] > q[0])
}

/// With probability `epsilon` a uniformly random action, otherwise `None`.
pub fn explore<R: Rng + ?Sized>(epsilon: f64, rng: &mut R) -> Option<u8> {
    if rng.gen::<f64>() < epsilon {
        Some(rng.gen_range(0..2))
    } else {
        None
    }
}

pub fn select_action<R: Rng + ?Sized>(q: [f64; 2], epsilon: f64, rng: &mut R) -> u8 {
    explore(epsilon, rng).unwrap_or_else(|| greedy_action(q))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub t: usize,
    pub state: Tensor2,
    pub action: u8,
    pub reward: [f64; 2],
    pub next_state: Tensor2,
    pub done: bool,
}

/// Fixed-capacity ring buffer that overwrites its oldest entry when full.
#[derive(Clone, Debug)]
pub struct ReplayMemory {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
    inserted: u64,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            next: 0,
            inserted: 0,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sample without replacement (all items if fewer than `batch`).
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<&Transition> {
        let n = batch.min(self.items.len());
        sample_indices(rng, self.items.len(), n)
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedingStrategy {
    Random,
    #[default]
    OutlierGuided,
}

/// Robust z-score per timestep: max over features of `|x - median| / (1.4826·MAD)`.
pub fn robust_zscores(env: &Env) -> Vec<f64> {
    let table = env.table();
    let (t_len, d) = (table.timesteps(), table.features());
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    let mut z = vec![0.0f64; t_len];
    for j in 0..d {
        let mut col: Vec<f64> = (0..t_len).map(|t| table.value(t, j)).collect();
        let med = median(&mut col);
        let mut dev: Vec<f64> = (0..t_len).map(|t| (table.value(t, j) - med).abs()).collect();
        let mad = (1.4826 * median(&mut dev)).max(1e-12);
        for (t, zt) in z.iter_mut().enumerate() {
            *zt = zt.max((table.value(t, j) - med).abs() / mad);
        }
    }
    z
}

pub const OUTLIER_Z: f64 = 3.0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WarmUpReport {
    /// Decision timestep at which each seeding rollout began.
    pub starts: Vec<usize>,
    pub outliers: usize,
}

/// Fills `memory` to `target_size` with random-action rollouts of up to
/// `n_steps` decisions each. `OutlierGuided` draws half of the rollout
/// starts from the neighbourhood of robust-z outliers.
#[allow(clippy::too_many_arguments)]
pub fn warm_up<R: Rng + ?Sized>(
    env: &mut Env,
    memory: &mut ReplayMemory,
    target_size: usize,
    strategy: SeedingStrategy,
    reward_cfg: &RewardConfig,
    lambda: f64,
    rng: &mut R,
) -> Result<WarmUpReport> {
    let target = target_size.min(memory.capacity());
    let first = env.first_decision();
    let last = env.table().timesteps() - 1;
    let n_steps = env.n_steps();
    let outliers: Vec<usize> = match strategy {
        SeedingStrategy::Random => Vec::new(),
        SeedingStrategy::OutlierGuided => robust_zscores(env)
            .iter()
            .enumerate()
            .filter(|(t, &z)| z > OUTLIER_Z && *t >= first)
            .map(|(t, _)| t)
            .collect(),
    };
    let mut report = WarmUpReport {
        starts: Vec::new(),
        outliers: outliers.len(),
    };
    while memory.len() < target {
        let start = if !outliers.is_empty() && rng.gen_bool(0.5) {
            let o = outliers[rng.gen_range(0..outliers.len())];
            o.saturating_sub(rng.gen_range(0..n_steps)).max(first)
        } else {
            rng.gen_range(first..=last)
        };
        report.starts.push(start);
        let s = env.reset_at(start)?;
        let mut state = s.view(0);
        for _ in 0..n_steps {
            if memory.len() >= target {
                break;
            }
            let action: u8 = rng.gen_range(0..2);
            let out = env.step(action)?;
            let reward = reward_vector(reward_cfg, out.label, out.penalty, lambda);
            let [next0, next1] = out.next;
            let next = if action == 0 { next0 } else { next1 };
            memory.push(Transition {
                t: out.t,
                state,
                action,
                reward,
                next_state: next.clone(),
                done: out.done,
            });
            state = next;
            if out.done {
                break;
            }
        }
    }
    Ok(report)
}

/// Bootstrapped regression targets for both heads. Both bootstrap from the
/// observed successor `s'_a`.
pub fn bellman_target(transition: &Transition, target_net: &QNet, gamma: f64) -> Result<[f64; 2]> {
    let next_max = if transition.done {
        0.0
    } else {
        let q = target_net.q_values(&transition.next_state)?;
        q[0].max(q[1])
    };
    Ok(bellman_from_max(transition, next_max, gamma))
}

fn bellman_from_max(transition: &Transition, next_max: f64, gamma: f64) -> [f64; 2] {
    if transition.done {
        transition.reward
    } else {
        [
            transition.reward[0] + gamma * next_max,
            transition.reward[1] + gamma * next_max,
        ]
    }
}

pub fn bellman_targets(batch: &[&Transition], target_net: &QNet, gamma: f64) -> Result<Vec<[f64; 2]>> {
    let live: Vec<&Tensor2> = batch.iter().filter(|t| !t.done).map(|t| &t.next_state).collect();
    let q = target_net.q_values_batch(&live)?;
    let mut q = q.into_iter();
    Ok(batch
        .iter()
        .map(|t| {
            let next_max = if t.done {
                0.0
            } else {
                let v = q.next().expect("one value per live transition");
                v[0].max(v[1])
            };
            bellman_from_max(t, next_max, gamma)
        })
        .collect())
}

/// One Adam step on the mean squared error between both Q heads and their
/// Bellman targets. Returns the pre-update loss.
pub fn train_step(net: &mut QNet, target_net: &QNet, batch: &[&Transition], opt: &mut Adam, gamma: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("train_step needs a non-empty batch".into()));
    }
    let targets = bellman_targets(batch, target_net, gamma)?;
    let flat: Vec<f64> = targets.iter().flat_map(|t| t.iter().copied()).collect();
    let target = Tensor2::from_vec(batch.len(), 2, flat)?;
    let states: Vec<&Tensor2> = batch.iter().map(|t| &t.state).collect();

    let mut tape = Tape::new();
    let q = net.forward_tape(&mut tape, &states)?;
    let y = tape.input(target);
    let loss = tape.mse(q, y)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "Q loss {value} after {} optimizer steps (lr {}); targets span [{}, {}]",
            opt.steps(),
            opt.lr,
            tape.value(y).as_slice().iter().copied().fold(f64::INFINITY, f64::min),
            tape.value(y)
                .as_slice()
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max),
        )));
    }
    tape.backward(loss, &mut net.params)?;
    opt.step(&mut net.params);
    Ok(value)
}

pub fn sync_target(net: &QNet, target_net: &mut QNet) -> Result<()> {
    target_net.params.copy_values_from(&net.params)
}

/// Linear ε decay from `start` to `end` over `decay_steps`, then flat.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
}

impl EpsilonSchedule {
    pub fn value(&self, step: u64) -> f64 {
        if self.decay_steps == 0 || step >= self.decay_steps {
            return self.end;
        }
        self.start + (self.end - self.start) * step as f64 / self.decay_steps as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub episodes: usize,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of all training steps over which ε decays.
    pub epsilon_decay_fraction: f64,
    pub batch: usize,
    /// Target network sync interval, in environment steps.
    pub target_sync: u64,
    pub replay_capacity: usize,
    pub warmup: usize,
    pub warmup_strategy: SeedingStrategy,
    pub lr: f64,
    pub hidden: usize,
    pub layers: usize,
    /// Environment steps between minibatch updates.
    pub train_every: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            episodes: 30,
            gamma: 0.99,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.5,
            batch: 64,
            target_sync: 500,
            replay_capacity: 10_000,
            warmup: 1000,
            warmup_strategy: SeedingStrategy::OutlierGuided,
            lr: 1e-3,
            hidden: 64,
            layers: 1,
            train_every: 1,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return bad("epsilon values must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.epsilon_decay_fraction) {
            return bad("epsilon_decay_fraction must lie in [0, 1]");
        }
        if self.target_sync == 0 || self.train_every == 0 || self.batch == 0 || self.replay_capacity == 0 {
            return bad("target_sync, train_every, batch and replay_capacity must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("agent lr must be positive");
        }
        Ok(())
    }

    pub fn schedule(&self, total_steps: u64) -> EpsilonSchedule {
        EpsilonSchedule {
            start: self.epsilon_start,
            end: self.epsilon_end,
            decay_steps: (self.epsilon_decay_fraction * total_steps as f64).round() as u64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub total_reward: f64,
    pub lambda: f64,
    /// ε at the end of the episode.
    pub epsilon: f64,
    pub mean_loss: f64,
    /// F1 of the rollout's own actions against the revealed labels.
    pub rollout_f1: f64,
    pub oracle_labels: usize,
    pub pseudo_labels: usize,
    pub injected: usize,
}

pub fn training_log_csv(log: &[EpisodeLog]) -> String {
    let mut out = String::from("episode,total_reward,lambda,epsilon,mean_loss,rollout_f1\n");
    for r in log {
        writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?}",
            r.episode, r.total_reward, r.lambda, r.epsilon, r.mean_loss, r.rollout_f1
        )
        .expect("write to string");
    }
    out
}

pub fn write_training_log(log: &[EpisodeLog], path: &Path) -> Result<()> {
    fs::write(path, training_log_csv(log)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub net: QNet,
    pub target_net: QNet,
    pub log: Vec<EpisodeLog>,
    /// Global step numbers at which the target network was synced.
    pub sync_steps: Vec<u64>,
    /// ε used at every environment step.
    pub epsilon_trace: Vec<f64>,
}

/// Runs the episode loop: active-learning pass, ε-greedy rollout with
/// per-step replay updates and periodic target syncs, then the λ update.
#[allow(clippy::too_many_arguments)]
pub fn run_training<R: Rng + ?Sized>(
    env: &mut Env,
    mut net: QNet,
    memory: &mut ReplayMemory,
    lambda: &mut LambdaState,
    mut active: Option<&mut ActiveLearner>,
    reward_cfg: &RewardConfig,
    cfg: &AgentConfig,
    rng: &mut R,
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    let mut target_net = net.clone();
    let mut opt = Adam::new(&net.params, cfg.lr);
    let per_episode = env.decision_count() as u64;
    let schedule = cfg.schedule(per_episode * cfg.episodes as u64);
    let mut step: u64 = 0;
    let mut log = Vec::with_capacity(cfg.episodes);
    let mut sync_steps = Vec::new();
    let mut epsilon_trace = Vec::with_capacity((per_episode * cfg.episodes as u64) as usize);

    for episode in 1..=cfg.episodes {
        let al = match active.as_deref_mut() {
            Some(learner) => Some(learner.episode_pass(episode, &net, env, reward_cfg, lambda.lambda, memory, rng)?),
            None => None,
        };

        let mut state = env.reset().view(0);
        let (mut total_reward, mut loss_sum, mut updates) = (0.0, 0.0, 0usize);
        let (mut actions, mut labels) = (
            Vec::with_capacity(per_episode as usize),
            Vec::with_capacity(per_episode as usize),
        );
        let mut epsilon;
        loop {
            epsilon = schedule.value(step);
            epsilon_trace.push(epsilon);
            step += 1;
            let action = match explore(epsilon, rng) {
                Some(a) => a,
                None => greedy_action(net.q_values(&state)?),
            };
            let out = env.step(action)?;
            let reward = reward_vector(reward_cfg, out.label, out.penalty, lambda.lambda);
            let [next0, next1] = out.next;
            let next = if action == 0 { next0 } else { next1 };
            memory.push(Transition {
                t: out.t,
                state,
                action,
                reward,
                next_state: next.clone(),
                done: out.done,
            });
            if step % cfg.train_every == 0 && memory.len() >= cfg.batch {
                let batch = memory.sample(cfg.batch, rng);
                loss_sum += train_step(&mut net, &target_net, &batch, &mut opt, cfg.gamma)?;
                updates += 1;
            }
            if step % cfg.target_sync == 0 {
                sync_target(&net, &mut target_net)?;
                sync_steps.push(step);
            }
            total_reward += reward[action as usize];
            actions.push(action);
            labels.push(out.label);
            state = next;
            if out.done {
                break;
            }
        }

        let (_, _, f1) = precision_recall_f1(confusion(&actions, &labels)?);
        let lambda_used = lambda.lambda;
        lambda.update(total_reward);
        let entry = EpisodeLog {
            episode,
            total_reward,
            lambda: lambda_used,
            epsilon,
            mean_loss: if updates > 0 { loss_sum / updates as f64 } else { 0.0 },
            rollout_f1: f1,
            oracle_labels: al.as_ref().map_or(0, |a| a.oracle_labels),
            pseudo_labels: al.as_ref().map_or(0, |a| a.pseudo_labels),
            injected: al.as_ref().map_or(0, |a| a.injected),
        };
        info!(
            "episode {episode}: reward {:.1}, lambda {:.4}, epsilon {:.3}, loss {:.4}, rollout F1 {:.3}",
            entry.total_reward, entry.lambda, entry.epsilon, entry.mean_loss, entry.rollout_f1
        );
        debug!("episode {episode}: {updates} updates, memory {}", memory.len());
        log.push(entry);
    }
    Ok(TrainingOutcome {
        net,
        target_net,
        log,
        sync_steps,
        epsilon_trace,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::data::SeriesTable;
    use crate::diffkernel::gradcheck::{max_param_grad_error, DEFAULT_STEP};
    use crate::vae::PenaltyArray;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn state(n: usize, d: usize, r: &mut ChaCha8Rng) -> Tensor2 {
        Tensor2::uniform(n, d, 1.0, r)
    }

    fn small_env(t_len: usize, n_steps: usize) -> Env {
        let values = (0..t_len * 2).map(|v| ((v as f64) * 0.3).sin()).collect();
        let labels = (0..t_len).map(|t| u8::from(t % 10 >= 8)).collect();
        let table = SeriesTable::new(values, labels, vec!["a".into(), "b".into()]).unwrap();
        let penalty = PenaltyArray((0..t_len).map(|t| (t % 3) as f64 * 0.1).collect());
        Env::new(table, penalty, n_steps).unwrap()
    }

    #[test]
    fn zero_network_outputs_bias() {
        let mut net = QNet::new(4, 3, 5, 1, &mut rng(0)).unwrap();
        for id in net.params.ids().collect::<Vec<_>>() {
            net.params.value_mut(id).fill(0.0);
        }
        let bias = net.params.find("head.bias").unwrap();
        net.params.value_mut(bias).as_mut_slice().copy_from_slice(&[0.25, -0.5]);
        let q = net.q_values(&state(4, 3, &mut rng(1))).unwrap();
        assert_eq!(q, [0.25, -0.5]);
    }

    #[test]
    fn q_forward_is_deterministic_and_batch_consistent() {
        let net = QNet::new(5, 3, 6, 2, &mut rng(2)).unwrap();
        let mut r = rng(3);
        let states: Vec<Tensor2> = (0..4).map(|_| state(5, 3, &mut r)).collect();
        let refs: Vec<&Tensor2> = states.iter().collect();
        let batch = net.q_values_batch(&refs).unwrap();
        for (s, q) in states.iter().zip(&batch) {
            assert_eq!(net.q_values(s).unwrap(), *q);
            assert_eq!(q_forward(&net, s).unwrap(), *q);
        }
        assert!(net.q_values(&state(4, 3, &mut r)).is_err());
    }

    #[test]
    fn q_gradients_match_finite_differences() {
        let net = QNet::new(3, 2, 4, 1, &mut rng(4)).unwrap();
        let s = state(3, 2, &mut rng(5));
        let q0 = |p: &ParamSet| {
            let mut n = net.clone();
            n.params = p.clone();
            n.q_values(&s).unwrap()[0]
        };
        let mut tape = Tape::new();
        let out = net.forward_tape(&mut tape, &[&s]).unwrap();
        let head0 = tape.slice_cols(out, 0, 1).unwrap();
        let mut grads = net.params.clone();
        tape.backward(head0, &mut grads).unwrap();
        let err = max_param_grad_error(&grads, DEFAULT_STEP, q0);
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn greedy_selection_and_ties() {
        let mut r = rng(0);
        assert_eq!(select_action([2.0, 5.0], 0.0, &mut r), 1);
        assert_eq!(select_action([3.0, 3.0], 0.0, &mut r), 0);
        assert_eq!(select_action([5.0, 2.0], 0.0, &mut r), 0);
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut r = rng(9);
        let ones: usize = (0..10_000)
            .map(|_| select_action([0.0, 100.0], 1.0, &mut r) as usize)
            .sum();
        let freq = ones as f64 / 10_000.0;
        assert!((freq - 0.5).abs() <= 0.02, "{freq}");
    }

    fn transition(reward: [f64; 2], done: bool, next: Tensor2) -> Transition {
        Transition {
            t: 0,
            state: next.clone(),
            action: 0,
            reward,
            next_state: next,
            done,
        }
    }

    #[test]
    fn bellman_cases() {
        let mut net = QNet::new(2, 2, 3, 1, &mut rng(0)).unwrap();
        for id in net.params.ids().collect::<Vec<_>>() {
            net.params.value_mut(id).fill(0.0);
        }
        let bias = net.params.find("head.bias").unwrap();
        net.params.value_mut(bias).as_mut_slice().copy_from_slice(&[2.0, -4.0]);
        let s = Tensor2::zeros(2, 2);
        assert_eq!(
            bellman_target(&transition([1.0, -1.0], true, s.clone()), &net, 0.9).unwrap(),
            [1.0, -1.0]
        );
        assert_eq!(
            bellman_target(&transition([1.0, -1.0], false, s.clone()), &net, 0.0).unwrap(),
            [1.0, -1.0]
        );
        let t = bellman_target(&transition([1.0, 3.0], false, s.clone()), &net, 0.9).unwrap();
        assert!((t[0] - 2.8).abs() < 1e-12);
        assert!((t[1] - 4.8).abs() < 1e-12);
        let a = transition([1.0, 3.0], false, s.clone());
        let b = transition([0.0, 0.0], true, s);
        assert_eq!(bellman_targets(&[&a, &b], &net, 0.9).unwrap(), vec![t, [0.0, 0.0]]);
    }

    #[test]
    fn train_step_at_fixed_point_changes_nothing() {
        let mut net = QNet::new(3, 2, 4, 1, &mut rng(1)).unwrap();
        let target = net.clone();
        let s = state(3, 2, &mut rng(2));
        let q = net.q_values(&s).unwrap();
        let t = transition(q, true, s);
        let before = net.params.clone();
        let mut opt = Adam::new(&net.params, 1e-2);
        let loss = train_step(&mut net, &target, &[&t], &mut opt, 0.9).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(net.params, before);
    }

    #[test]
    fn overfits_one_batch() {
        let mut r = rng(3);
        let mut net = QNet::new(4, 3, 8, 1, &mut r).unwrap();
        let target = net.clone();
        let batch: Vec<Transition> = (0..8)
            .map(|k| transition([k as f64 * 0.1, 1.0 - k as f64 * 0.2], true, state(4, 3, &mut r)))
            .collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        let mut opt = Adam::new(&net.params, 1e-2);
        let mut loss = f64::INFINITY;
        for _ in 0..500 {
            loss = train_step(&mut net, &target, &refs, &mut opt, 0.0).unwrap();
        }
        assert!(loss < 1e-3, "{loss}");
        assert!(train_step(&mut net, &target, &[], &mut opt, 0.0).is_err());
    }

    #[test]
    fn zero_gamma_converges_to_reward_vectors() {
        let mut r = rng(13);
        let mut net = QNet::new(3, 2, 8, 1, &mut r).unwrap();
        let target = net.clone();
        let mut memory = ReplayMemory::new(10);
        for k in 0..10 {
            let label = u8::from(k % 3 == 0);
            let reward = reward_vector(&RewardConfig::default(), label, 0.1 * k as f64, 1.0);
            memory.push(transition(reward, false, state(3, 2, &mut r)));
        }
        let mut opt = Adam::new(&net.params, 1e-2);
        for _ in 0..800 {
            let batch = memory.sample(10, &mut r);
            train_step(&mut net, &target, &batch, &mut opt, 0.0).unwrap();
        }
        // brute-force fixed point for γ = 0 is the reward vector itself
        let dev: f64 = memory
            .iter()
            .map(|t| {
                let q = net.q_values(&t.state).unwrap();
                (q[0] - t.reward[0]).abs() + (q[1] - t.reward[1]).abs()
            })
            .sum::<f64>()
            / 20.0;
        assert!(dev < 0.5, "mean abs deviation {dev}");
    }

    #[test]
    fn sync_copies_deeply() {
        let mut r = rng(4);
        let mut net = QNet::new(3, 2, 4, 1, &mut r).unwrap();
        let mut target = QNet::new(3, 2, 4, 1, &mut r).unwrap();
        sync_target(&net, &mut target).unwrap();
        for _ in 0..100 {
            let s = state(3, 2, &mut r);
            assert_eq!(net.q_values(&s).unwrap(), target.q_values(&s).unwrap());
        }
        let frozen = target.params.clone();
        let id = net.params.find("head.bias").unwrap();
        net.params.value_mut(id).fill(9.0);
        assert_eq!(target.params, frozen);
        let other = QNet::new(3, 2, 5, 1, &mut r).unwrap();
        assert!(sync_target(&other, &mut target).is_err());
    }

    #[test]
    fn warm_up_fills_exactly_and_rewards_are_consistent() {
        let mut env = small_env(80, 5);
        let mut memory = ReplayMemory::new(1000);
        let cfg = RewardConfig::default();
        warm_up(
            &mut env,
            &mut memory,
            500,
            SeedingStrategy::Random,
            &cfg,
            0.7,
            &mut rng(0),
        )
        .unwrap();
        assert_eq!(memory.len(), 500);
        for t in memory.iter() {
            let want = reward_vector(&cfg, env.labels()[t.t], env.penalty().get(t.t), 0.7);
            assert_eq!(t.reward, want);
            assert_eq!(t.state.shape(), (5, 3));
        }
    }

    #[test]
    fn outlier_guided_oversamples_spike() {
        let t_len = 2000;
        let mut values: Vec<f64> = (0..t_len).map(|t| ((t as f64) * 0.05).sin()).collect();
        values[1500] = 40.0;
        let table = SeriesTable::new(values, vec![0; t_len], vec!["x".into()]).unwrap();
        let n_steps = 10;
        let mut env = Env::new(table, PenaltyArray(vec![0.0; t_len]), n_steps).unwrap();
        let near = |starts: &[usize]| {
            starts.iter().filter(|&&s| (1490..=1510).contains(&s)).count() as f64 / starts.len() as f64
        };
        let cfg = RewardConfig::default();
        let mut m1 = ReplayMemory::new(4000);
        let uniform = warm_up(&mut env, &mut m1, 4000, SeedingStrategy::Random, &cfg, 1.0, &mut rng(1)).unwrap();
        let mut m2 = ReplayMemory::new(4000);
        let guided = warm_up(
            &mut env,
            &mut m2,
            4000,
            SeedingStrategy::OutlierGuided,
            &cfg,
            1.0,
            &mut rng(1),
        )
        .unwrap();
        assert_eq!(guided.outliers, 1);
        assert!(near(&guided.starts) >= 2.0 * near(&uniform.starts).max(1.0 / 2000.0));
    }

    #[test]
    fn schedule_is_linear_then_flat() {
        let s = EpsilonSchedule {
            start: 1.0,
            end: 0.1,
            decay_steps: 10,
        };
        assert_eq!(s.value(0), 1.0);
        assert!((s.value(5) - 0.55).abs() < 1e-12);
        assert_eq!(s.value(10), 0.1);
        assert_eq!(s.value(1000), 0.1);
    }

    fn tiny_config(episodes: usize) -> AgentConfig {
        AgentConfig {
            episodes,
            batch: 8,
            target_sync: 7,
            replay_capacity: 200,
            warmup: 50,
            hidden: 6,
            lr: 1e-2,
            ..AgentConfig::default()
        }
    }

    fn train(seed: u64, episodes: usize) -> (TrainingOutcome, LambdaState) {
        let mut env = small_env(40, 4);
        let cfg = tiny_config(episodes);
        let mut r = rng(seed);
        let net = QNet::new(4, 3, cfg.hidden, 1, &mut r).unwrap();
        let mut memory = ReplayMemory::new(cfg.replay_capacity);
        let rc = RewardConfig::default();
        let mut lambda = LambdaState::new(1.0, 0.01, 20.0, 0.0, 10.0).unwrap();
        warm_up(
            &mut env,
            &mut memory,
            cfg.warmup,
            cfg.warmup_strategy,
            &rc,
            lambda.lambda,
            &mut r,
        )
        .unwrap();
        let out = run_training(&mut env, net, &mut memory, &mut lambda, None, &rc, &cfg, &mut r).unwrap();
        (out, lambda)
    }

    #[test]
    fn one_episode_logs_one_row() {
        let (out, lambda) = train(0, 1);
        assert_eq!(out.log.len(), 1);
        assert_eq!(lambda.history.len(), 1);
        assert!(out.log[0].mean_loss.is_finite());
    }

    #[test]
    fn training_is_deterministic() {
        let (a, la) = train(5, 3);
        let (b, lb) = train(5, 3);
        assert_eq!(a.log, b.log);
        assert_eq!(a.net.params, b.net.params);
        assert_eq!(la, lb);
    }

    #[test]
    fn sync_and_epsilon_follow_schedule() {
        let (out, _) = train(6, 3);
        let steps = out.epsilon_trace.len() as u64;
        assert_eq!(steps, 3 * 37);
        let expected: Vec<u64> = (1..=steps).filter(|s| s % 7 == 0).collect();
        assert_eq!(out.sync_steps, expected);
        let cfg = tiny_config(3);
        let sched = cfg.schedule(steps);
        for (k, &e) in out.epsilon_trace.iter().enumerate() {
            assert_eq!(e, sched.value(k as u64));
        }
    }

    #[test]
    fn qnet_checkpoint_round_trip() {
        let net = QNet::new(3, 2, 4, 2, &mut rng(7)).unwrap();
        let text = net.to_checkpoint().to_text();
        let back = QNet::from_checkpoint(&Checkpoint::parse(&text, Path::new("mem")).unwrap()).unwrap();
        assert_eq!(back.params, net.params);
        assert_eq!(back.layers(), 2);
    }

    proptest! {
        #[test]
        fn replay_capacity_and_eviction(cap in 1usize..20, extra in 0usize..30) {
            let mut m = ReplayMemory::new(cap);
            for k in 0..cap + extra {
                let mut t = transition([k as f64, 0.0], true, Tensor2::zeros(1, 1));
                t.t = k;
                m.push(t);
                prop_assert!(m.len() <= cap);
            }
            let present: Vec<usize> = m.iter().map(|t| t.t).collect();
            for k in 0..extra {
                prop_assert!(!present.contains(&k));
            }
            for k in extra..cap + extra {
                prop_assert!(present.contains(&k));
            }
        }
    }
}
