//! Sliding-window decision process over a standardized series.
//!
//! The state at cursor `t` is the window of rows `[t - n_steps + 1, t]`.
//! Each step decides timestep `t` and reveals its label; the episode visits
//! every timestep that ends a full window exactly once, so a series of
//! length `T` yields `T - n_steps + 1` decisions.

use crate::data::SeriesTable;
use crate::diffkernel::Tensor2;
use crate::error::{Error, Result};
use crate::vae::PenaltyArray;

/// Appends a constant indicator column holding `action_bit`.
pub fn augment(window: &Tensor2, action_bit: u8) -> Tensor2 {
    let (n, d) = window.shape();
    let mut out = Tensor2::zeros(n, d + 1);
    for r in 0..n {
        let row = out.row_mut(r);
        row[..d].copy_from_slice(window.row(r));
        row[d] = f64::from(action_bit);
    }
    out
}

/// Drops the indicator column added by [`augment`].
pub fn strip_indicator(state: &Tensor2) -> Tensor2 {
    state.slice_cols(0, state.cols() - 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    /// Timestep decided from this state (final row of the window).
    pub t: usize,
    pub window: Tensor2,
}

impl EnvState {
    /// The state augmented with the indicator for `action_bit`.
    pub fn view(&self, action_bit: u8) -> Tensor2 {
        augment(&self.window, action_bit)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Timestep that was decided.
    pub t: usize,
    pub label: u8,
    pub penalty: f64,
    /// Successor state per action; the successor window itself is shared.
    /// On the final step these repeat the current window and must not be
    /// bootstrapped from.
    pub next: [Tensor2; 2],
    pub next_t: usize,
    pub done: bool,
}

#[derive(Clone, Debug)]
pub struct Env {
    table: SeriesTable,
    penalty: PenaltyArray,
    n_steps: usize,
    cursor: usize,
    done: bool,
}

impl Env {
    pub fn new(table: SeriesTable, penalty: PenaltyArray, n_steps: usize) -> Result<Self> {
        Self::check(&table, &penalty, n_steps)?;
        Ok(Self {
            cursor: n_steps - 1,
            done: false,
            table,
            penalty,
            n_steps,
        })
    }

    fn check(table: &SeriesTable, penalty: &PenaltyArray, n_steps: usize) -> Result<()> {
        if n_steps == 0 {
            return Err(Error::Config("n_steps must be at least 1".into()));
        }
        if table.timesteps() < n_steps {
            return Err(Error::Env(format!(
                "series of {} timesteps is shorter than the window length {n_steps}",
                table.timesteps()
            )));
        }
        if penalty.len() != table.timesteps() {
            return Err(Error::Env(format!(
                "penalty array has {} entries for {} timesteps",
                penalty.len(),
                table.timesteps()
            )));
        }
        Ok(())
    }

    /// Rebinds the environment to a slice; `penalty` must already be indexed
    /// from the slice origin.
    pub fn load_slice(&mut self, table: SeriesTable, penalty: PenaltyArray) -> Result<()> {
        Self::check(&table, &penalty, self.n_steps)?;
        self.table = table;
        self.penalty = penalty;
        self.cursor = self.n_steps - 1;
        self.done = false;
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn features(&self) -> usize {
        self.table.features()
    }

    pub fn table(&self) -> &SeriesTable {
        &self.table
    }

    pub fn labels(&self) -> &[u8] {
        self.table.labels()
    }

    pub fn penalty(&self) -> &PenaltyArray {
        &self.penalty
    }

    pub fn first_decision(&self) -> usize {
        self.n_steps - 1
    }

    pub fn decision_count(&self) -> usize {
        self.table.timesteps() - self.n_steps + 1
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// The window ending at timestep `t`.
    pub fn window(&self, t: usize) -> Tensor2 {
        let d = self.table.features();
        let start = t + 1 - self.n_steps;
        Tensor2::from_vec(self.n_steps, d, self.table.values()[start * d..(t + 1) * d].to_vec()).expect("window shape")
    }

    /// Flattened window ending at `t`.
    pub fn window_flat(&self, t: usize) -> &[f64] {
        let d = self.table.features();
        let start = t + 1 - self.n_steps;
        &self.table.values()[start * d..(t + 1) * d]
    }

    fn state(&self) -> EnvState {
        EnvState {
            t: self.cursor,
            window: self.window(self.cursor),
        }
    }

    pub fn reset(&mut self) -> EnvState {
        self.reset_at(self.first_decision()).expect("first decision is valid")
    }

    /// Starts an episode at decision timestep `t`.
    pub fn reset_at(&mut self, t: usize) -> Result<EnvState> {
        if t < self.first_decision() || t >= self.table.timesteps() {
            return Err(Error::Env(format!(
                "timestep {t} does not end a full window in [{}, {})",
                self.first_decision(),
                self.table.timesteps()
            )));
        }
        self.cursor = t;
        self.done = false;
        Ok(self.state())
    }

    pub fn step(&mut self, action: u8) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Env("step called after the episode ended".into()));
        }
        if action > 1 {
            return Err(Error::Env(format!("action {action} is not 0 or 1")));
        }
        let t = self.cursor;
        let label = self.table.labels()[t];
        let penalty = self.penalty.get(t);
        let last = t + 1 >= self.table.timesteps();
        let next_t = if last { t } else { t + 1 };
        let window = self.window(next_t);
        let next = [augment(&window, 0), augment(&window, 1)];
        self.cursor = next_t;
        self.done = last;
        Ok(StepOutcome {
            t,
            label,
            penalty,
            next,
            next_t,
            done: last,
        })
    }
}
