//! Classification reward, reconstruction-scaled reward vector and the
//! proportional controller for the scaling coefficient λ.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    /// `λ·p[t]` is added to both actions' rewards.
    #[default]
    AdditiveBoth,
    /// `λ·p[t]` is subtracted from the "normal" action only.
    SubtractOnNormal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub tp_val: f64,
    pub tn_val: f64,
    pub fp_val: f64,
    pub fn_val: f64,
    pub penalty_mode: PenaltyMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            tp_val: 10.0,
            tn_val: 1.0,
            fp_val: -1.0,
            fn_val: -10.0,
            penalty_mode: PenaltyMode::AdditiveBoth,
        }
    }
}

impl RewardConfig {
    /// `TP > TN > 0 > FP > FN`.
    pub fn validate(&self) -> Result<()> {
        if self.tp_val > self.tn_val && self.tn_val > 0.0 && 0.0 > self.fp_val && self.fp_val > self.fn_val {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "reward values must satisfy TP > TN > 0 > FP > FN, got {} {} {} {}",
                self.tp_val, self.tn_val, self.fp_val, self.fn_val
            )))
        }
    }
}

pub fn classification_reward(cfg: &RewardConfig, action: u8, label: u8) -> f64 {
    match (action, label) {
        (1, 1) => cfg.tp_val,
        (0, 0) => cfg.tn_val,
        (1, 0) => cfg.fp_val,
        (0, 1) => cfg.fn_val,
        _ => panic!("action {action} and label {label} must be 0 or 1"),
    }
}

/// Reward for each action at a timestep with label `label` and
/// reconstruction penalty `penalty`, scaled by `lambda`.
pub fn reward_vector(cfg: &RewardConfig, label: u8, penalty: f64, lambda: f64) -> [f64; 2] {
    let r0 = classification_reward(cfg, 0, label);
    let r1 = classification_reward(cfg, 1, label);
    let shaped = lambda * penalty;
    match cfg.penalty_mode {
        PenaltyMode::AdditiveBoth => [r0 + shaped, r1 + shaped],
        PenaltyMode::SubtractOnNormal => [r0 - shaped, r1],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaRecord {
    pub episode: usize,
    /// λ in effect during the episode.
    pub lambda: f64,
    pub episode_reward: f64,
}

/// λ with its controller constants and per-episode history.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaState {
    pub lambda: f64,
    pub alpha: f64,
    pub r_target: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub history: Vec<LambdaRecord>,
}

impl LambdaState {
    pub fn new(lambda0: f64, alpha: f64, r_target: f64, lambda_min: f64, lambda_max: f64) -> Result<Self> {
        if !(lambda_min <= lambda_max) {
            return Err(Error::Config(format!(
                "lambda bounds [{lambda_min}, {lambda_max}] are empty"
            )));
        }
        if ![lambda0, alpha, r_target, lambda_min, lambda_max]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Config("lambda controller constants must be finite".into()));
        }
        Ok(Self {
            lambda: lambda0.clamp(lambda_min, lambda_max),
            alpha,
            r_target,
            lambda_min,
            lambda_max,
            history: Vec::new(),
        })
    }

    /// A controller pinned at `value` (bounds collapse onto it).
    pub fn fixed(value: f64) -> Self {
        Self {
            lambda: value,
            alpha: 0.0,
            r_target: 0.0,
            lambda_min: value,
            lambda_max: value,
            history: Vec::new(),
        }
    }

    /// `λ ← clip(λ + α(R_target − R_episode), λ_min, λ_max)`; the λ used
    /// during the episode is appended to the history.
    pub fn update(&mut self, episode_reward: f64) -> f64 {
        self.history.push(LambdaRecord {
            episode: self.history.len() + 1,
            lambda: self.lambda,
            episode_reward,
        });
        self.lambda = next_lambda(
            self.lambda,
            self.alpha,
            self.r_target,
            episode_reward,
            self.lambda_min,
            self.lambda_max,
        );
        self.lambda
    }

    /// CSV `episode,lambda,episode_reward`.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("episode,lambda,episode_reward\n");
        for r in &self.history {
            writeln!(out, "{},{:?},{:?}", r.episode, r.lambda, r.episode_reward).expect("write to string");
        }
        out
    }

    pub fn write_history(&self, path: &Path) -> Result<()> {
        fs::write(path, self.history_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn next_lambda(lambda: f64, alpha: f64, r_target: f64, r_episode: f64, lambda_min: f64, lambda_max: f64) -> f64 {
    (lambda + alpha * (r_target - r_episode)).clamp(lambda_min, lambda_max)
}

pub fn update_lambda(state: &mut LambdaState, r_episode: f64) -> f64 {
    state.update(r_episode)
}
