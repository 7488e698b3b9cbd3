//! Run configuration and the end-to-end commands behind the `drsmt` binary:
//! `synth`, `train`, `eval` and `ablate`.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::active::{ActiveConfig, ActiveLearner};
use crate::agent::{run_training, warm_up, write_training_log, AgentConfig, EpisodeLog, QNet, ReplayMemory};
use crate::checkpoint::Checkpoint;
use crate::data::{
    apply_standardize, drop_zero_variance, fit_standardize, kfold_slices, load_csv, normal_windows, synth_generate,
    ScalerStats, SeriesTable, SynthConfig, TableSlice,
};
use crate::diffkernel::Tensor2;
use crate::env::Env;
use crate::error::{Error, Result};
use crate::eval::{validate, EvalReport};
use crate::reward::{LambdaState, RewardConfig};
use crate::vae::{build_vae, compute_penalty, train_vae, PenaltyArray, VaeConfig, VaeModel};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Feature CSV; a synthetic series is generated when absent.
    pub data: Option<PathBuf>,
    /// Optional label file, one 0/1 per row.
    pub labels: Option<PathBuf>,
    /// Parent directory of run directories.
    pub output: PathBuf,
    /// Run directory name; `run-<unix seconds>` when absent.
    pub run_name: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_steps: usize,
    /// Number of validation slices cut from the held-out tail.
    pub folds: usize,
    /// Leading fraction of the series used for training.
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_steps: 25,
            folds: 5,
            train_fraction: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaConfig {
    pub initial: f64,
    pub alpha: f64,
    /// Episode reward the controller steers toward; defaults to 0.8 of the
    /// reward for classifying every training decision correctly.
    pub r_target: Option<f64>,
    pub min: f64,
    pub max: f64,
}

impl Default for LambdaConfig {
    fn default() -> Self {
        Self {
            initial: 1.0,
            alpha: 1e-4,
            r_target: None,
            min: 0.0,
            max: 10.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Pins λ at this value for the whole run.
    pub fixed_lambda: Option<f64>,
    pub disable_al: bool,
}

/// Everything a run depends on. `seed` is required; every other section
/// falls back to its defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub vae: VaeConfig,
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub lambda: LambdaConfig,
    #[serde(default)]
    pub active: ActiveConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            paths: PathsConfig {
                output: PathBuf::from("runs"),
                ..PathsConfig::default()
            },
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            vae: VaeConfig::default(),
            agent: AgentConfig::default(),
            reward: RewardConfig::default(),
            lambda: LambdaConfig::default(),
            active: ActiveConfig::default(),
            ablation: AblationConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.n_steps == 0 || d.folds == 0 {
            return Err(Error::Config("n_steps and folds must be positive".into()));
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        let l = &self.lambda;
        if !(l.min <= l.max) || !(l.alpha >= 0.0) {
            return Err(Error::Config("lambda needs min <= max and alpha >= 0".into()));
        }
        self.agent.validate()?;
        self.reward.validate()?;
        self.active.validate()?;
        for p in [&self.paths.data, &self.paths.labels].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// The run directory, fixing `run_name` to a timestamp if unset.
    pub fn resolve_run_dir(&mut self) -> PathBuf {
        let name = self.paths.run_name.get_or_insert_with(|| {
            let secs = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            format!("run-{secs}")
        });
        self.paths.output.join(name.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    Data,
    Train,
    Eval,
}

impl Stage {
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 1,
            Stage::Data => 2,
            Stage::Train => 3,
            Stage::Eval => 4,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Data => "data",
            Stage::Train => "train",
            Stage::Eval => "eval",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

pub type CmdResult<T> = std::result::Result<T, StageError>;

pub fn load_dataset(cfg: &RunConfig) -> Result<SeriesTable> {
    match &cfg.paths.data {
        Some(p) => load_csv(p, cfg.paths.labels.as_deref()),
        None => synth_generate(&cfg.synth),
    }
}

/// Standardized series with the split used by every command.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub table: SeriesTable,
    /// Rows `[0, train_end)` train the models; the rest is held out.
    pub train_end: usize,
    pub scaler: ScalerStats,
}

impl Prepared {
    pub fn train_table(&self) -> SeriesTable {
        self.table.slice_rows(0, self.train_end)
    }

    /// `folds` validation slices over the held-out rows, with origins in
    /// full-series coordinates.
    pub fn holdout_slices(&self, folds: usize, n_steps: usize) -> Result<Vec<TableSlice>> {
        let holdout = self.table.slice_rows(self.train_end, self.table.timesteps());
        let mut slices = kfold_slices(&holdout, folds, n_steps)?;
        for s in &mut slices {
            s.origin += self.train_end;
        }
        Ok(slices)
    }
}

pub fn split_point(cfg: &RunConfig, timesteps: usize) -> Result<usize> {
    let n = cfg.data.n_steps;
    let train_end = (cfg.data.train_fraction * timesteps as f64).round() as usize;
    if train_end < n || (timesteps - train_end) / cfg.data.folds < n {
        return Err(Error::Data(format!(
            "{timesteps} timesteps cannot hold a training part and {} validation slices of at least {n} rows",
            cfg.data.folds
        )));
    }
    Ok(train_end)
}

/// Drops features constant on the training rows and standardizes with
/// statistics of the normal training rows.
pub fn prepare(cfg: &RunConfig, raw: &SeriesTable) -> Result<Prepared> {
    let train_end = split_point(cfg, raw.timesteps())?;
    let train_mask: Vec<bool> = (0..raw.timesteps()).map(|t| t < train_end).collect();
    let (pruned, _) = drop_zero_variance(raw, &train_mask)?;
    let normal: Vec<bool> = (0..raw.timesteps())
        .map(|t| t < train_end && raw.labels()[t] == 0)
        .collect();
    let scaler = fit_standardize(&pruned, &normal)?;
    Ok(Prepared {
        table: apply_standardize(&pruned, &scaler)?,
        train_end,
        scaler,
    })
}

/// Re-applies a stored feature selection and scaler to a raw series.
pub fn prepare_with(cfg: &RunConfig, raw: &SeriesTable, names: &[String], scaler: &ScalerStats) -> Result<Prepared> {
    let keep = names
        .iter()
        .map(|n| {
            raw.feature_names()
                .iter()
                .position(|m| m == n)
                .ok_or_else(|| Error::Data(format!("dataset lacks feature {n:?} the checkpoint was trained on")))
        })
        .collect::<Result<Vec<_>>>()?;
    let table = apply_standardize(&raw.select_features(&keep), scaler)?;
    Ok(Prepared {
        train_end: split_point(cfg, raw.timesteps())?,
        table,
        scaler: scaler.clone(),
    })
}

/// Hash of the training rows and validation slice boundaries.
pub fn split_hash(prepared: &Prepared, slices: &[TableSlice]) -> u64 {
    let mut h = DefaultHasher::new();
    prepared.train_end.hash(&mut h);
    for v in prepared.train_table().values() {
        v.to_bits().hash(&mut h);
    }
    prepared.train_table().labels().hash(&mut h);
    for s in slices {
        (s.origin, s.table.timesteps()).hash(&mut h);
    }
    h.finish()
}

fn vae_checkpoint(model: &VaeModel, prepared: &Prepared) -> Checkpoint {
    let names = serde_json::to_string(prepared.table.feature_names()).expect("names serialize");
    let mut ckpt = model.to_checkpoint().with_meta("feature_names", names);
    ckpt.push_tensor("scaler.mean", Tensor2::row_vector(&prepared.scaler.mean));
    ckpt.push_tensor("scaler.std", Tensor2::row_vector(&prepared.scaler.std));
    ckpt
}

fn scaler_from_checkpoint(ckpt: &Checkpoint) -> Result<(Vec<String>, ScalerStats)> {
    let names: Vec<String> = ckpt
        .meta("feature_names")
        .and_then(|v| serde_json::from_str(v).ok())
        .ok_or_else(|| Error::Config("vae checkpoint lacks feature_names".into()))?;
    let row = |n: &str| {
        ckpt.tensor(n)
            .map(|t| t.as_slice().to_vec())
            .ok_or_else(|| Error::Config(format!("vae checkpoint lacks {n}")))
    };
    Ok((
        names,
        ScalerStats {
            mean: row("scaler.mean")?,
            std: row("scaler.std")?,
        },
    ))
}

/// The trained reconstruction model and penalty over the full series.
pub struct VaeStage {
    pub model: VaeModel,
    pub penalty: PenaltyArray,
    /// Mean loss per epoch.
    pub trace: Vec<f64>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn vae_stage(cfg: &RunConfig, prepared: &Prepared) -> Result<VaeStage> {
    let n = cfg.data.n_steps;
    let vae_cfg = VaeConfig {
        seed: cfg.seed,
        ..cfg.vae.clone()
    };
    let mut model = build_vae(n, prepared.table.features(), &vae_cfg)?;
    let windows = normal_windows(&prepared.train_table(), n)?;
    let trace = train_vae(&mut model, &windows, &mut stream_rng(cfg.seed, 1))?;
    info!(
        "VAE trained on {} normal windows, final loss {:.5}",
        windows.len(),
        trace.last().copied().unwrap_or(f64::NAN)
    );
    let penalty = compute_penalty(&model, &prepared.table, n)?;
    Ok(VaeStage { model, penalty, trace })
}

/// Default controller target: 0.8 of the reward for a perfect pass over
/// the training decisions.
pub fn default_r_target(cfg: &RunConfig, train: &SeriesTable) -> f64 {
    let labels = &train.labels()[cfg.data.n_steps - 1..];
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    0.8 * (cfg.reward.tp_val * pos + cfg.reward.tn_val * neg)
}

pub fn lambda_state(cfg: &RunConfig, train: &SeriesTable) -> Result<LambdaState> {
    match cfg.ablation.fixed_lambda {
        Some(v) => Ok(LambdaState::fixed(v)),
        None => {
            let l = &cfg.lambda;
            let target = l.r_target.unwrap_or_else(|| default_r_target(cfg, train));
            LambdaState::new(l.initial, l.alpha, target, l.min, l.max)
        }
    }
}

#[derive(Clone, Debug)]
pub struct AgentStage {
    pub net: QNet,
    pub lambda: LambdaState,
    pub log: Vec<EpisodeLog>,
    pub active: Option<ActiveLearner>,
}

pub fn agent_stage(cfg: &RunConfig, prepared: &Prepared, penalty: &PenaltyArray) -> Result<AgentStage> {
    let n = cfg.data.n_steps;
    let train = prepared.train_table();
    let mut env = Env::new(train.clone(), penalty.rebase(0, prepared.train_end, n), n)?;
    let mut rng = stream_rng(cfg.seed, 2);
    let net = QNet::new(n, env.features() + 1, cfg.agent.hidden, cfg.agent.layers, &mut rng)?;
    let mut memory = ReplayMemory::new(cfg.agent.replay_capacity);
    let mut lambda = lambda_state(cfg, &train)?;
    let seeded = warm_up(
        &mut env,
        &mut memory,
        cfg.agent.warmup,
        cfg.agent.warmup_strategy,
        &cfg.reward,
        lambda.lambda,
        &mut rng,
    )?;
    info!(
        "warm-up stored {} transitions from {} rollouts",
        memory.len(),
        seeded.starts.len()
    );
    let mut active = if cfg.ablation.disable_al {
        None
    } else {
        Some(ActiveLearner::new(cfg.active.clone(), &env)?)
    };
    let out = run_training(
        &mut env,
        net,
        &mut memory,
        &mut lambda,
        active.as_mut(),
        &cfg.reward,
        &cfg.agent,
        &mut rng,
    )?;
    Ok(AgentStage {
        net: out.net,
        lambda,
        log: out.log,
        active,
    })
}

fn qnet_checkpoint(net: &QNet, lambda: f64) -> Checkpoint {
    net.to_checkpoint().with_meta("lambda", format!("{lambda:?}"))
}

pub const VAE_CKPT: &str = "vae.ckpt";
pub const QNET_CKPT: &str = "qnet.ckpt";
pub const REPORT_JSON: &str = "report.json";
pub const EVAL_REPORT_JSON: &str = "eval_report.json";

/// What a training run produced.
#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    pub run_dir: PathBuf,
    pub report: EvalReport,
    pub log: Vec<EpisodeLog>,
    pub lambda: LambdaState,
    pub split_hash: u64,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Trains the agent on an already prepared series and writes every artifact
/// of the run to `run_dir`.
pub fn train_into(cfg: &RunConfig, prepared: &Prepared, vae: &VaeStage, run_dir: &Path) -> CmdResult<TrainArtifacts> {
    create_dir(run_dir).at(Stage::Config)?;
    let mut effective = cfg.clone();
    if effective.ablation.fixed_lambda.is_none() && effective.lambda.r_target.is_none() {
        effective.lambda.r_target = Some(default_r_target(cfg, &prepared.train_table()));
    }
    effective.vae.seed = cfg.seed;
    write(&run_dir.join("effective_config.toml"), &effective.to_toml()).at(Stage::Config)?;
    vae_checkpoint(&vae.model, prepared)
        .save(&run_dir.join(VAE_CKPT))
        .at(Stage::Train)?;
    vae.penalty.write(&run_dir.join("penalty.txt")).at(Stage::Train)?;

    let agent = agent_stage(cfg, prepared, &vae.penalty).at(Stage::Train)?;
    qnet_checkpoint(&agent.net, agent.lambda.lambda)
        .save(&run_dir.join(QNET_CKPT))
        .at(Stage::Train)?;
    agent
        .lambda
        .write_history(&run_dir.join("lambda_history.csv"))
        .at(Stage::Train)?;
    write_training_log(&agent.log, &run_dir.join("training_log.csv")).at(Stage::Train)?;
    if let Some(active) = &agent.active {
        active.write_audit(&run_dir.join("al_audit.csv")).at(Stage::Train)?;
    }

    let slices = prepared
        .holdout_slices(cfg.data.folds, cfg.data.n_steps)
        .at(Stage::Eval)?;
    let report = validate(&slices, &vae.penalty, &agent.net, &cfg.reward, agent.lambda.lambda).at(Stage::Eval)?;
    write_report(&report, &slices, run_dir, REPORT_JSON).at(Stage::Eval)?;
    info!(
        "validation: mean F1 {:.4}, mean AU-PR {}",
        report.mean_f1,
        report.mean_aupr.map_or("n/a".into(), |a| format!("{a:.4}"))
    );
    Ok(TrainArtifacts {
        run_dir: run_dir.to_path_buf(),
        split_hash: split_hash(prepared, &slices),
        report,
        log: agent.log,
        lambda: agent.lambda,
    })
}

fn write_report(report: &EvalReport, slices: &[TableSlice], dir: &Path, name: &str) -> Result<()> {
    report.write_json(&dir.join(name))?;
    let stem = name.trim_end_matches(".json");
    write(&dir.join(format!("{stem}.csv")), &report.summary_csv())?;
    report.write_plot_data(slices, &dir.join(format!("{stem}_plots")))
}

fn prepare_stage(cfg: &RunConfig) -> CmdResult<Prepared> {
    cfg.validate().at(Stage::Config)?;
    let raw = load_dataset(cfg).at(Stage::Data)?;
    prepare(cfg, &raw).at(Stage::Data)
}

/// Full pipeline: data, VAE, penalty, warm-up, training, validation.
/// Resolves `run_name` in `cfg` when it is unset.
pub fn cmd_train(cfg: &mut RunConfig) -> CmdResult<TrainArtifacts> {
    let run_dir = cfg.resolve_run_dir();
    let prepared = prepare_stage(cfg)?;
    let vae = vae_stage(cfg, &prepared).at(Stage::Train)?;
    train_into(cfg, &prepared, &vae, &run_dir)
}

/// Validation only, from the checkpoints in `run_dir`. Writes
/// `eval_report.json` there and returns the report.
pub fn cmd_eval(cfg: &RunConfig, run_dir: &Path) -> CmdResult<EvalReport> {
    cfg.validate().at(Stage::Config)?;
    let load = |name: &str| -> Result<Checkpoint> { Checkpoint::load(&run_dir.join(name)) };
    let tag = |path: PathBuf| {
        move |e: Error| Error::Checkpoint {
            path: path.clone(),
            reason: e.to_string(),
        }
    };
    let vae_path = run_dir.join(VAE_CKPT);
    let q_path = run_dir.join(QNET_CKPT);
    let vae_ckpt = load(VAE_CKPT).at(Stage::Eval)?;
    let vae = VaeModel::from_checkpoint(&vae_ckpt)
        .map_err(tag(vae_path.clone()))
        .at(Stage::Eval)?;
    let (names, scaler) = scaler_from_checkpoint(&vae_ckpt)
        .map_err(tag(vae_path.clone()))
        .at(Stage::Eval)?;
    let q_ckpt = load(QNET_CKPT).at(Stage::Eval)?;
    let net = QNet::from_checkpoint(&q_ckpt)
        .map_err(tag(q_path.clone()))
        .at(Stage::Eval)?;
    let lambda: f64 = q_ckpt
        .meta("lambda")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint {
            path: q_path.clone(),
            reason: "missing lambda".into(),
        })
        .at(Stage::Eval)?;
    let n = cfg.data.n_steps;
    if net.n_steps() != n || vae.n_steps != n || net.input_size() != vae.features + 1 {
        return Err(Error::Checkpoint {
            path: q_path,
            reason: format!(
                "architecture mismatch: q-net {}x{}, vae {}x{}, config n_steps {n}",
                net.n_steps(),
                net.input_size(),
                vae.n_steps,
                vae.features
            ),
        })
        .at(Stage::Eval);
    }

    let raw = load_dataset(cfg).at(Stage::Data)?;
    let prepared = prepare_with(cfg, &raw, &names, &scaler).at(Stage::Data)?;
    let penalty = compute_penalty(&vae, &prepared.table, n).at(Stage::Eval)?;
    let slices = prepared.holdout_slices(cfg.data.folds, n).at(Stage::Eval)?;
    let report = validate(&slices, &penalty, &net, &cfg.reward, lambda).at(Stage::Eval)?;
    write_report(&report, &slices, run_dir, EVAL_REPORT_JSON).at(Stage::Eval)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSummary {
    pub data: PathBuf,
    pub labels: PathBuf,
    pub timesteps: usize,
    pub features: usize,
    pub anomaly_rate: f64,
}

impl fmt::Display for SynthSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "wrote {} timesteps x {} features to {} (labels {}), anomaly rate {:.4}",
            self.timesteps,
            self.features,
            self.data.display(),
            self.labels.display(),
            self.anomaly_rate
        )
    }
}

/// Writes the configured synthetic series to `paths.data` / `paths.labels`,
/// or `data.csv` / `labels.csv` under `paths.output`.
pub fn cmd_synth(cfg: &RunConfig) -> CmdResult<SynthSummary> {
    let table = synth_generate(&cfg.synth).at(Stage::Config)?;
    let data = cfg
        .paths
        .data
        .clone()
        .unwrap_or_else(|| cfg.paths.output.join("data.csv"));
    let labels = cfg
        .paths
        .labels
        .clone()
        .unwrap_or_else(|| cfg.paths.output.join("labels.csv"));
    for p in [&data, &labels] {
        if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent).at(Stage::Data)?;
        }
    }
    table.write_csv(&data, &labels).at(Stage::Data)?;
    Ok(SynthSummary {
        data,
        labels,
        timesteps: table.timesteps(),
        features: table.features(),
        anomaly_rate: table.anomaly_count() as f64 / table.timesteps() as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub split_hash: u64,
    pub mean_f1: f64,
    pub mean_aupr: Option<f64>,
    pub std_aupr: Option<f64>,
    /// First episode whose rollout F1 reached the run's best.
    pub episodes_to_best_f1: usize,
}

pub fn episodes_to_best(log: &[EpisodeLog]) -> usize {
    let best = log.iter().map(|r| r.rollout_f1).fold(f64::NEG_INFINITY, f64::max);
    log.iter().find(|r| r.rollout_f1 == best).map_or(0, |r| r.episode)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    let mut out = String::from("variant,seed,split_hash,mean_f1,mean_aupr,std_aupr,episodes_to_best_f1\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{:016x},{:?},{},{},{}",
            r.variant,
            r.seed,
            r.split_hash,
            r.mean_f1,
            opt(r.mean_aupr),
            opt(r.std_aupr),
            r.episodes_to_best_f1
        )
        .expect("write to string");
    }
    out
}

/// Full, fixed-λ and no-AL runs on one split and one VAE; writes
/// `ablation.csv` and one subdirectory per variant.
pub fn cmd_ablate(cfg: &mut RunConfig) -> CmdResult<(Vec<AblationRow>, Vec<TrainArtifacts>)> {
    let run_dir = cfg.resolve_run_dir();
    let prepared = prepare_stage(cfg)?;
    let vae = vae_stage(cfg, &prepared).at(Stage::Train)?;
    let fixed = cfg.ablation.fixed_lambda.unwrap_or(cfg.lambda.initial);
    let mut variants = Vec::new();
    for name in ["full", "fixed_lambda", "no_al"] {
        let mut v = cfg.clone();
        v.ablation = AblationConfig {
            fixed_lambda: (name == "fixed_lambda").then_some(fixed),
            disable_al: name == "no_al",
        };
        variants.push((name, v));
    }
    let mut rows = Vec::new();
    let mut artifacts = Vec::new();
    for (name, v) in variants {
        info!("ablation variant {name}");
        let art = train_into(&v, &prepared, &vae, &run_dir.join(name))?;
        rows.push(AblationRow {
            variant: name.to_string(),
            seed: v.seed,
            split_hash: art.split_hash,
            mean_f1: art.report.mean_f1,
            mean_aupr: art.report.mean_aupr,
            std_aupr: art.report.std_aupr,
            episodes_to_best_f1: episodes_to_best(&art.log),
        });
        artifacts.push(art);
    }
    write(&run_dir.join("ablation.csv"), &ablation_csv(&rows)).at(Stage::Eval)?;
    Ok((rows, artifacts))
}
