//! Series ingestion, feature pruning, standardization, sliding windows,
//! synthetic series generation and contiguous K-fold slicing.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance floor below which a feature counts as constant.
pub const ZERO_VARIANCE_THRESHOLD: f64 = 1e-12;
/// Lower clamp for the standard deviation used when scaling.
pub const STD_FLOOR: f64 = 1e-8;

/// Aligned multivariate series with per-timestep binary labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesTable {
    values: Vec<f64>,
    labels: Vec<u8>,
    feature_names: Vec<String>,
}

impl SeriesTable {
    pub fn new(values: Vec<f64>, labels: Vec<u8>, feature_names: Vec<String>) -> Result<Self> {
        let d = feature_names.len();
        if d == 0 {
            return Err(Error::Data("table has no features".into()));
        }
        if values.len() != labels.len() * d {
            return Err(Error::Data(format!(
                "{} values do not fill {} rows of {} features",
                values.len(),
                labels.len(),
                d
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Data(format!("label {bad} is not 0 or 1")));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        Ok(Self {
            values,
            labels,
            feature_names,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.labels.len()
    }

    pub fn features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let d = self.features();
        &self.values[t * d..(t + 1) * d]
    }

    pub fn value(&self, t: usize, j: usize) -> f64 {
        self.values[t * self.features() + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn anomaly_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    /// Rows `[start, end)` as a new table.
    pub fn slice_rows(&self, start: usize, end: usize) -> SeriesTable {
        assert!(start <= end && end <= self.timesteps());
        let d = self.features();
        SeriesTable {
            values: self.values[start * d..end * d].to_vec(),
            labels: self.labels[start..end].to_vec(),
            feature_names: self.feature_names.clone(),
        }
    }

    /// Keeps the listed feature columns in the given order.
    pub fn select_features(&self, keep: &[usize]) -> SeriesTable {
        let d = self.features();
        let mut values = Vec::with_capacity(self.timesteps() * keep.len());
        for t in 0..self.timesteps() {
            let row = &self.values[t * d..(t + 1) * d];
            values.extend(keep.iter().map(|&j| row[j]));
        }
        SeriesTable {
            values,
            labels: self.labels.clone(),
            feature_names: keep.iter().map(|&j| self.feature_names[j].clone()).collect(),
        }
    }

    /// Writes the data CSV (header + rows) and a one-label-per-line file.
    pub fn write_csv(&self, data_path: &Path, label_path: &Path) -> Result<()> {
        let mut out = self.feature_names.join(",");
        out.push('\n');
        for t in 0..self.timesteps() {
            for (j, v) in self.row(t).iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                write!(out, "{v}").expect("write to string");
            }
            out.push('\n');
        }
        fs::write(data_path, out).map_err(|e| Error::io(data_path, e))?;
        let mut labels = String::with_capacity(self.timesteps() * 2);
        for l in &self.labels {
            writeln!(labels, "{l}").expect("write to string");
        }
        fs::write(label_path, labels).map_err(|e| Error::io(label_path, e))
    }
}

fn parse_label(path: &Path, row: usize, col: usize, cell: &str) -> Result<u8> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        row,
        col,
        cell: cell.to_string(),
    })?;
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else {
        Err(Error::Data(format!(
            "{}: row {row}: label {cell:?} is not 0 or 1",
            path.display()
        )))
    }
}

/// Loads a comma-separated series.
///
/// A first row that does not parse as numbers is taken as the header; a
/// headerless file (SMD layout) gets names `f0, f1, ...`. Labels come from
/// `label_path` (one value per line) or, when absent, from a trailing header
/// column named `label`.
pub fn load_csv(path: &Path, label_path: Option<&Path>) -> Result<SeriesTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .peekable();
    let Some(&(_, first)) = lines.peek() else {
        return Err(Error::Data(format!("{}: empty file", path.display())));
    };
    let first_cells: Vec<&str> = first.split(',').map(str::trim).collect();
    let has_header = first_cells.iter().any(|c| c.parse::<f64>().is_err());
    let mut names: Vec<String> = if has_header {
        lines.next();
        first_cells.iter().map(|s| s.to_string()).collect()
    } else {
        (0..first_cells.len()).map(|j| format!("f{j}")).collect()
    };
    let label_column = label_path.is_none() && names.last().is_some_and(|n| n.eq_ignore_ascii_case("label"));
    if label_column {
        names.pop();
    }
    let width = names.len() + usize::from(label_column);
    let d = names.len();

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (line_no, line) in lines {
        let row = line_no + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width {
            return Err(Error::Data(format!(
                "{}: row {row} has {} cells, expected {width}",
                path.display(),
                cells.len()
            )));
        }
        for (col, cell) in cells[..d].iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                row,
                col: col + 1,
                cell: cell.to_string(),
            })?;
            values.push(v);
        }
        if label_column {
            labels.push(parse_label(path, row, width, cells[d])?);
        }
    }
    let rows = values.len() / d.max(1);

    if let Some(lp) = label_path {
        let text = fs::read_to_string(lp).map_err(|e| Error::io(lp, e))?;
        for (i, line) in text.lines().enumerate() {
            let cell = line.trim();
            if cell.is_empty() || (i == 0 && cell.eq_ignore_ascii_case("label")) {
                continue;
            }
            labels.push(parse_label(lp, i + 1, 1, cell)?);
        }
    } else if !label_column {
        return Err(Error::Data(format!(
            "{}: no label file given and no trailing `label` column",
            path.display()
        )));
    }
    if labels.len() != rows {
        return Err(Error::Data(format!(
            "row-count mismatch: {rows} data rows but {} labels",
            labels.len()
        )));
    }
    SeriesTable::new(values, labels, names)
}

fn masked_mean_std(table: &SeriesTable, mask: &[bool]) -> (Vec<f64>, Vec<f64>, usize) {
    let d = table.features();
    let mut mean = vec![0.0; d];
    let mut n = 0usize;
    for t in (0..table.timesteps()).filter(|&t| mask[t]) {
        n += 1;
        for (m, v) in mean.iter_mut().zip(table.row(t)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    let mut var = vec![0.0; d];
    for t in (0..table.timesteps()).filter(|&t| mask[t]) {
        for ((s, v), m) in var.iter_mut().zip(table.row(t)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / n.max(1) as f64).sqrt()).collect();
    (mean, std, n)
}

fn check_mask(table: &SeriesTable, mask: &[bool]) -> Result<()> {
    if mask.len() != table.timesteps() {
        return Err(Error::Data(format!(
            "mask length {} does not match {} timesteps",
            mask.len(),
            table.timesteps()
        )));
    }
    Ok(())
}

/// Removes features whose standard deviation over the masked rows is below
/// [`ZERO_VARIANCE_THRESHOLD`]. Column order is preserved.
pub fn drop_zero_variance(table: &SeriesTable, train_mask: &[bool]) -> Result<(SeriesTable, Vec<String>)> {
    check_mask(table, train_mask)?;
    let (_, std, n) = masked_mean_std(table, train_mask);
    if n < 2 {
        return Err(Error::Data(format!("variance needs at least 2 training rows, got {n}")));
    }
    let keep: Vec<usize> = (0..table.features())
        .filter(|&j| std[j] >= ZERO_VARIANCE_THRESHOLD)
        .collect();
    if keep.is_empty() {
        return Err(Error::Data(
            "every feature has zero variance on the training rows".into(),
        ));
    }
    let pruned = table.select_features(&keep);
    let names = pruned.feature_names().to_vec();
    Ok((pruned, names))
}

/// Per-feature location and scale fitted on normal training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ScalerStats {
    pub fn features(&self) -> usize {
        self.mean.len()
    }

    fn scale(&self, j: usize) -> f64 {
        self.std[j].max(STD_FLOOR)
    }

    /// Maps standardized values back to the original units.
    pub fn inverse(&self, table: &SeriesTable) -> Result<SeriesTable> {
        self.check(table)?;
        let d = table.features();
        let values = table
            .values()
            .iter()
            .enumerate()
            .map(|(k, &v)| v * self.scale(k % d) + self.mean[k % d])
            .collect();
        SeriesTable::new(values, table.labels().to_vec(), table.feature_names().to_vec())
    }

    fn check(&self, table: &SeriesTable) -> Result<()> {
        if table.features() != self.features() {
            return Err(Error::Data(format!(
                "scaler fitted on {} features, table has {}",
                self.features(),
                table.features()
            )));
        }
        Ok(())
    }
}

pub fn fit_standardize(table: &SeriesTable, normal_train_mask: &[bool]) -> Result<ScalerStats> {
    check_mask(table, normal_train_mask)?;
    let (mean, std, n) = masked_mean_std(table, normal_train_mask);
    if n == 0 {
        return Err(Error::Data("no rows selected to fit the scaler".into()));
    }
    Ok(ScalerStats { mean, std })
}

pub fn apply_standardize(table: &SeriesTable, stats: &ScalerStats) -> Result<SeriesTable> {
    stats.check(table)?;
    let d = table.features();
    let values = table
        .values()
        .iter()
        .enumerate()
        .map(|(k, &v)| (v - stats.mean[k % d]) / stats.scale(k % d))
        .collect();
    SeriesTable::new(values, table.labels().to_vec(), table.feature_names().to_vec())
}

/// A flattened, time-major window of `n_steps` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub start: usize,
    pub values: Vec<f64>,
    /// Label of the final covered timestep.
    pub label: u8,
}

impl Window {
    pub fn end(&self, n_steps: usize) -> usize {
        self.start + n_steps - 1
    }
}

fn window_at(table: &SeriesTable, start: usize, n_steps: usize) -> Window {
    let d = table.features();
    Window {
        start,
        values: table.values()[start * d..(start + n_steps) * d].to_vec(),
        label: table.labels()[start + n_steps - 1],
    }
}

fn check_length(table: &SeriesTable, n_steps: usize) -> Result<()> {
    if n_steps == 0 {
        return Err(Error::Config("n_steps must be at least 1".into()));
    }
    if table.timesteps() < n_steps {
        return Err(Error::Data(format!(
            "series of {} timesteps is shorter than the window length {n_steps}",
            table.timesteps()
        )));
    }
    Ok(())
}

/// All `T - n_steps + 1` windows in start order.
pub fn make_windows(table: &SeriesTable, n_steps: usize) -> Result<Vec<Window>> {
    check_length(table, n_steps)?;
    Ok((0..=table.timesteps() - n_steps)
        .map(|s| window_at(table, s, n_steps))
        .collect())
}

/// Windows whose every covered timestep is labeled normal.
pub fn normal_windows(table: &SeriesTable, n_steps: usize) -> Result<Vec<Window>> {
    check_length(table, n_steps)?;
    let labels = table.labels();
    // anomalies seen in the trailing n_steps rows
    let mut recent = labels[..n_steps - 1].iter().filter(|&&l| l == 1).count();
    let mut out = Vec::new();
    for start in 0..=table.timesteps() - n_steps {
        let end = start + n_steps - 1;
        recent += usize::from(labels[end] == 1);
        if recent == 0 {
            out.push(window_at(table, start, n_steps));
        }
        recent -= usize::from(labels[start] == 1);
    }
    if out.is_empty() {
        return Err(Error::Data("no fully normal window to train the VAE on".into()));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// All features of a segment shift together, up or down.
    MeanShift,
    VarianceBurst,
    CorrelatedFault,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub features: usize,
    pub timesteps: usize,
    pub anomaly_rate: f64,
    pub kind: AnomalyKind,
    /// Mean anomalous-segment length in timesteps.
    pub segment_length: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            features: 5,
            timesteps: 10_000,
            anomaly_rate: 0.05,
            kind: AnomalyKind::MeanShift,
            segment_length: 20,
            seed: 7,
        }
    }
}

/// Shift applied by mean-shift anomalies, in normal standard deviations.
pub const MEAN_SHIFT_STDS: f64 = 5.0;

/// Generates a labeled series: per-feature sinusoids sharing a slow common
/// component, plus Gaussian noise, with contiguous anomalous segments placed
/// one per equal-length block.
pub fn synth_generate(config: &SynthConfig) -> Result<SeriesTable> {
    if !(config.anomaly_rate > 0.0 && config.anomaly_rate < 0.5) {
        return Err(Error::Config(format!(
            "anomaly_rate must lie in (0, 0.5), got {}",
            config.anomaly_rate
        )));
    }
    if config.features == 0 || config.timesteps < 4 || config.segment_length == 0 {
        return Err(Error::Config(
            "synthetic series needs features >= 1, timesteps >= 4, segment_length >= 1".into(),
        ));
    }
    let (d, t_len) = (config.features, config.timesteps);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let tau = std::f64::consts::TAU;

    struct Channel {
        period: f64,
        amplitude: f64,
        phase: f64,
        offset: f64,
        common: f64,
        noise: f64,
    }
    let channels: Vec<Channel> = (0..d)
        .map(|_| Channel {
            period: rng.gen_range(40.0..200.0),
            amplitude: rng.gen_range(0.5..1.5),
            phase: rng.gen_range(0.0..tau),
            offset: rng.gen_range(-1.0..1.0),
            common: rng.gen_range(0.2..0.6),
            noise: rng.gen_range(0.1..0.3),
        })
        .collect();
    let normal_std: Vec<f64> = channels
        .iter()
        .map(|c| (0.5 * c.amplitude * c.amplitude + 0.5 * c.common * c.common + c.noise * c.noise).sqrt())
        .collect();

    let mut values = Vec::with_capacity(t_len * d);
    for t in 0..t_len {
        let common = (tau * t as f64 / 500.0).sin();
        for c in &channels {
            let clean = c.offset + c.amplitude * (tau * t as f64 / c.period + c.phase).sin() + c.common * common;
            values.push(clean + c.noise * std_normal.sample(&mut rng));
        }
    }

    let target = ((config.anomaly_rate * t_len as f64).round() as usize).max(1);
    let segments = ((target as f64 / config.segment_length as f64).round() as usize).clamp(1, target);
    let block = t_len / segments;
    let mut labels = vec![0u8; t_len];
    for k in 0..segments {
        let len = target / segments + usize::from(k < target % segments);
        let lo = k * block + 1;
        let hi = ((k + 1) * block).saturating_sub(len + 1).max(lo);
        let start = rng.gen_range(lo..=hi).min(t_len - len);
        let signs: Vec<f64> = (0..d).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let level = signs[0];
        let freq = rng.gen_range(0.05..0.3);
        for t in start..start + len {
            labels[t] = 1;
            for j in 0..d {
                let v = &mut values[t * d + j];
                let s = normal_std[j];
                match config.kind {
                    AnomalyKind::MeanShift => *v += level * MEAN_SHIFT_STDS * s,
                    AnomalyKind::VarianceBurst => *v += 4.0 * s * std_normal.sample(&mut rng),
                    AnomalyKind::CorrelatedFault => {
                        let shared = 1.0 + 0.5 * (freq * (t - start) as f64).sin();
                        *v += signs[j] * 3.0 * s * shared;
                    }
                }
            }
        }
    }
    let names = (0..d).map(|j| format!("sensor_{j}")).collect();
    SeriesTable::new(values, labels, names)
}

/// A contiguous piece of a table with its starting row in the parent.
#[derive(Clone, Debug, PartialEq)]
pub struct TableSlice {
    pub origin: usize,
    pub table: SeriesTable,
}

/// `k` contiguous, non-overlapping slices of equal length covering the
/// table; the last slice takes the remainder.
pub fn kfold_slices(table: &SeriesTable, k: usize, n_steps: usize) -> Result<Vec<TableSlice>> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let len = table.timesteps() / k;
    if len < n_steps.max(1) {
        return Err(Error::Data(format!(
            "{} timesteps split {k} ways gives slices of {len}, shorter than n_steps = {n_steps}",
            table.timesteps()
        )));
    }
    Ok((0..k)
        .map(|i| {
            let start = i * len;
            let end = if i + 1 == k { table.timesteps() } else { start + len };
            TableSlice {
                origin: start,
                table: table.slice_rows(start, end),
            }
        })
        .collect())
}
