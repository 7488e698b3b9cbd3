//! Variational autoencoder over flattened windows and the per-timestep
//! reconstruction penalty derived from it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{SeriesTable, Window};
use crate::diffkernel::{
    kl_standard_normal, mse_loss, mse_value, reparameterize, Activation, Adam, Dense, ParamSet, Tape, Tensor2, Var,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub latent: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Weight of the KL term.
    pub beta: f64,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent: 8,
            hidden: 64,
            epochs: 50,
            batch: 128,
            lr: 1e-3,
            beta: 1.0,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VaeModel {
    pub params: ParamSet,
    pub n_steps: usize,
    pub features: usize,
    pub config: VaeConfig,
    enc_hidden: Dense,
    enc_out: Dense,
    dec_hidden: Dense,
    dec_out: Dense,
}

struct Forward {
    mu: Var,
    logvar: Var,
    recon: Var,
}

impl VaeModel {
    pub fn input_width(&self) -> usize {
        self.n_steps * self.features
    }

    pub fn latent(&self) -> usize {
        self.config.latent
    }

    fn encode(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let h = self.enc_hidden.forward(tape, &self.params, x)?;
        let stats = self.enc_out.forward(tape, &self.params, h)?;
        let l = self.config.latent;
        let mu = tape.slice_cols(stats, 0, l)?;
        let logvar = tape.slice_cols(stats, l, 2 * l)?;
        Ok((mu, logvar))
    }

    fn decode(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let h = self.dec_hidden.forward(tape, &self.params, z)?;
        self.dec_out.forward(tape, &self.params, h)
    }

    fn forward(&self, tape: &mut Tape, x: Var, noise: Option<Tensor2>) -> Result<Forward> {
        let (mu, logvar) = self.encode(tape, x)?;
        let z = match noise {
            Some(eps) => reparameterize(tape, mu, logvar, eps)?,
            None => mu,
        };
        let recon = self.decode(tape, z)?;
        Ok(Forward { mu, logvar, recon })
    }

    /// Encoder output `[mu | logvar]` for a batch of flattened windows.
    pub fn encode_batch(&self, batch: &Tensor2) -> Result<(Tensor2, Tensor2)> {
        self.check_width(batch.cols())?;
        let mut tape = Tape::new();
        let x = tape.input(batch.clone());
        let (mu, logvar) = self.encode(&mut tape, x)?;
        Ok((tape.value(mu).clone(), tape.value(logvar).clone()))
    }

    fn check_width(&self, width: usize) -> Result<()> {
        if width != self.input_width() {
            return Err(Error::shape("vae input", (1, width), (self.n_steps, self.features)));
        }
        Ok(())
    }

    /// Reconstructs each row of `batch` through the posterior mean.
    pub fn reconstruct_batch(&self, batch: &Tensor2) -> Result<Tensor2> {
        self.check_width(batch.cols())?;
        let mut tape = Tape::new();
        let x = tape.input(batch.clone());
        let f = self.forward(&mut tape, x, None)?;
        Ok(tape.value(f.recon).clone())
    }

    fn elbo(&self, tape: &mut Tape, batch: Tensor2, noise: Tensor2) -> Result<(Var, Var, Var)> {
        let x = tape.input(batch);
        let f = self.forward(tape, x, Some(noise))?;
        let recon = mse_loss(tape, f.recon, x)?;
        let kl = kl_standard_normal(tape, f.mu, f.logvar)?;
        let kl = tape.scale(kl, self.config.beta);
        let loss = tape.add(recon, kl)?;
        Ok((loss, recon, kl))
    }

    /// Training loss of `batch` for fixed reparameterization noise
    /// (rows × latent). The returned parameter copy carries the gradients.
    pub fn loss_and_grads(&self, batch: &Tensor2, noise: &Tensor2) -> Result<(f64, ParamSet)> {
        self.check_width(batch.cols())?;
        let mut tape = Tape::new();
        let (loss, _, _) = self.elbo(&mut tape, batch.clone(), noise.clone())?;
        let mut grads = self.params.clone();
        tape.backward(loss, &mut grads)?;
        Ok((tape.value(loss).item(), grads))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ckpt = Checkpoint::new("vae")
            .with_meta("n_steps", self.n_steps)
            .with_meta("features", self.features)
            .with_meta("latent", c.latent)
            .with_meta("hidden", c.hidden)
            .with_meta("epochs", c.epochs)
            .with_meta("batch", c.batch)
            .with_meta("lr", format!("{:?}", c.lr))
            .with_meta("beta", format!("{:?}", c.beta))
            .with_meta("seed", c.seed);
        ckpt.push_params(&self.params);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != "vae" {
            return Err(Error::Config(format!(
                "expected a vae checkpoint, found {:?}",
                ckpt.kind
            )));
        }
        let get = |k: &str| -> Result<&str> {
            ckpt.meta(k)
                .ok_or_else(|| Error::Config(format!("vae checkpoint lacks {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("vae checkpoint: bad {k}")))
        };
        let float = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("vae checkpoint: bad {k}")))
        };
        let config = VaeConfig {
            latent: num("latent")?,
            hidden: num("hidden")?,
            epochs: num("epochs")?,
            batch: num("batch")?,
            lr: float("lr")?,
            beta: float("beta")?,
            seed: num("seed")? as u64,
        };
        let mut model = build_vae(num("n_steps")?, num("features")?, &config)?;
        ckpt.load_params_into(&mut model.params)?;
        Ok(model)
    }
}

/// Builds encoder `width → hidden → 2·latent` and decoder
/// `latent → hidden → width` with seeded fan-in initialization.
pub fn build_vae(n_steps: usize, features: usize, config: &VaeConfig) -> Result<VaeModel> {
    let width = n_steps * features;
    if width == 0 || config.hidden == 0 || config.latent == 0 {
        return Err(Error::Config("vae sizes must be positive".into()));
    }
    if config.latent >= width {
        return Err(Error::Config(format!(
            "latent size {} must be smaller than the input width {width}",
            config.latent
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParamSet::new();
    let (h, l) = (config.hidden, config.latent);
    let enc_hidden = Dense::new(&mut params, "encoder.hidden", width, h, Activation::Softplus, &mut rng);
    let enc_out = Dense::new(&mut params, "encoder.out", h, 2 * l, Activation::Identity, &mut rng);
    let dec_hidden = Dense::new(&mut params, "decoder.hidden", l, h, Activation::Softplus, &mut rng);
    let dec_out = Dense::new(&mut params, "decoder.out", h, width, Activation::Identity, &mut rng);
    Ok(VaeModel {
        params,
        n_steps,
        features,
        config: config.clone(),
        enc_hidden,
        enc_out,
        dec_hidden,
        dec_out,
    })
}

fn stack_rows(rows: &[&[f64]]) -> Tensor2 {
    Tensor2::from_rows(rows)
}

/// Minimizes reconstruction MSE plus `beta`·KL over mini-batches.
/// Returns the mean loss of each epoch.
pub fn train_vae<R: Rng + ?Sized>(model: &mut VaeModel, windows: &[Window], rng: &mut R) -> Result<Vec<f64>> {
    if windows.is_empty() {
        return Err(Error::Data("train_vae needs at least one window".into()));
    }
    for w in windows {
        model.check_width(w.values.len())?;
    }
    let mut opt = Adam::new(&model.params, model.config.lr);
    let batch = model.config.batch.max(1);
    let latent = model.config.latent;
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut trace = Vec::with_capacity(model.config.epochs);
    for epoch in 0..model.config.epochs {
        order.shuffle(rng);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(batch) {
            let rows: Vec<&[f64]> = chunk.iter().map(|&i| windows[i].values.as_slice()).collect();
            let x_val = stack_rows(&rows);
            let noise_data = (0..chunk.len() * latent)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let noise = Tensor2::from_vec(chunk.len(), latent, noise_data)?;

            let mut tape = Tape::new();
            let (loss, recon, kl) = model.elbo(&mut tape, x_val, noise)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "VAE loss {value} at epoch {epoch} (recon {}, kl {}); lower the learning rate ({})",
                    tape.value(recon).item(),
                    tape.value(kl).item(),
                    model.config.lr
                )));
            }
            tape.backward(loss, &mut model.params)?;
            opt.step(&mut model.params);
            total += value * chunk.len() as f64;
            count += chunk.len();
        }
        trace.push(total / count as f64);
    }
    Ok(trace)
}

/// Deterministic reconstruction of one flattened window (posterior mean).
pub fn reconstruct(model: &VaeModel, window: &[f64]) -> Result<Vec<f64>> {
    let out = model.reconstruct_batch(&Tensor2::row_vector(window))?;
    Ok(out.into_vec())
}

/// Reconstruction error per timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyArray(pub Vec<f64>);

impl PenaltyArray {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, t: usize) -> f64 {
        self.0[t]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Entries `[start, end)` re-based to zero, with the first `n_steps - 1`
    /// entries zeroed as a direct computation on that slice would give.
    pub fn rebase(&self, start: usize, end: usize, n_steps: usize) -> PenaltyArray {
        let mut p = self.0[start..end].to_vec();
        let pad = n_steps.saturating_sub(1).min(p.len());
        p[..pad].iter_mut().for_each(|v| *v = 0.0);
        PenaltyArray(p)
    }

    /// One value per line.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(self.len() * 20);
        for v in &self.0 {
            writeln!(out, "{v:?}").expect("write to string");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let values = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                l.trim().parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    row: i + 1,
                    col: 1,
                    cell: l.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PenaltyArray(values))
    }
}

const PENALTY_BATCH: usize = 256;

/// `p[t]` = mean squared reconstruction error of the window ending at `t`;
/// the first `n_steps - 1` entries are zero.
pub fn compute_penalty(model: &VaeModel, table: &SeriesTable, n_steps: usize) -> Result<PenaltyArray> {
    if n_steps != model.n_steps || table.features() != model.features {
        return Err(Error::Data(format!(
            "VAE trained on {} steps x {} features, got {} x {}",
            model.n_steps,
            model.features,
            n_steps,
            table.features()
        )));
    }
    let t_len = table.timesteps();
    if t_len < n_steps {
        return Err(Error::Data(format!(
            "series of {t_len} timesteps is shorter than the window length {n_steps}"
        )));
    }
    let d = table.features();
    let width = n_steps * d;
    let mut penalty = vec![0.0; t_len];
    let starts: Vec<usize> = (0..=t_len - n_steps).collect();
    for chunk in starts.chunks(PENALTY_BATCH) {
        let rows: Vec<&[f64]> = chunk.iter().map(|&s| &table.values()[s * d..s * d + width]).collect();
        let batch = stack_rows(&rows);
        let recon = model.reconstruct_batch(&batch)?;
        for (k, &s) in chunk.iter().enumerate() {
            penalty[s + n_steps - 1] = mse_value(recon.row(k), batch.row(k));
        }
    }
    Ok(PenaltyArray(penalty))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::data::{make_windows, synth_generate, SynthConfig};

    fn small_config() -> VaeConfig {
        VaeConfig {
            latent: 2,
            hidden: 8,
            epochs: 50,
            batch: 16,
            lr: 1e-2,
            beta: 1.0,
            seed: 3,
        }
    }

    #[test]
    fn build_shapes_and_errors() {
        let m = build_vae(3, 2, &small_config()).unwrap();
        assert_eq!(m.input_width(), 6);
        let (mu, lv) = m.encode_batch(&Tensor2::zeros(1, 6)).unwrap();
        assert_eq!(mu.shape(), (1, 2));
        assert_eq!(lv.shape(), (1, 2));
        assert_eq!(reconstruct(&m, &[0.0; 6]).unwrap().len(), 6);

        let mut cfg = small_config();
        cfg.latent = 6;
        assert!(matches!(build_vae(3, 2, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn build_is_seeded() {
        let a = build_vae(4, 3, &small_config()).unwrap();
        let b = build_vae(4, 3, &small_config()).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn untrained_reconstruction_is_finite_and_deterministic() {
        let m = build_vae(3, 2, &small_config()).unwrap();
        let x = [0.3, -1.0, 2.0, 0.1, 0.0, 5.0];
        let a = reconstruct(&m, &x).unwrap();
        assert_eq!(a.len(), 6);
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, reconstruct(&m, &x).unwrap());
        assert!(reconstruct(&m, &x[..5]).is_err());
    }

    fn constant_windows(value: f64, n: usize) -> Vec<Window> {
        (0..n)
            .map(|s| Window {
                start: s,
                values: vec![value; 6],
                label: 0,
            })
            .collect()
    }

    #[test]
    fn constant_zero_windows_are_learned() {
        let mut m = build_vae(3, 2, &small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trace = train_vae(&mut m, &constant_windows(0.0, 64), &mut rng).unwrap();
        assert!(trace.iter().all(|v| v.is_finite()));
        let recon = reconstruct(&m, &[0.0; 6]).unwrap();
        let err = mse_value(&recon, &[0.0; 6]);
        assert!(err < 1e-3, "reconstruction error {err}");
    }

    #[test]
    fn constant_input_reconstructed_within_tolerance() {
        let mut m = build_vae(3, 2, &small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        train_vae(&mut m, &constant_windows(0.7, 64), &mut rng).unwrap();
        let recon = reconstruct(&m, &[0.7; 6]).unwrap();
        assert!(recon.iter().all(|v| (v - 0.7).abs() < 0.05), "{recon:?}");
    }

    #[test]
    fn nan_loss_aborts_with_diagnostics() {
        let mut cfg = small_config();
        cfg.lr = 1e300;
        cfg.epochs = 5;
        let mut m = build_vae(3, 2, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let windows: Vec<Window> = (0..32)
            .map(|s| Window {
                start: s,
                values: (0..6).map(|k| ((s * 7 + k) % 5) as f64).collect(),
                label: 0,
            })
            .collect();
        match train_vae(&mut m, &windows, &mut rng) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("learning rate")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let mut m = build_vae(3, 2, &small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(train_vae(&mut m, &[], &mut rng).is_err());
    }

    #[test]
    fn penalty_padding_and_per_window_oracle() {
        let table = SeriesTable::new(
            (0..10).map(|v| (v as f64 * 0.37).sin()).collect(),
            vec![0; 5],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let m = build_vae(3, 2, &small_config()).unwrap();
        let p = compute_penalty(&m, &table, 3).unwrap();
        assert_eq!(p.len(), 5);
        assert_eq!(&p.as_slice()[..2], &[0.0, 0.0]);
        for w in make_windows(&table, 3).unwrap() {
            let recon = reconstruct(&m, &w.values).unwrap();
            let err: f64 =
                recon.iter().zip(&w.values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / w.values.len() as f64;
            assert!((p.get(w.start + 2) - err).abs() <= 1e-12);
            assert!(p.get(w.start + 2) > 0.0);
        }
    }

    #[test]
    fn penalty_feature_mismatch() {
        let table = SeriesTable::new(vec![0.0; 9], vec![0; 3], vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let m = build_vae(3, 2, &small_config()).unwrap();
        assert!(compute_penalty(&m, &table, 3).is_err());
    }

    #[test]
    fn trained_vae_separates_spikes() {
        let table = synth_generate(&SynthConfig {
            timesteps: 1200,
            features: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        let clean = SeriesTable::new(table.values().to_vec(), vec![0; 1200], table.feature_names().to_vec()).unwrap();
        let stats = crate::data::fit_standardize(&clean, &[true; 1200]).unwrap();
        let clean = crate::data::apply_standardize(&clean, &stats).unwrap();
        let mut cfg = small_config();
        cfg.latent = 4;
        cfg.hidden = 16;
        cfg.epochs = 20;
        cfg.lr = 3e-3;
        let mut m = build_vae(10, 3, &cfg).unwrap();
        let windows = make_windows(&clean, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let trace = train_vae(&mut m, &windows, &mut rng).unwrap();
        assert!(trace.last() < trace.first());

        let mut spiked = clean.values().to_vec();
        for t in (50..1200).step_by(60) {
            spiked[t * 3] += 8.0;
        }
        let spiked = SeriesTable::new(spiked, vec![0; 1200], clean.feature_names().to_vec()).unwrap();
        let mean = |p: &PenaltyArray| p.as_slice().iter().sum::<f64>() / p.len() as f64;
        let p_clean = compute_penalty(&m, &clean, 10).unwrap();
        let p_spiked = compute_penalty(&m, &spiked, 10).unwrap();
        assert!(mean(&p_clean) < mean(&p_spiked));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = build_vae(3, 2, &small_config()).unwrap();
        let ckpt = m.to_checkpoint();
        let text = ckpt.to_text();
        let back = VaeModel::from_checkpoint(&Checkpoint::parse(&text, Path::new("mem")).unwrap()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.config, m.config);
    }

    #[test]
    fn penalty_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        let p = PenaltyArray(vec![0.0, 0.1, 1.0 / 3.0]);
        p.write(&path).unwrap();
        assert_eq!(PenaltyArray::read(&path).unwrap(), p);
    }

    #[test]
    fn rebase_matches_direct_computation() {
        let table = SeriesTable::new(
            (0..40).map(|v| (v as f64 * 0.21).cos()).collect(),
            vec![0; 20],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let m = build_vae(3, 2, &small_config()).unwrap();
        let full = compute_penalty(&m, &table, 3).unwrap();
        let direct = compute_penalty(&m, &table.slice_rows(7, 15), 3).unwrap();
        assert_eq!(full.rebase(7, 15, 3), direct);
    }

    proptest! {
        #[test]
        fn penalty_shape_invariants(t_len in 3usize..40, n in 1usize..4) {
            prop_assume!(n <= t_len && n * 2 > 1);
            let table = SeriesTable::new(
                (0..t_len * 2).map(|v| (v as f64).sin()).collect(),
                vec![0; t_len],
                vec!["a".into(), "b".into()],
            ).unwrap();
            let cfg = VaeConfig { latent: 1, hidden: 4, ..small_config() };
            let m = build_vae(n, 2, &cfg).unwrap();
            let p = compute_penalty(&m, &table, n).unwrap();
            prop_assert_eq!(p.len(), t_len);
            prop_assert!(p.as_slice()[..n - 1].iter().all(|&v| v == 0.0));
            prop_assert!(p.as_slice().iter().all(|&v| v >= 0.0));
        }
    }
}
