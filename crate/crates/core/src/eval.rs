//! Confusion-matrix metrics, step-wise AU-PR, greedy validation rollouts
//! over held-out slices and the aggregated report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{greedy_action, QNet};
use crate::data::TableSlice;
use crate::env::Env;
use crate::error::{Error, Result};
use crate::reward::{reward_vector, RewardConfig};
use crate::vae::PenaltyArray;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn confusion(preds: &[u8], truths: &[u8]) -> Result<Confusion> {
    if preds.len() != truths.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} labels",
            preds.len(),
            truths.len()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &y) in preds.iter().zip(truths) {
        match (p, y) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => return Err(Error::Metric(format!("non-binary prediction {p} or label {y}"))),
        }
    }
    Ok(c)
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// `(precision, recall, F1)`; any zero denominator yields 0.
pub fn precision_recall_f1(c: Confusion) -> (f64, f64, f64) {
    let tp = c.tp as f64;
    let p = ratio(tp, tp + c.fp as f64);
    let r = ratio(tp, tp + c.fn_ as f64);
    (p, r, ratio(2.0 * p * r, p + r))
}

/// Precision-recall points, one per unique score threshold from the highest
/// down; a timestep counts as positive when its score is at least the
/// threshold.
pub fn pr_curve(scores: &[f64], truths: &[u8]) -> Result<Vec<(f64, f64)>> {
    if scores.len() != truths.len() {
        return Err(Error::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            truths.len()
        )));
    }
    let positives = truths.iter().filter(|&&y| y == 1).count();
    if positives == 0 {
        return Err(Error::Metric("AU-PR is undefined without positive labels".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("scores contain NaN".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if truths[order[k]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push((tp as f64 / positives as f64, tp as f64 / (tp + fp) as f64));
    }
    Ok(points)
}

/// Average precision: `Σ (R_k − R_{k−1}) · P_k` over the curve from
/// [`pr_curve`].
pub fn aupr(scores: &[f64], truths: &[u8]) -> Result<f64> {
    let mut prev_r = 0.0;
    let mut area = 0.0;
    for (r, p) in pr_curve(scores, truths)? {
        area += (r - prev_r) * p;
        prev_r = r;
    }
    Ok(area)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub slice: usize,
    /// Row of the evaluated series where the slice begins.
    pub origin: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent when the slice holds no anomalies.
    pub aupr: Option<f64>,
    pub total_reward: f64,
    pub timesteps: Vec<usize>,
    pub predictions: Vec<u8>,
    pub truths: Vec<u8>,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub slices: Vec<SliceReport>,
    pub mean_f1: f64,
    pub mean_aupr: Option<f64>,
    /// Population standard deviation of the per-slice AU-PR.
    pub std_aupr: Option<f64>,
}

impl EvalReport {
    pub fn from_slices(slices: Vec<SliceReport>) -> Self {
        let mean_f1 = slices.iter().map(|s| s.f1).sum::<f64>() / slices.len().max(1) as f64;
        let auprs: Vec<f64> = slices.iter().filter_map(|s| s.aupr).collect();
        let (mean_aupr, std_aupr) = if auprs.is_empty() {
            (None, None)
        } else {
            let n = auprs.len() as f64;
            let m = auprs.iter().sum::<f64>() / n;
            let var = auprs.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
            (Some(m), Some(var.sqrt()))
        };
        Self {
            slices,
            mean_f1,
            mean_aupr,
            std_aupr,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Metric(format!("{}: {e}", path.display())))
    }

    /// `slice,origin,precision,recall,f1,aupr` plus a trailing aggregate row.
    pub fn summary_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let mut out = String::from("slice,origin,precision,recall,f1,aupr\n");
        for s in &self.slices {
            writeln!(
                out,
                "{},{},{:?},{:?},{:?},{}",
                s.slice,
                s.origin,
                s.precision,
                s.recall,
                s.f1,
                fmt(s.aupr)
            )
            .expect("write to string");
        }
        writeln!(out, "mean,,,,{:?},{}", self.mean_f1, fmt(self.mean_aupr)).expect("write to string");
        out
    }

    /// Per-slice plot data: `slice_<k>_series.csv` with
    /// `timestep,value0,prediction,truth,score` and `slice_<k>_pr.csv` with
    /// `recall,precision`.
    pub fn write_plot_data(&self, slices: &[TableSlice], dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (rep, slice) in self.slices.iter().zip(slices) {
            let mut series = String::from("timestep,value0,prediction,truth,score\n");
            for (k, &t) in rep.timesteps.iter().enumerate() {
                let local = t - slice.origin;
                writeln!(
                    series,
                    "{t},{:?},{},{},{:?}",
                    slice.table.value(local, 0),
                    rep.predictions[k],
                    rep.truths[k],
                    rep.scores[k]
                )
                .expect("write to string");
            }
            let path = dir.join(format!("slice_{}_series.csv", rep.slice));
            fs::write(&path, series).map_err(|e| Error::io(&path, e))?;
            let mut pr = String::from("recall,precision\n");
            if let Ok(points) = pr_curve(&rep.scores, &rep.truths) {
                for (r, p) in points {
                    writeln!(pr, "{r:?},{p:?}").expect("write to string");
                }
            }
            let path = dir.join(format!("slice_{}_pr.csv", rep.slice));
            fs::write(&path, pr).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn slice_report(
    slice: usize,
    origin: usize,
    timesteps: Vec<usize>,
    predictions: Vec<u8>,
    truths: Vec<u8>,
    scores: Vec<f64>,
    total_reward: f64,
) -> Result<SliceReport> {
    let (precision, recall, f1) = precision_recall_f1(confusion(&predictions, &truths)?);
    let aupr = if truths.contains(&1) {
        Some(aupr(&scores, &truths)?)
    } else {
        None
    };
    Ok(SliceReport {
        slice,
        origin,
        precision,
        recall,
        f1,
        aupr,
        total_reward,
        timesteps,
        predictions,
        truths,
        scores,
    })
}

/// Greedy (ε = 0) rollout over each slice. Predictions are the argmax
/// actions and scores `Q(s,1) − Q(s,0)`. `penalty` is indexed like the
/// series the slices were cut from.
pub fn validate(
    slices: &[TableSlice],
    penalty: &PenaltyArray,
    net: &QNet,
    reward_cfg: &RewardConfig,
    lambda: f64,
) -> Result<EvalReport> {
    let n_steps = net.n_steps();
    let mut reports = Vec::with_capacity(slices.len());
    for (k, slice) in slices.iter().enumerate() {
        let end = slice.origin + slice.table.timesteps();
        let mut env = Env::new(slice.table.clone(), penalty.rebase(slice.origin, end, n_steps), n_steps)?;
        let mut state = env.reset().view(0);
        let n = env.decision_count();
        let (mut ts, mut preds, mut truths, mut scores) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        let mut total = 0.0;
        loop {
            let q = net.q_values(&state)?;
            let action = greedy_action(q);
            let out = env.step(action)?;
            total += reward_vector(reward_cfg, out.label, out.penalty, lambda)[action as usize];
            ts.push(slice.origin + out.t);
            preds.push(action);
            truths.push(out.label);
            scores.push(q[1] - q[0]);
            let [n0, n1] = out.next;
            state = if action == 0 { n0 } else { n1 };
            if out.done {
                break;
            }
        }
        reports.push(slice_report(k, slice.origin, ts, preds, truths, scores, total)?);
    }
    Ok(EvalReport::from_slices(reports))
}

/// Coin-flip predictions with uniform random scores over the same decision
/// timesteps as [`validate`].
pub fn random_baseline<R: Rng + ?Sized>(slices: &[TableSlice], n_steps: usize, rng: &mut R) -> Result<EvalReport> {
    let mut reports = Vec::with_capacity(slices.len());
    for (k, slice) in slices.iter().enumerate() {
        let len = slice.table.timesteps();
        if len < n_steps {
            return Err(Error::Env(format!("slice {k} is shorter than the window length")));
        }
        let ts: Vec<usize> = (n_steps - 1..len).collect();
        let truths: Vec<u8> = ts.iter().map(|&t| slice.table.labels()[t]).collect();
        let preds: Vec<u8> = ts.iter().map(|_| rng.gen_range(0..2)).collect();
        let scores: Vec<f64> = ts.iter().map(|_| rng.gen()).collect();
        let global = ts.iter().map(|t| slice.origin + t).collect();
        reports.push(slice_report(k, slice.origin, global, preds, truths, scores, 0.0)?);
    }
    Ok(EvalReport::from_slices(reports))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{kfold_slices, SeriesTable};

    #[test]
    fn confusion_examples() {
        let c = confusion(&[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (2, 1, 0, 0));
        assert_eq!(confusion(&[1, 1], &[0, 0]).unwrap().fp, 2);
        assert!(confusion(&[1], &[1, 0]).is_err());
        assert!(confusion(&[2], &[1]).is_err());
    }

    #[test]
    fn prf_examples() {
        let c = |tp, fp, fn_| Confusion { tp, tn: 0, fp, fn_ };
        assert_eq!(precision_recall_f1(c(2, 0, 0)), (1.0, 1.0, 1.0));
        assert_eq!(precision_recall_f1(c(0, 0, 5)), (0.0, 0.0, 0.0));
        let (p, r, f) = precision_recall_f1(c(1, 1, 3));
        assert_eq!((p, r), (0.5, 0.25));
        assert!((f - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(aupr(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        let a = aupr(&[0.3; 5], &[1, 0, 0, 1, 0]).unwrap();
        assert!((a - 0.4).abs() < 1e-12);
        assert!(aupr(&[0.1, 0.2], &[0, 0]).is_err());
        assert!(aupr(&[0.1], &[0, 1]).is_err());
    }

    #[test]
    fn aggregation() {
        let mk = |f1: f64, a: Option<f64>| SliceReport {
            slice: 0,
            origin: 0,
            precision: 0.0,
            recall: 0.0,
            f1,
            aupr: a,
            total_reward: 0.0,
            timesteps: vec![],
            predictions: vec![],
            truths: vec![],
            scores: vec![],
        };
        let one = EvalReport::from_slices(vec![mk(0.4, Some(0.3))]);
        assert_eq!((one.mean_f1, one.mean_aupr, one.std_aupr), (0.4, Some(0.3), Some(0.0)));
        let two = EvalReport::from_slices(vec![mk(0.2, Some(0.2)), mk(0.6, Some(0.6)), mk(1.0, None)]);
        assert!((two.mean_f1 - 0.6).abs() < 1e-12);
        assert!((two.mean_aupr.unwrap() - 0.4).abs() < 1e-12);
        assert!((two.std_aupr.unwrap() - 0.2).abs() < 1e-12);
    }

    fn slices() -> (Vec<TableSlice>, PenaltyArray) {
        let t_len = 120;
        let values = (0..t_len).map(|t| (t as f64 * 0.2).cos()).collect();
        let labels = (0..t_len).map(|t| u8::from(t % 11 == 5)).collect();
        let table = SeriesTable::new(values, labels, vec!["x".into()]).unwrap();
        (kfold_slices(&table, 3, 4).unwrap(), PenaltyArray(vec![0.0; t_len]))
    }

    #[test]
    fn zero_network_predicts_normal() {
        let mut net = QNet::new(4, 2, 3, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for id in net.params.ids().collect::<Vec<_>>() {
            net.params.value_mut(id).fill(0.0);
        }
        let (sl, p) = slices();
        let rep = validate(&sl, &p, &net, &RewardConfig::default(), 1.0).unwrap();
        assert_eq!(rep.slices.len(), 3);
        for (s, slice) in rep.slices.iter().zip(&sl) {
            assert!(s.predictions.iter().all(|&a| a == 0));
            assert_eq!(s.recall, 0.0);
            assert_eq!(s.predictions.len(), slice.table.timesteps() - 3);
            assert_eq!(s.timesteps[0], slice.origin + 3);
        }
        let single = validate(&sl[..1], &p, &net, &RewardConfig::default(), 1.0).unwrap();
        assert_eq!(single.mean_f1, single.slices[0].f1);
        assert_eq!(single.mean_aupr, single.slices[0].aupr);
    }

    #[test]
    fn report_json_round_trip_and_plots() {
        let net = QNet::new(4, 2, 3, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (sl, p) = slices();
        let rep = validate(&sl, &p, &net, &RewardConfig::default(), 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        rep.write_json(&path).unwrap();
        assert_eq!(EvalReport::read_json(&path).unwrap(), rep);
        rep.write_plot_data(&sl, dir.path()).unwrap();
        let series = fs::read_to_string(dir.path().join("slice_0_series.csv")).unwrap();
        assert_eq!(series.lines().count(), sl[0].table.timesteps() - 3 + 1);
        assert!(rep.summary_csv().lines().last().unwrap().starts_with("mean,"));
        let base = random_baseline(&sl, 4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(base.slices[1].timesteps, rep.slices[1].timesteps);
    }

    proptest! {
        #[test]
        fn aupr_invariant_under_monotone_maps(
            pairs in proptest::collection::vec((0.0f64..1.0, 0u8..2), 2..30)
        ) {
            let (s, y): (Vec<f64>, Vec<u8>) = pairs.into_iter().unzip();
            prop_assume!(y.contains(&1));
            let a = aupr(&s, &y).unwrap();
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            prop_assert!((a - aupr(&t, &y).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
