//! Scanpath similarity (SS, FED on grid-quantized strings) and per-pack
//! fixation saliency (CC, NSS on Gaussian-smoothed maps).

mod saliency;
mod strings;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use saliency::{cc, nss, saliency_map, SaliencyConfig, SaliencyMap};
pub use strings::{edit_distance, quantize, sequence_score, ClusterString, Grid};

use crate::domain::{Fixation, FixationPack, Scanpath};
use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub grid: Grid,
    pub saliency: SaliencyConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub trial_id: String,
    pub ss: f64,
    pub ss_pack: f64,
    pub fed: f64,
    pub fed_pack: f64,
    /// `None` when every ground-truth pack is empty.
    pub cc_pack: Option<f64>,
    pub nss_pack: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ss: f64,
    pub ss_pack: f64,
    pub fed: f64,
    pub fed_pack: f64,
    pub cc_pack: f64,
    pub nss_pack: f64,
    pub n_trials: usize,
    pub per_trial: Vec<TrialMetrics>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn evaluate_trial(trial_id: &str, pred: &Scanpath, gt: &Scanpath, cfg: &MetricConfig) -> Result<TrialMetrics> {
    if pred.packs.len() != gt.packs.len() {
        return Err(Error::PackCount {
            trial_id: trial_id.to_string(),
            pred: pred.packs.len(),
            gt: gt.packs.len(),
        });
    }
    let a = quantize(&pred.flatten(), cfg.grid);
    let b = quantize(&gt.flatten(), cfg.grid);
    let mut ss_pack = Vec::with_capacity(gt.packs.len());
    let mut fed_pack = Vec::with_capacity(gt.packs.len());
    let mut cc_pack = Vec::new();
    let mut nss_pack = Vec::new();
    for (p, g) in pred.packs.iter().zip(&gt.packs) {
        let pa = quantize(&p.fixations, cfg.grid);
        let ga = quantize(&g.fixations, cfg.grid);
        ss_pack.push(sequence_score(&pa, &ga));
        fed_pack.push(edit_distance(&pa, &ga) as f64);
        if !g.is_empty() {
            let pm = saliency_map(&p.fixations, cfg.saliency);
            let gm = saliency_map(&g.fixations, cfg.saliency);
            cc_pack.push(cc(&pm, &gm)?);
            nss_pack.extend(nss(&pm, &g.fixations));
        }
    }
    Ok(TrialMetrics {
        trial_id: trial_id.to_string(),
        ss: sequence_score(&a, &b),
        ss_pack: mean(ss_pack.into_iter()).unwrap_or(1.0),
        fed: edit_distance(&a, &b) as f64,
        fed_pack: mean(fed_pack.into_iter()).unwrap_or(0.0),
        cc_pack: mean(cc_pack.into_iter()),
        nss_pack: mean(nss_pack.into_iter()),
    })
}

/// Per-trial metrics are computed in parallel and reduced in trial order.
pub fn evaluate(ids: &[String], preds: &[Scanpath], gts: &[Scanpath], cfg: &MetricConfig) -> Result<MetricsReport> {
    if preds.len() != gts.len() || ids.len() != gts.len() {
        return Err(Error::Config(format!(
            "evaluate needs matching lists: {} ids, {} predictions, {} ground truths",
            ids.len(),
            preds.len(),
            gts.len()
        )));
    }
    let per_trial = par::map_range(gts.len(), |i| evaluate_trial(&ids[i], &preds[i], &gts[i], cfg))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let avg = |f: fn(&TrialMetrics) -> Option<f64>| mean(per_trial.iter().filter_map(f)).unwrap_or(0.0);
    Ok(MetricsReport {
        ss: avg(|t| Some(t.ss)),
        ss_pack: avg(|t| Some(t.ss_pack)),
        fed: avg(|t| Some(t.fed)),
        fed_pack: avg(|t| Some(t.fed_pack)),
        cc_pack: avg(|t| t.cc_pack),
        nss_pack: avg(|t| t.nss_pack),
        n_trials: per_trial.len(),
        per_trial,
    })
}

/// Uniform random fixations with the ground truth's pack lengths.
pub fn random_scanpaths(gts: &[Scanpath], seed: u64) -> Vec<Scanpath> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gts.iter()
        .map(|gt| {
            Scanpath::new(
                gt.packs
                    .iter()
                    .map(|p| {
                        FixationPack::new(
                            (0..p.len())
                                .map(|_| Fixation::new(rng.random::<f64>(), rng.random::<f64>()))
                                .collect(),
                        )
                    })
                    .collect(),
            )
        })
        .collect()
}

const COLUMNS: [&str; 6] = ["SS ↑", "SSpack ↑", "FED ↓", "FEDpack ↓", "CCpack ↑", "NSSpack ↑"];

/// Aligned plain-text table, one row per labelled report.
pub fn format_table(rows: &[(&str, &MetricsReport)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.chars().count()).max().unwrap_or(0).max("Method".len());
    let mut out = format!("{:<label_w$}", "Method");
    for c in COLUMNS {
        let _ = write!(out, "  {c:>10}");
    }
    out.push('\n');
    for (label, r) in rows {
        let _ = write!(out, "{label:<label_w$}");
        for v in [r.ss, r.ss_pack, r.fed, r.fed_pack, r.cc_pack, r.nss_pack] {
            let _ = write!(out, "  {v:>10.3}");
        }
        out.push('\n');
    }
    out
}

impl MetricsReport {
    pub fn table(&self, label: &str) -> String {
        format_table(&[(label, self)])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticConfig};

    fn gts(n: usize) -> (Vec<String>, Vec<Scanpath>) {
        let trials = generate(&SyntheticConfig {
            n_trials: n,
            seed: 2,
            ..SyntheticConfig::default()
        })
        .unwrap();
        (
            trials.iter().map(|t| t.trial_id.clone()).collect(),
            trials.into_iter().map(|t| t.gt_scanpath).collect(),
        )
    }

    #[test]
    fn self_comparison_fixed_point() {
        let (ids, g) = gts(20);
        let r = evaluate(&ids, &g, &g, &MetricConfig::default()).unwrap();
        assert_eq!((r.ss, r.ss_pack, r.fed, r.fed_pack), (1.0, 1.0, 0.0, 0.0));
        assert!((r.cc_pack - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_prediction_degenerates() {
        let gt = Scanpath::new(vec![FixationPack::new(vec![Fixation::new(0.1, 0.1), Fixation::new(0.9, 0.9)])]);
        let pred = Scanpath::new(vec![FixationPack::default()]);
        let t = evaluate_trial("t", &pred, &gt, &MetricConfig::default()).unwrap();
        assert_eq!((t.ss, t.fed), (0.0, 2.0));
        assert_eq!(t.cc_pack, Some(0.0));
        assert_eq!(t.nss_pack, Some(0.0));
    }

    #[test]
    fn random_predictions_score_worse() {
        let (ids, g) = gts(50);
        let cfg = MetricConfig::default();
        let rand = evaluate(&ids, &random_scanpaths(&g, 1), &g, &cfg).unwrap();
        assert!(rand.ss < 1.0 && rand.fed > 0.0 && rand.cc_pack < 1.0);
    }

    #[test]
    fn pack_count_mismatch_is_an_error() {
        let (ids, g) = gts(1);
        let mut p = g.clone();
        p[0].packs.pop();
        assert!(matches!(
            evaluate(&ids, &p, &g, &MetricConfig::default()),
            Err(Error::PackCount { .. })
        ));
    }

    #[test]
    fn table_has_six_metric_columns() {
        let (ids, g) = gts(3);
        let r = evaluate(&ids, &g, &g, &MetricConfig::default()).unwrap();
        let t = r.table("self");
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].contains("1.000") && lines[1].contains("0.000"));
    }
}
