//! Classification metrics: ROC AUC, one-vs-rest macro AUC, average
//! precision, Youden thresholding and percentile bootstrap intervals.
//!
//! Rank statistics are accumulated as integer pair counts, so results do not
//! depend on summation order.

use ndarray::ArrayView2;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::percentile_sorted;
use crate::rng;

fn check_scores(scores: &[f64], n_labels: usize) -> Result<()> {
    if scores.len() != n_labels {
        return Err(Error::invalid(format!("{} scores for {n_labels} labels", scores.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    Ok(())
}

/// Indices sorted by ascending score.
fn ascending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// Positive/negative pair counts `(concordant, tied, positives, negatives)`.
pub fn pair_counts(scores: &[f64], labels: &[bool]) -> Result<(u64, u64, u64, u64)> {
    check_scores(scores, labels.len())?;
    let order = ascending(scores);
    let (mut conc, mut ties, mut neg_below) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        conc += pos * neg_below;
        ties += pos * neg;
        neg_below += neg;
        i = j;
    }
    let p = labels.iter().filter(|&&l| l).count() as u64;
    Ok((conc, ties, p, labels.len() as u64 - p))
}

/// Mann–Whitney AUC: `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (conc, ties, p, n) = pair_counts(scores, labels)?;
    if p == 0 || n == 0 {
        return Err(Error::undefined("AUC needs both classes"));
    }
    Ok((2 * conc + ties) as f64 / (2 * p * n) as f64)
}

/// One-vs-rest AUC of every class; `None` where the class is absent or
/// covers every sample.
pub fn ovr_aucs(scores: ArrayView2<f64>, labels: &[usize]) -> Result<Vec<Option<f64>>> {
    let (n, c) = scores.dim();
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} score rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(format!("label {bad} outside [0, {c})")));
    }
    (0..c)
        .map(|k| {
            let col: Vec<f64> = scores.column(k).to_vec();
            let bin: Vec<bool> = labels.iter().map(|&y| y == k).collect();
            match roc_auc(&col, &bin) {
                Ok(a) => Ok(Some(a)),
                Err(Error::Undefined(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Unweighted mean of one-vs-rest AUCs. With two classes this is the AUC of
/// the class-1 column.
pub fn macro_ovr_auc(scores: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    let per = ovr_aucs(scores, labels)?;
    if scores.ncols() == 2 {
        return per[1].ok_or_else(|| Error::undefined("AUC needs both classes"));
    }
    let defined: Vec<f64> = per.iter().flatten().copied().collect();
    if defined.len() != per.len() {
        let missing: Vec<usize> = per.iter().enumerate().filter(|(_, a)| a.is_none()).map(|(k, _)| k).collect();
        return Err(Error::undefined(format!("one-vs-rest AUC undefined for classes {missing:?}")));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Step-wise average precision `Σ (R_k − R_{k−1})·P_k` over descending
/// unique-score thresholds.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels.len())?;
    let p = labels.iter().filter(|&&l| l).count();
    if p == 0 {
        return Err(Error::undefined("average precision needs positives"));
    }
    let mut order = ascending(scores);
    order.reverse();
    let (mut tp, mut fp, mut prev_tp) = (0usize, 0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if tp > prev_tp {
            ap += (tp - prev_tp) as f64 / p as f64 * (tp as f64 / (tp + fp) as f64);
            prev_tp = tp;
        }
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YoudenPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    /// `sensitivity + specificity − 1`.
    pub j: f64,
}

/// Confusion counts `(tp, fp, tn, fn)` under the rule `score ≥ threshold`.
pub fn confusion_at(scores: &[f64], labels: &[bool], threshold: f64) -> (usize, usize, usize, usize) {
    let mut c = (0, 0, 0, 0);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, false) => c.2 += 1,
            (false, true) => c.3 += 1,
        }
    }
    c
}

/// Threshold maximizing Youden's J over the unique scores; ties prefer higher
/// sensitivity, then the lower threshold.
pub fn youden_threshold(scores: &[f64], labels: &[bool]) -> Result<YoudenPoint> {
    check_scores(scores, labels.len())?;
    let p = labels.iter().filter(|&&l| l).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::undefined("Youden threshold needs both classes"));
    }
    let order = ascending(scores);
    // ascending sweep: everything at index >= i is predicted positive
    let (mut tp, mut tn) = (p, 0usize);
    let mut best: Option<(usize, usize, f64)> = None; // (tp, tn, threshold)
    let mut i = 0;
    while i < order.len() {
        let thr = scores[order[i]];
        let better = match best {
            None => true,
            Some((btp, btn, _)) => {
                let (j, bj) = ((tp * n + tn * p) as u128, (btp * n + btn * p) as u128);
                j > bj || (j == bj && tp > btp)
            }
        };
        if better {
            best = Some((tp, tn, thr));
        }
        while i < order.len() && scores[order[i]] == thr {
            if labels[order[i]] {
                tp -= 1;
            } else {
                tn += 1;
            }
            i += 1;
        }
    }
    let (tp, tn, threshold) = best.expect("non-empty cohort");
    let (fp, fn_) = (n - tn, p - tp);
    let sensitivity = tp as f64 / p as f64;
    let specificity = tn as f64 / n as f64;
    Ok(YoudenPoint {
        threshold,
        sensitivity,
        specificity,
        f1: 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64,
        j: sensitivity + specificity - 1.0,
    })
}

/// Redraw attempts allowed per resample when the metric is undefined on it.
pub const MAX_REDRAWS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub n_resamples: usize,
    pub seed: u64,
    /// Total resamples redrawn because the metric was undefined on them.
    pub redraws: usize,
}

/// Percentile 95% bootstrap interval. `metric` receives the resampled row
/// indices. Resample `r` draws from its own stream, so results do not depend
/// on the thread count.
pub fn bootstrap_ci<F>(n: usize, metric: F, n_resamples: usize, seed: u64) -> Result<BootstrapCi>
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    if n == 0 || n_resamples == 0 {
        return Err(Error::invalid("bootstrap needs a non-empty cohort and at least one resample"));
    }
    let all: Vec<usize> = (0..n).collect();
    let point = match metric(&all) {
        Ok(v) => v,
        Err(Error::Undefined(m)) => return Err(Error::invalid(format!("metric undefined on the full cohort: {m}"))),
        Err(e) => return Err(e),
    };
    let draws: Vec<(f64, usize)> = (0..n_resamples)
        .into_par_iter()
        .map(|r| {
            let mut g = rng::derive(seed, r as u64);
            let mut idx = vec![0usize; n];
            for attempt in 0..=MAX_REDRAWS {
                idx.iter_mut().for_each(|i| *i = g.random_range(0..n));
                match metric(&idx) {
                    Ok(v) => return Ok((v, attempt)),
                    Err(Error::Undefined(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(Error::undefined(format!("resample {r} undefined after {MAX_REDRAWS} redraws")))
        })
        .collect::<Result<_>>()?;
    let mut values: Vec<f64> = draws.iter().map(|d| d.0).collect();
    values.sort_by(f64::total_cmp);
    Ok(BootstrapCi {
        point,
        lo: percentile_sorted(&values, 2.5),
        hi: percentile_sorted(&values, 97.5),
        n_resamples,
        seed,
        redraws: draws.iter().map(|d| d.1).sum(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auc,
    PrAuc,
    Sensitivity,
    Specificity,
    F1,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "auc" => Self::Auc,
            "prauc" | "pr_auc" => Self::PrAuc,
            "sensitivity" => Self::Sensitivity,
            "specificity" => Self::Specificity,
            "f1" => Self::F1,
            other => return Err(Error::invalid(format!("unknown metric {other:?}"))),
        })
    }
}

impl Metric {
    /// Evaluates the metric; threshold metrics use the Youden point.
    pub fn eval(self, scores: &[f64], labels: &[bool]) -> Result<f64> {
        match self {
            Self::Auc => roc_auc(scores, labels),
            Self::PrAuc => pr_auc(scores, labels),
            Self::Sensitivity => youden_threshold(scores, labels).map(|y| y.sensitivity),
            Self::Specificity => youden_threshold(scores, labels).map(|y| y.specificity),
            Self::F1 => youden_threshold(scores, labels).map(|y| y.f1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: Metric,
    pub point: f64,
    pub ci: [f64; 2],
    pub n_resamples: usize,
    pub seed: u64,
    pub redraws: usize,
}

/// Point estimate and bootstrap interval of `metric` on a binary cohort.
pub fn metric_report(metric: Metric, scores: &[f64], labels: &[bool], n_resamples: usize, seed: u64) -> Result<MetricReport> {
    check_scores(scores, labels.len())?;
    let ci = bootstrap_ci(
        scores.len(),
        |idx| {
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            metric.eval(&s, &l)
        },
        n_resamples,
        seed,
    )?;
    Ok(MetricReport { metric, point: ci.point, ci: [ci.lo, ci.hi], n_resamples, seed, redraws: ci.redraws })
}
