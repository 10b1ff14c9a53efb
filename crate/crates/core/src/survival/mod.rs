//! Prognosis evaluation: Kaplan–Meier, log-rank, Cox regression with Wald
//! inference, Harrell and IPCW concordance, cumulative/dynamic AUC, the IPCW
//! Brier score and median risk stratification.
//!
//! Times are positive reals, events are `true` for an observed event and
//! `false` for censoring.

mod concordance;
mod cox;

pub use concordance::{cumulative_dynamic_auc, harrell_cindex, harrell_counts, ipcw_brier, ipcw_cindex_truncated, CensoringDist};
pub use cox::{
    breslow_baseline, breslow_baseline_eta, cox_fit, cox_score_information, survival_at, BaselineSurvival, CoxCoef, CoxFit,
    CoxOptions, ScoreInformation,
};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

pub(crate) fn check_records(times: &[f64], events: &[bool]) -> Result<()> {
    if times.len() != events.len() {
        return Err(Error::invalid(format!("{} times for {} event flags", times.len(), events.len())));
    }
    if times.is_empty() {
        return Err(Error::invalid("empty survival data"));
    }
    if let Some(t) = times.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(Error::invalid(format!("survival times must be positive and finite, got {t}")));
    }
    Ok(())
}

/// Indices sorted by ascending time.
pub(crate) fn time_order(times: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..times.len()).collect();
    idx.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    idx
}

/// Product-limit survival curve on every distinct observed time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

impl KmCurve {
    /// `S(t)`, right-continuous.
    pub fn at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x <= t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }

    /// `S(t⁻)`.
    pub fn left_limit(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x < t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }
}

/// Kaplan–Meier estimate; subjects censored at `t` stay at risk at `t`.
pub fn km_estimate(times: &[f64], events: &[bool]) -> Result<KmCurve> {
    check_records(times, events)?;
    let order = time_order(times);
    let n = times.len();
    let mut curve = KmCurve { times: vec![], survival: vec![], at_risk: vec![], events: vec![] };
    let mut s = 1.0;
    let mut i = 0;
    while i < n {
        let t = times[order[i]];
        let mut j = i;
        let mut d = 0;
        while j < n && times[order[j]] == t {
            d += usize::from(events[order[j]]);
            j += 1;
        }
        let r = n - i;
        if d > 0 {
            s *= 1.0 - d as f64 / r as f64;
        }
        curve.times.push(t);
        curve.survival.push(s);
        curve.at_risk.push(r);
        curve.events.push(d);
        i = j;
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRank {
    pub chi2: f64,
    pub p: f64,
    /// Observed and expected events in the first group.
    pub observed: f64,
    pub expected: f64,
    pub variance: f64,
}

/// Two-group log-rank test (1 degree of freedom, hypergeometric variance).
/// `in_a[i]` assigns subject `i` to the first group.
pub fn logrank_test(times: &[f64], events: &[bool], in_a: &[bool]) -> Result<LogRank> {
    check_records(times, events)?;
    if in_a.len() != times.len() {
        return Err(Error::invalid("group flags must match the number of subjects"));
    }
    let na_total = in_a.iter().filter(|&&a| a).count();
    if na_total == 0 || na_total == times.len() {
        return Err(Error::invalid("log-rank test needs two non-empty groups"));
    }
    let order = time_order(times);
    let n = times.len();
    let (mut o, mut e, mut v) = (0.0, 0.0, 0.0);
    let mut risk_a = na_total;
    let mut i = 0;
    while i < n {
        let t = times[order[i]];
        let r = n - i;
        let mut j = i;
        let (mut d, mut da, mut leave_a) = (0usize, 0usize, 0usize);
        while j < n && times[order[j]] == t {
            let k = order[j];
            d += usize::from(events[k]);
            da += usize::from(events[k] && in_a[k]);
            leave_a += usize::from(in_a[k]);
            j += 1;
        }
        if d > 0 {
            let (rf, df, raf) = (r as f64, d as f64, risk_a as f64);
            o += da as f64;
            e += df * raf / rf;
            if r > 1 {
                v += df * (raf / rf) * (1.0 - raf / rf) * (rf - df) / (rf - 1.0);
            }
        }
        risk_a -= leave_a;
        i = j;
    }
    if !(v > 0.0) {
        return Err(Error::undefined("log-rank variance is zero (no informative events)"));
    }
    let chi2 = (o - e).powi(2) / v;
    let p = ChiSquared::new(1.0).expect("valid dof").sf(chi2);
    Ok(LogRank { chi2, p, observed: o, expected: e, variance: v })
}

/// Median split: strictly above the median is high risk. The median of an
/// even-sized cohort is the midpoint of the two central order statistics.
pub fn dichotomize_median(risks: &[f64]) -> Result<(f64, Vec<bool>)> {
    if risks.len() < 2 {
        return Err(Error::invalid("median split needs at least two subjects"));
    }
    if risks.iter().any(|r| !r.is_finite()) {
        return Err(Error::invalid("risks must be finite"));
    }
    let mut sorted = risks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
    Ok((median, risks.iter().map(|&r| r > median).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn km_examples() {
        let c = km_estimate(&[1.0, 2.0, 3.0], &[true; 3]).unwrap();
        for (s, want) in c.survival.iter().zip([2.0 / 3.0, 1.0 / 3.0, 0.0]) {
            assert!((s - want).abs() < 1e-15);
        }
        let c = km_estimate(&[1.0, 2.0, 3.0], &[true, false, true]).unwrap();
        assert!((c.at(1.0) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.at(2.5), c.at(1.0));
        assert_eq!(c.at(3.0), 0.0);
        assert_eq!(c.left_limit(3.0), c.at(1.0));
        let c = km_estimate(&[4.0, 1.0], &[false, false]).unwrap();
        assert!(c.survival.iter().all(|&s| s == 1.0));
        assert!(km_estimate(&[], &[]).is_err());
    }

    #[test]
    fn km_without_censoring_is_empirical() {
        let t = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        let c = km_estimate(&t, &[true; 8]).unwrap();
        for &x in &[0.5, 1.0, 2.0, 3.5, 6.0, 9.0] {
            let frac = t.iter().filter(|&&s| s > x).count() as f64 / 8.0;
            assert!((c.at(x) - frac).abs() < 1e-15);
        }
    }

    #[test]
    fn logrank_examples() {
        let t = [1.0, 2.0, 3.0, 1.0, 2.0, 3.0];
        let e = [true, false, true, true, false, true];
        let g = [true, true, true, false, false, false];
        let r = logrank_test(&t, &e, &g).unwrap();
        assert_eq!((r.chi2, r.p), (0.0, 1.0));

        let mut t = vec![1.0; 10];
        t.extend(vec![2.0; 10]);
        let mut e = vec![true; 10];
        e.extend(vec![false; 10]);
        let g: Vec<bool> = (0..20).map(|i| i < 10).collect();
        // single stratum: O=10, E=5, V = 10·½·½·10/19
        let r = logrank_test(&t, &e, &g).unwrap();
        assert!((r.chi2 - 19.0).abs() < 1e-12);
        assert!(matches!(logrank_test(&[1.0, 2.0], &[false, false], &[true, false]), Err(Error::Undefined(_))));
    }

    #[test]
    fn median_split() {
        let (m, h) = dichotomize_median(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((m, h), (2.5, vec![false, false, true, true]));
        let (_, h) = dichotomize_median(&[7.0; 5]).unwrap();
        assert!(h.iter().all(|&x| !x));
        let (m, h) = dichotomize_median(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!((m, h), (2.0, vec![true, false, false]));
    }
}
