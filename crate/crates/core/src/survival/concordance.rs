use crate::error::{Error, Result};

use super::{check_records, km_estimate, time_order, KmCurve};

/// Kaplan–Meier estimate `Ĝ` of the censoring distribution (event flags
/// reversed).
#[derive(Debug, Clone, PartialEq)]
pub struct CensoringDist {
    curve: KmCurve,
}

impl CensoringDist {
    pub fn fit(times: &[f64], events: &[bool]) -> Result<Self> {
        let censored: Vec<bool> = events.iter().map(|e| !e).collect();
        Ok(Self { curve: km_estimate(times, &censored)? })
    }

    /// `Ĝ(t)`.
    pub fn at(&self, t: f64) -> f64 {
        self.curve.at(t)
    }

    /// `Ĝ(t⁻)`.
    pub fn left_limit(&self, t: f64) -> f64 {
        self.curve.left_limit(t)
    }

    pub fn curve(&self) -> &KmCurve {
        &self.curve
    }

    fn inverse_left(&self, t: f64) -> Result<f64> {
        let g = self.left_limit(t);
        if g > 0.0 {
            Ok(1.0 / g)
        } else {
            Err(Error::EvaluationTime(format!("censoring survival is zero just before t={t}")))
        }
    }
}

fn check_risks(risks: &[f64], n: usize) -> Result<()> {
    if risks.len() != n {
        return Err(Error::invalid(format!("{} risks for {n} subjects", risks.len())));
    }
    if risks.iter().any(|r| !r.is_finite()) {
        return Err(Error::invalid("risks must be finite"));
    }
    Ok(())
}

/// Fenwick tree over risk ranks.
struct RankCounter {
    ranks: Vec<f64>,
    tree: Vec<u64>,
}

impl RankCounter {
    fn new(risks: &[f64]) -> Self {
        let mut ranks = risks.to_vec();
        ranks.sort_by(f64::total_cmp);
        ranks.dedup();
        let tree = vec![0; ranks.len() + 1];
        Self { ranks, tree }
    }

    fn rank(&self, r: f64) -> usize {
        self.ranks.partition_point(|&x| x < r)
    }

    fn insert(&mut self, r: f64) {
        let mut i = self.rank(r) + 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Inserted values with rank `< k`.
    fn prefix(&self, k: usize) -> u64 {
        let (mut i, mut s) = (k, 0);
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }

    /// `(strictly lower, equal)` counts relative to `r`.
    fn below_equal(&self, r: f64) -> (u64, u64) {
        let k = self.rank(r);
        let below = self.prefix(k);
        (below, self.prefix(k + 1) - below)
    }
}

/// Pair counts behind Harrell's C for each event subject: `(index,
/// concordant, tied, comparable)`. Subject `j` is comparable to event `i`
/// when `t_j > t_i`, or `t_j = t_i` and `j` is censored.
fn event_pair_counts(times: &[f64], events: &[bool], risks: &[f64]) -> Vec<(usize, u64, u64, u64)> {
    let mut order = time_order(times);
    order.reverse();
    let mut counter = RankCounter::new(risks);
    let mut inserted = 0u64;
    let mut out = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let mut j = i;
        while j < order.len() && times[order[j]] == t {
            j += 1;
        }
        let group = &order[i..j];
        for &a in group.iter().filter(|&&a| events[a]) {
            let (mut conc, mut tie) = counter.below_equal(risks[a]);
            let mut comp = inserted;
            for &b in group.iter().filter(|&&b| !events[b]) {
                comp += 1;
                if risks[a] > risks[b] {
                    conc += 1;
                } else if risks[a] == risks[b] {
                    tie += 1;
                }
            }
            out.push((a, conc, tie, comp));
        }
        for &a in group {
            counter.insert(risks[a]);
        }
        inserted += group.len() as u64;
        i = j;
    }
    out
}

/// `(concordant, tied, comparable)` pair counts behind Harrell's C.
pub fn harrell_counts(times: &[f64], events: &[bool], risks: &[f64]) -> Result<(u64, u64, u64)> {
    check_records(times, events)?;
    check_risks(risks, times.len())?;
    Ok(event_pair_counts(times, events, risks)
        .into_iter()
        .fold((0, 0, 0), |acc, (_, c, t, p)| (acc.0 + c, acc.1 + t, acc.2 + p)))
}

/// Harrell's concordance index: higher risk should mean earlier event; tied
/// risks count one half.
pub fn harrell_cindex(times: &[f64], events: &[bool], risks: &[f64]) -> Result<f64> {
    if times.len() < 2 {
        return Err(Error::invalid("concordance needs at least two subjects"));
    }
    let (conc, ties, comp) = harrell_counts(times, events, risks)?;
    if comp == 0 {
        return Err(Error::undefined("no comparable pairs"));
    }
    Ok((2 * conc + ties) as f64 / (2 * comp) as f64)
}

/// Uno-type IPCW concordance truncated at `tau`: only events with
/// `t_i < tau` anchor pairs, each weighted by `Ĝ(t_i⁻)⁻²`.
pub fn ipcw_cindex_truncated(censoring: &CensoringDist, times: &[f64], events: &[bool], risks: &[f64], tau: f64) -> Result<f64> {
    check_records(times, events)?;
    check_risks(risks, times.len())?;
    if !(tau > 0.0) {
        return Err(Error::invalid("truncation time must be positive"));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (i, conc, tie, comp) in event_pair_counts(times, events, risks) {
        if times[i] >= tau || comp == 0 {
            continue;
        }
        let w = censoring.inverse_left(times[i])?.powi(2);
        num += w * (2 * conc + tie) as f64;
        den += w * comp as f64;
    }
    if den == 0.0 {
        return Err(Error::undefined("no comparable pairs before the truncation time"));
    }
    Ok(num / (2.0 * den))
}

/// Cumulative/dynamic AUC at each evaluation time: cases have an event at or
/// before `t` (weight `1/Ĝ(t_i⁻)`), controls are still event-free after `t`.
pub fn cumulative_dynamic_auc(
    censoring: &CensoringDist,
    times: &[f64],
    events: &[bool],
    risks: &[f64],
    eval_times: &[f64],
) -> Result<Vec<f64>> {
    check_records(times, events)?;
    check_risks(risks, times.len())?;
    eval_times
        .iter()
        .map(|&t| {
            let mut controls: Vec<f64> = (0..times.len()).filter(|&j| times[j] > t).map(|j| risks[j]).collect();
            controls.sort_by(f64::total_cmp);
            let (mut num, mut wsum) = (0.0, 0.0);
            for i in (0..times.len()).filter(|&i| events[i] && times[i] <= t) {
                let w = censoring.inverse_left(times[i])?;
                let below = controls.partition_point(|&r| r < risks[i]);
                let equal = controls.partition_point(|&r| r <= risks[i]) - below;
                num += w * (2 * below + equal) as f64;
                wsum += w;
            }
            if controls.is_empty() || wsum == 0.0 {
                return Err(Error::EvaluationTime(format!("no cases or no controls at t={t}")));
            }
            Ok(num / (2.0 * wsum * controls.len() as f64))
        })
        .collect()
}

/// Graf's IPCW Brier score at time `t` for predicted survival
/// probabilities `Ŝ(t|x_i)`.
pub fn ipcw_brier(censoring: &CensoringDist, surv_pred: &[f64], times: &[f64], events: &[bool], t: f64) -> Result<f64> {
    check_records(times, events)?;
    if surv_pred.len() != times.len() {
        return Err(Error::invalid("one survival prediction per subject required"));
    }
    if surv_pred.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::invalid("survival predictions must lie in [0, 1]"));
    }
    let g_t = censoring.at(t);
    let mut total = 0.0;
    for ((&s, &ti), &e) in surv_pred.iter().zip(times).zip(events) {
        if ti <= t && e {
            total += s * s * censoring.inverse_left(ti)?;
        } else if ti > t {
            if g_t <= 0.0 {
                return Err(Error::EvaluationTime(format!("censoring survival is zero at t={t}")));
            }
            total += (1.0 - s) * (1.0 - s) / g_t;
        }
    }
    Ok(total / times.len() as f64)
}
