//! Pre-training and fine-tuning objectives, each returning its value and
//! analytic gradient:
//!
//! * multi-task categorical cross-entropy over attribute heads,
//! * masked-language-model negative log-likelihood,
//! * SimCSE contrastive loss (literal and conventional denominators),
//! * symmetric image/text InfoNCE with a learnable temperature,
//! * Cox negative log partial likelihood with Breslow ties.
//!
//! Softmaxes use max subtraction, so values can differ from a naive
//! evaluation in the last bits.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::encoders::{l2_normalize_rows, l2_normalize_rows_backward};
use crate::error::{Error, Result};
use crate::math::{log_sum_exp, softmax};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Plain sum over samples.
    Sum,
    #[default]
    Mean,
}

fn check_finite(m: ArrayView2<f64>, what: &str) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what} contain non-finite values")));
    }
    Ok(())
}

/// Categorical cross-entropy of one head: `−Σ_i log softmax(ŷ_i)[y_i]`
/// (divided by N under [`Reduction::Mean`]). Returns the loss and its
/// gradient on the logits.
pub fn multitask_ce(logits: ArrayView2<f64>, labels: &[usize], reduction: Reduction) -> Result<(f64, Array2<f64>)> {
    let (n, c) = logits.dim();
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} logit rows", labels.len())));
    }
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(format!("label {bad} outside [0, {c})")));
    }
    check_finite(logits, "logits")?;
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / n as f64,
    };
    let mut grad = Array2::zeros((n, c));
    let mut total = 0.0;
    for (i, (row, &y)) in logits.rows().into_iter().zip(labels).enumerate() {
        let lse = log_sum_exp(row.iter().copied());
        total += lse - row[y];
        let mut g = grad.row_mut(i);
        g.assign(&softmax(row));
        g[y] -= 1.0;
        g *= scale;
    }
    Ok((total * scale, grad))
}

/// Masked-token predictions for `n_samples` sequences with
/// `masked_per_sample` masked positions each; row `i·M + t` of `probs` is the
/// vocabulary distribution at the `t`-th masked position of sample `i`.
#[derive(Debug, Clone, Copy)]
pub struct MlmBatch<'a> {
    pub probs: ArrayView2<'a, f64>,
    pub targets: &'a [usize],
    pub n_samples: usize,
    pub masked_per_sample: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlmLoss {
    pub value: f64,
    /// Set when a true token received probability 0; `value` is then `+∞`.
    pub degenerate: bool,
}

impl MlmBatch<'_> {
    fn validate(&self) -> Result<()> {
        let rows = self.n_samples * self.masked_per_sample;
        if self.n_samples == 0 || self.masked_per_sample == 0 {
            return Err(Error::invalid("MLM batch needs N >= 1 and M >= 1"));
        }
        if self.probs.nrows() != rows || self.targets.len() != rows {
            return Err(Error::invalid(format!("expected {rows} masked rows and targets")));
        }
        let v = self.probs.ncols();
        if let Some(&t) = self.targets.iter().find(|&&t| t >= v) {
            return Err(Error::invalid(format!("target {t} outside vocabulary of {v}")));
        }
        for row in self.probs.rows() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (row.sum() - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("MLM probability rows must be distributions"));
            }
        }
        Ok(())
    }
}

/// `−(1/(N·M)) Σ_i Σ_{t∈𝓜} log p̂⁽ᵗ⁾[y_t]`.
pub fn mlm_loss(batch: &MlmBatch<'_>) -> Result<MlmLoss> {
    batch.validate()?;
    let mut total = 0.0;
    for (row, &y) in batch.probs.rows().into_iter().zip(batch.targets) {
        let p = row[y];
        if p == 0.0 {
            return Ok(MlmLoss { value: f64::INFINITY, degenerate: true });
        }
        total -= p.ln();
    }
    Ok(MlmLoss { value: total / (batch.n_samples * batch.masked_per_sample) as f64, degenerate: false })
}

/// MLM loss evaluated from logits (probabilities = row softmax), with the
/// gradient on the logits.
pub fn mlm_loss_from_logits(
    logits: ArrayView2<f64>,
    targets: &[usize],
    n_samples: usize,
    masked_per_sample: usize,
) -> Result<(f64, Array2<f64>)> {
    if n_samples * masked_per_sample != logits.nrows() || n_samples == 0 || masked_per_sample == 0 {
        return Err(Error::invalid("logit rows must equal N·M with N, M >= 1"));
    }
    let (sum, mut grad) = multitask_ce(logits, targets, Reduction::Sum)?;
    let scale = 1.0 / (n_samples * masked_per_sample) as f64;
    grad *= scale;
    Ok((sum * scale, grad))
}

/// `aᵀb / (‖a‖‖b‖)`.
pub fn cosine_sim(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid("cosine similarity of vectors with different lengths"));
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimcseVariant {
    /// Positive over the first-pass embeddings of every other sentence;
    /// the positive itself is not in the denominator. Can go negative.
    AsWritten,
    /// In-batch softmax over all positive-pass embeddings, diagonal included.
    #[default]
    Standard,
}

#[derive(Debug, Clone)]
pub struct PairGrad {
    pub value: f64,
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
}

/// SimCSE objective over two dropout passes `h` and `h_pos` (raw, unnormalized).
pub fn simcse_loss(h: ArrayView2<f64>, h_pos: ArrayView2<f64>, tau: f64, variant: SimcseVariant) -> Result<PairGrad> {
    if h.dim() != h_pos.dim() {
        return Err(Error::invalid("SimCSE passes must have equal shapes"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be > 0"));
    }
    let n = h.nrows();
    if n == 0 || (variant == SimcseVariant::AsWritten && n < 2) {
        return Err(Error::invalid("SimCSE needs N >= 2 for a non-empty denominator"));
    }
    check_finite(h, "embeddings")?;
    check_finite(h_pos, "embeddings")?;
    let (a, na) = l2_normalize_rows(h)?;
    let (b, nb) = l2_normalize_rows(h_pos)?;
    let inv_n = 1.0 / n as f64;
    let mut da = Array2::<f64>::zeros(a.raw_dim());
    let mut db = Array2::<f64>::zeros(b.raw_dim());
    let mut total = 0.0;
    match variant {
        SimcseVariant::Standard => {
            let logits = a.dot(&b.t()) / tau;
            // dL/dlogits = (softmax − I)/N
            let mut g = Array2::zeros((n, n));
            for i in 0..n {
                let row = logits.row(i);
                total += log_sum_exp(row.iter().copied()) - row[i];
                let mut gr = g.row_mut(i);
                gr.assign(&softmax(row));
                gr[i] -= 1.0;
            }
            g *= inv_n / tau;
            da += &g.dot(&b);
            db += &g.t().dot(&a);
        }
        SimcseVariant::AsWritten => {
            let s = a.dot(&a.t()) / tau;
            let mut g = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                let pos = a.row(i).dot(&b.row(i)) / tau;
                let others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| s[[i, j]]).collect();
                let lse = log_sum_exp(others.iter().copied());
                total += lse - pos;
                for j in (0..n).filter(|&j| j != i) {
                    g[[i, j]] = (s[[i, j]] - lse).exp();
                }
                // positive term
                da.row_mut(i).scaled_add(-inv_n / tau, &b.row(i));
                db.row_mut(i).scaled_add(-inv_n / tau, &a.row(i));
            }
            g *= inv_n / tau;
            // s_ij depends on both a_i and a_j
            da += &g.dot(&a);
            da += &g.t().dot(&a);
        }
    }
    Ok(PairGrad {
        value: total * inv_n,
        grad_a: l2_normalize_rows_backward(a.view(), &na, da.view()),
        grad_b: l2_normalize_rows_backward(b.view(), &nb, db.view()),
    })
}

/// Learnable temperature stored as `log(1/τ)`, kept inside `τ ∈ [0.01, 100]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitScale(f64);

impl LogitScale {
    pub const MIN: f64 = -4.605_170_185_988_091; // ln(0.01)
    pub const MAX: f64 = 4.605_170_185_988_091; // ln(100)

    pub fn from_temperature(tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::invalid("temperature must be > 0"));
        }
        Ok(Self::from_log((1.0 / tau).ln()))
    }

    pub fn from_log(value: f64) -> Self {
        Self(value.clamp(Self::MIN, Self::MAX))
    }

    pub fn log(self) -> f64 {
        self.0
    }

    /// `1/τ`.
    pub fn scale(self) -> f64 {
        self.0.exp()
    }

    pub fn temperature(self) -> f64 {
        (-self.0).exp()
    }
}

impl Default for LogitScale {
    /// τ = 0.07.
    fn default() -> Self {
        Self::from_log((1.0f64 / 0.07).ln())
    }
}

#[derive(Debug, Clone)]
pub struct ClipGrad {
    pub value: f64,
    pub grad_u: Array2<f64>,
    pub grad_v: Array2<f64>,
    /// Gradient on `log(1/τ)`.
    pub grad_logit_scale: f64,
}

/// Symmetric InfoNCE over unit-norm image rows `u` and text rows `v`:
/// `−(1/N) Σ_i [log softmax_row(i)[i] + log softmax_col(i)[i]]` of the
/// similarity matrix scaled by `1/τ`.
pub fn clip_infonce(u: ArrayView2<f64>, v: ArrayView2<f64>, logit_scale: LogitScale) -> Result<ClipGrad> {
    if u.dim() != v.dim() {
        return Err(Error::invalid("image and text batches must have equal shapes"));
    }
    let n = u.nrows();
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    for row in u.rows().into_iter().chain(v.rows()) {
        if (row.dot(&row) - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("InfoNCE inputs must be L2-normalized rows"));
        }
    }
    let scale = logit_scale.scale();
    let sims = u.dot(&v.t());
    let logits = &sims * scale;
    let mut g = Array2::<f64>::zeros((n, n));
    let mut total = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        total += log_sum_exp(row.iter().copied()) - row[i];
        let mut gr = g.row_mut(i);
        gr += &softmax(row);
        gr[i] -= 1.0;
    }
    for j in 0..n {
        let col = logits.column(j);
        total += log_sum_exp(col.iter().copied()) - col[j];
        let mut gc = g.column_mut(j);
        gc += &softmax(col);
        gc[j] -= 1.0;
    }
    let inv_n = 1.0 / n as f64;
    g *= inv_n;
    let dscale = (&g * &sims).sum();
    let grad_u = g.dot(&v) * scale;
    let grad_v = g.t().dot(&u) * scale;
    Ok(ClipGrad { value: total * inv_n, grad_u, grad_v, grad_logit_scale: dscale * scale })
}

/// InfoNCE on raw (unnormalized) embeddings, back-propagating through the
/// row normalization.
pub fn clip_infonce_raw(img: ArrayView2<f64>, txt: ArrayView2<f64>, logit_scale: LogitScale) -> Result<ClipGrad> {
    let (u, nu) = l2_normalize_rows(img)?;
    let (v, nv) = l2_normalize_rows(txt)?;
    let mut out = clip_infonce(u.view(), v.view(), logit_scale)?;
    out.grad_u = l2_normalize_rows_backward(u.view(), &nu, out.grad_u.view());
    out.grad_v = l2_normalize_rows_backward(v.view(), &nv, out.grad_v.view());
    Ok(out)
}

/// Negative Breslow log partial likelihood
/// `−Σ_{i: event} [η_i − log Σ_{j: t_j ≥ t_i} exp(η_j)]` and its gradient on η.
pub fn cox_partial_loglik(eta: &[f64], times: &[f64], events: &[bool]) -> Result<(f64, Vec<f64>)> {
    let n = eta.len();
    if times.len() != n || events.len() != n {
        return Err(Error::invalid("eta, times and events must have equal lengths"));
    }
    if !events.iter().any(|&e| e) {
        return Err(Error::invalid("partial likelihood needs at least one event"));
    }
    if eta.iter().chain(times).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite linear predictor or time"));
    }
    let m = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = eta.iter().map(|&e| (e - m).exp()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));

    // descending sweep: risk sums per tied-time group
    let mut groups: Vec<(f64, f64, usize)> = Vec::new(); // (time, risk sum, events)
    let mut risk = 0.0;
    let mut loss = 0.0;
    let mut i = 0;
    while i < n {
        let t = times[order[i]];
        let mut j = i;
        while j < n && times[order[j]] == t {
            risk += w[order[j]];
            j += 1;
        }
        let d = order[i..j].iter().filter(|&&k| events[k]).count();
        let log_risk = m + risk.ln();
        for &k in &order[i..j] {
            if events[k] {
                loss += log_risk - eta[k];
            }
        }
        groups.push((t, risk, d));
        i = j;
    }
    // ascending sweep: A_k = Σ_{g: t_g ≤ t_k} d_g / R_g
    let mut grad = vec![0.0; n];
    let mut acc = 0.0;
    let mut gi = groups.len();
    for &k in order.iter().rev() {
        while gi > 0 && groups[gi - 1].0 <= times[k] {
            gi -= 1;
            let (_, r, d) = groups[gi];
            acc += d as f64 / r;
        }
        grad[k] = w[k] * acc - if events[k] { 1.0 } else { 0.0 };
    }
    Ok((loss, grad))
}

/// Row-wise softmax of a logit table.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let p: Array1<f64> = softmax(row.view());
        row.assign(&p);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    const E: f64 = std::f64::consts::E;

    #[test]
    fn ce_closed_forms() {
        let (v, _) = multitask_ce(Array2::zeros((3, 4)).view(), &[0, 1, 3], Reduction::Sum).unwrap();
        assert!((v - 3.0 * 4f64.ln()).abs() < 1e-12);
        let (m, _) = multitask_ce(Array2::zeros((3, 4)).view(), &[0, 1, 3], Reduction::Mean).unwrap();
        assert!((m - 4f64.ln()).abs() < 1e-12);
        let (v, _) = multitask_ce(array![[0.0, 3f64.ln()]].view(), &[1], Reduction::Sum).unwrap();
        assert!((v - 0.287_682_072_451_780_9).abs() < 1e-12);
        let (v, _) = multitask_ce(array![[800.0, -800.0], [-800.0, 800.0]].view(), &[0, 1], Reduction::Sum).unwrap();
        assert_eq!(v, 0.0);
        assert!(multitask_ce(array![[0.0, 0.0]].view(), &[2], Reduction::Sum).is_err());
    }

    #[test]
    fn mlm_closed_forms() {
        let p = Array2::from_elem((1, 10), 0.1);
        let l = mlm_loss(&MlmBatch { probs: p.view(), targets: &[3], n_samples: 1, masked_per_sample: 1 }).unwrap();
        assert!((l.value - 10f64.ln()).abs() < 1e-12);
        let p = Array2::from_elem((4, 10), 0.1);
        let l = mlm_loss(&MlmBatch { probs: p.view(), targets: &[3, 1, 0, 9], n_samples: 2, masked_per_sample: 2 })
            .unwrap();
        assert!((l.value - 10f64.ln()).abs() < 1e-12);
        let onehot = array![[0.0, 1.0], [1.0, 0.0]];
        let l = mlm_loss(&MlmBatch { probs: onehot.view(), targets: &[1, 0], n_samples: 1, masked_per_sample: 2 })
            .unwrap();
        assert_eq!(l.value, 0.0);
        let l = mlm_loss(&MlmBatch { probs: onehot.view(), targets: &[0, 0], n_samples: 1, masked_per_sample: 2 })
            .unwrap();
        assert!(l.degenerate && l.value.is_infinite());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(array![1.0, 0.0].view(), array![0.0, 1.0].view()).unwrap(), 0.0);
        assert!((cosine_sim(array![1.0, 1.0].view(), array![1.0, 1.0].view()).unwrap() - 1.0).abs() < 1e-15);
        let c = cosine_sim(array![1.0, 2.0, 3.0].view(), array![4.0, 5.0, 6.0].view()).unwrap();
        assert!((c - 32.0 / 1078f64.sqrt()).abs() < 1e-15);
        assert!(cosine_sim(array![0.0, 0.0].view(), array![1.0, 0.0].view()).is_err());
    }

    #[test]
    fn simcse_examples() {
        let h = array![[1.0, 0.0], [0.0, 1.0]];
        let lit = simcse_loss(h.view(), h.view(), 1.0, SimcseVariant::AsWritten).unwrap();
        assert!((lit.value + 1.0).abs() < 1e-12);
        let std = simcse_loss(h.view(), h.view(), 1.0, SimcseVariant::Standard).unwrap();
        assert!((std.value + (E / (E + 1.0)).ln()).abs() < 1e-12);
        let one = array![[1.0, 0.0]];
        assert!(simcse_loss(one.view(), one.view(), 1.0, SimcseVariant::AsWritten).is_err());
        // identical rows, huge temperature → ln N
        let same = Array2::from_elem((5, 3), 1.0);
        let v = simcse_loss(same.view(), same.view(), 1e9, SimcseVariant::Standard).unwrap().value;
        assert!((v - 5f64.ln()).abs() < 1e-8);
    }

    #[test]
    fn infonce_examples() {
        let one = array![[0.6, 0.8]];
        assert_eq!(clip_infonce(one.view(), one.view(), LogitScale::from_log(0.0)).unwrap().value, 0.0);
        let basis = array![[1.0, 0.0], [0.0, 1.0]];
        let v = clip_infonce(basis.view(), basis.view(), LogitScale::from_log(0.0)).unwrap().value;
        assert!((v - 0.626_523_375_036_445_6).abs() < 1e-12);
        let bad = array![[2.0, 0.0], [0.0, 1.0]];
        assert!(clip_infonce(bad.view(), basis.view(), LogitScale::from_log(0.0)).is_err());
    }

    #[test]
    fn logit_scale_clamps() {
        assert!((LogitScale::from_log(10.0).temperature() - 0.01).abs() < 1e-15);
        assert!((LogitScale::from_temperature(1e6).unwrap().temperature() - 100.0).abs() < 1e-9);
        assert!((LogitScale::default().temperature() - 0.07).abs() < 1e-12);
    }

    #[test]
    fn cox_examples() {
        let (v, _) = cox_partial_loglik(&[0.0, 0.0], &[1.0, 2.0], &[true, true]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        let (v, g) = cox_partial_loglik(&[0.7], &[3.0], &[true]).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g, vec![0.0]);
        assert!(cox_partial_loglik(&[0.0, 1.0], &[1.0, 2.0], &[false, false]).is_err());
        let eta = [0.3, -1.2, 0.5, 2.0, 0.0];
        let t = [5.0, 2.0, 2.0, 7.0, 1.0];
        let e = [true, true, false, true, true];
        let (a, _) = cox_partial_loglik(&eta, &t, &e).unwrap();
        let shifted: Vec<f64> = eta.iter().map(|x| x + 3.7).collect();
        let (b, _) = cox_partial_loglik(&shifted, &t, &e).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
