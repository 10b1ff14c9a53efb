use nalgebra::{DMatrix, DVector};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

use super::{check_records, time_order};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoxOptions {
    pub max_iter: usize,
    /// Convergence threshold on the log-likelihood change; the step must also
    /// have become negligible.
    pub tol: f64,
    /// Any |β| above this marks a diverging (monotone-likelihood) fit.
    pub beta_guard: f64,
}

impl Default for CoxOptions {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-9, beta_guard: 50.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxCoef {
    pub beta: f64,
    pub se: f64,
    pub hazard_ratio: f64,
    /// 95% Wald interval for the hazard ratio.
    pub ci: [f64; 2],
    pub z: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub coefficients: Vec<CoxCoef>,
    pub log_likelihood: f64,
    /// Log partial likelihood after each accepted Newton step, starting at β=0.
    pub loglik_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub n: usize,
    pub n_events: usize,
}

impl CoxFit {
    pub fn beta(&self) -> Vec<f64> {
        self.coefficients.iter().map(|c| c.beta).collect()
    }

    pub fn linear_predictor(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.coefficients.len() {
            return Err(Error::invalid(format!("expected {} covariates, got {}", self.coefficients.len(), x.len())));
        }
        Ok(self.coefficients.iter().zip(x).map(|(c, v)| c.beta * v).sum())
    }
}

/// Breslow log partial likelihood with its score vector and observed
/// information at `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreInformation {
    pub loglik: f64,
    pub score: DVector<f64>,
    pub information: DMatrix<f64>,
}

fn check_design(x: ArrayView2<f64>, times: &[f64], events: &[bool]) -> Result<()> {
    check_records(times, events)?;
    if x.nrows() != times.len() {
        return Err(Error::invalid(format!("{} covariate rows for {} subjects", x.nrows(), times.len())));
    }
    if x.ncols() == 0 {
        return Err(Error::invalid("Cox model needs at least one covariate"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("covariates must be finite"));
    }
    if !events.iter().any(|&e| e) {
        return Err(Error::invalid("Cox model needs at least one event"));
    }
    Ok(())
}

pub fn cox_score_information(x: ArrayView2<f64>, times: &[f64], events: &[bool], beta: &[f64]) -> Result<ScoreInformation> {
    check_design(x, times, events)?;
    if beta.len() != x.ncols() {
        return Err(Error::invalid("coefficient length must match the covariate count"));
    }
    Ok(score_information(x, times, events, beta))
}

fn score_information(x: ArrayView2<f64>, times: &[f64], events: &[bool], beta: &[f64]) -> ScoreInformation {
    let (n, p) = x.dim();
    let eta: Vec<f64> = x.rows().into_iter().map(|r| r.iter().zip(beta).map(|(a, b)| a * b).sum()).collect();
    let m = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut order = time_order(times);
    order.reverse();
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(p);
    let mut s2 = DMatrix::zeros(p, p);
    let mut loglik = 0.0;
    let mut score = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    let mut i = 0;
    while i < n {
        let t = times[order[i]];
        let mut j = i;
        while j < n && times[order[j]] == t {
            let k = order[j];
            let w = (eta[k] - m).exp();
            let xk = DVector::from_iterator(p, x.row(k).iter().copied());
            s0 += w;
            s1.axpy(w, &xk, 1.0);
            s2.ger(w, &xk, &xk, 1.0);
            j += 1;
        }
        let mean = &s1 / s0;
        let cov = &s2 / s0 - &mean * mean.transpose();
        for &k in order[i..j].iter().filter(|&&k| events[k]) {
            loglik += eta[k] - m - s0.ln();
            for c in 0..p {
                score[c] += x[[k, c]] - mean[c];
            }
            info += &cov;
        }
        i = j;
    }
    ScoreInformation { loglik, score, information: info }
}

const MAX_HALVINGS: usize = 40;

/// Newton–Raphson fit of the Breslow partial likelihood, with step-halving
/// whenever a full step lowers the log-likelihood.
pub fn cox_fit(x: ArrayView2<f64>, times: &[f64], events: &[bool], opts: &CoxOptions) -> Result<CoxFit> {
    check_design(x, times, events)?;
    let (n, p) = x.dim();
    // centering leaves score, information and likelihood differences unchanged
    let means: Vec<f64> = (0..p).map(|c| x.column(c).mean().unwrap_or(0.0)).collect();
    let mut xc = x.to_owned();
    for (c, mu) in means.iter().enumerate() {
        xc.column_mut(c).mapv_inplace(|v| v - mu);
    }
    let xc = xc.view();

    let mut beta = vec![0.0; p];
    let mut si = score_information(xc, times, events, &beta);
    if si.information.clone().cholesky().is_none() {
        return Err(Error::invalid("rank-deficient design: information matrix is singular at β=0"));
    }
    let mut history = vec![si.loglik];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let Some(chol) = si.information.clone().cholesky() else {
            break;
        };
        let delta = chol.solve(&si.score);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let cand: Vec<f64> = beta.iter().zip(delta.iter()).map(|(b, d)| b + step * d).collect();
            let sc = score_information(xc, times, events, &cand);
            if sc.loglik.is_finite() && sc.loglik >= si.loglik {
                accepted = Some((cand, sc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, sc)) = accepted else {
            // no ascent direction left at working precision
            converged = si.score.amax() < 1e-8 * (1.0 + n as f64);
            break;
        };
        let change = sc.loglik - si.loglik;
        let moved = beta.iter().zip(&cand).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        beta = cand;
        si = sc;
        history.push(si.loglik);
        if beta.iter().any(|b| b.abs() > opts.beta_guard) {
            break;
        }
        // a monotone likelihood keeps taking unit-size steps while the change vanishes
        let scale = 1.0 + beta.iter().map(|b| b.abs()).fold(0.0, f64::max);
        if change.abs() < opts.tol && moved < 1e-6 * scale {
            converged = true;
            break;
        }
    }

    let cov = si.information.clone().try_inverse();
    let coefficients = beta
        .iter()
        .enumerate()
        .map(|(c, &b)| {
            let se = cov.as_ref().map_or(f64::NAN, |m| m[(c, c)].max(0.0).sqrt());
            let z = b / se;
            let p = erfc(z.abs() / std::f64::consts::SQRT_2).clamp(f64::MIN_POSITIVE, 1.0);
            CoxCoef { beta: b, se, hazard_ratio: b.exp(), ci: [(b - 1.96 * se).exp(), (b + 1.96 * se).exp()], z, p }
        })
        .collect();
    Ok(CoxFit {
        coefficients,
        log_likelihood: si.loglik,
        loglik_history: history,
        iterations,
        converged,
        n,
        n_events: events.iter().filter(|&&e| e).count(),
    })
}

/// Breslow cumulative baseline hazard as a right-continuous step function
/// over distinct event times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSurvival {
    pub times: Vec<f64>,
    pub cumulative_hazard: Vec<f64>,
}

impl BaselineSurvival {
    pub fn hazard_at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x <= t);
        if k == 0 {
            0.0
        } else {
            self.cumulative_hazard[k - 1]
        }
    }

    /// `S0(t) = exp(−H0(t))`.
    pub fn survival(&self, t: f64) -> f64 {
        (-self.hazard_at(t)).exp()
    }
}

/// Breslow baseline from per-subject linear predictors `η`.
pub fn breslow_baseline_eta(eta: &[f64], times: &[f64], events: &[bool]) -> Result<BaselineSurvival> {
    check_records(times, events)?;
    if eta.len() != times.len() || eta.iter().any(|e| !e.is_finite()) {
        return Err(Error::invalid("one finite linear predictor per subject required"));
    }
    let m = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut order = time_order(times);
    order.reverse();
    let n = times.len();
    let mut steps = Vec::new();
    let mut risk = 0.0;
    let mut i = 0;
    while i < n {
        let t = times[order[i]];
        let mut j = i;
        let mut d = 0;
        while j < n && times[order[j]] == t {
            risk += (eta[order[j]] - m).exp();
            d += usize::from(events[order[j]]);
            j += 1;
        }
        if d > 0 {
            steps.push((t, d as f64 * (-m).exp() / risk));
        }
        i = j;
    }
    steps.reverse();
    let mut h = 0.0;
    let (times, cumulative_hazard) = steps
        .into_iter()
        .map(|(t, inc)| {
            h += inc;
            (t, h)
        })
        .unzip();
    Ok(BaselineSurvival { times, cumulative_hazard })
}

/// Breslow baseline of a converged fit on its training data.
pub fn breslow_baseline(fit: &CoxFit, x: ArrayView2<f64>, times: &[f64], events: &[bool]) -> Result<BaselineSurvival> {
    if !fit.converged {
        return Err(Error::State("baseline requested for a non-converged Cox fit".into()));
    }
    check_design(x, times, events)?;
    let eta = x.rows().into_iter().map(|r| fit.linear_predictor(r.as_slice().unwrap_or(&r.to_vec()))).collect::<Result<Vec<_>>>()?;
    breslow_baseline_eta(&eta, times, events)
}

/// `Ŝ(t|x) = S0(t)^{exp(βᵀx)}`.
pub fn survival_at(fit: &CoxFit, baseline: &BaselineSurvival, x: &[f64], t: f64) -> Result<f64> {
    let eta = fit.linear_predictor(x)?;
    Ok((-baseline.hazard_at(t) * eta.exp()).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn two_subject_newton_step() {
        let x = array![[1.0], [0.0]];
        let si = cox_score_information(x.view(), &[1.0, 2.0], &[true, true], &[0.0]).unwrap();
        assert!((si.loglik + 2f64.ln()).abs() < 1e-15);
        assert_eq!(si.score[0], 0.5);
        assert_eq!(si.information[(0, 0)], 0.25);
        assert_eq!(si.score[0] / si.information[(0, 0)], 2.0);
    }

    #[test]
    fn constant_covariate_is_rank_deficient() {
        let x = Array2::from_elem((4, 1), 1.0);
        let r = cox_fit(x.view(), &[1.0, 2.0, 3.0, 4.0], &[true; 4], &CoxOptions::default());
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn separation_flags_divergence() {
        let x = array![[1.0], [1.0], [0.0], [0.0]];
        let fit = cox_fit(x.view(), &[1.0, 2.0, 3.0, 4.0], &[true; 4], &CoxOptions::default()).unwrap();
        assert!(!fit.converged);
        assert!(fit.loglik_history.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn small_fit_converges_and_is_consistent() {
        let x = array![[0.5], [1.2], [-0.3], [0.0], [2.0], [-1.0], [0.7]];
        let t = [5.0, 2.0, 8.0, 3.0, 1.0, 9.0, 4.0];
        let e = [true, true, false, true, true, true, false];
        let fit = cox_fit(x.view(), &t, &e, &CoxOptions::default()).unwrap();
        assert!(fit.converged);
        let c = &fit.coefficients[0];
        assert!(c.ci[0] < c.hazard_ratio && c.hazard_ratio < c.ci[1]);
        assert!(c.p > 0.0 && c.p <= 1.0);
        let si = cox_score_information(x.view(), &t, &e, &fit.beta()).unwrap();
        assert!(si.score[0].abs() < 1e-6);
        assert!(fit.loglik_history.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn breslow_examples() {
        let b = breslow_baseline_eta(&[0.0, 0.0], &[1.0, 2.0], &[true, true]).unwrap();
        assert!((b.survival(1.0) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((b.survival(2.0) - (-1.5f64).exp()).abs() < 1e-15);
        assert_eq!(b.survival(0.5), 1.0);

        let x = array![[1.0], [1.0], [0.0], [0.0]];
        let fit = cox_fit(x.view(), &[1.0, 2.0, 3.0, 4.0], &[true; 4], &CoxOptions::default()).unwrap();
        assert!(matches!(breslow_baseline(&fit, x.view(), &[1.0, 2.0, 3.0, 4.0], &[true; 4]), Err(Error::State(_))));
    }
}
