//! Small numeric helpers shared across modules.

use ndarray::{Array1, ArrayView1};

/// `log Σ exp(x)` with max subtraction. `-inf` for an empty slice.
pub fn log_sum_exp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.into_iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: ArrayView1<f64>) -> Array1<f64> {
    let m = xs.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = xs.mapv(|x| (x - m).exp());
    let s = e.sum();
    e / s
}

pub fn log_softmax(xs: ArrayView1<f64>) -> Array1<f64> {
    let lse = log_sum_exp(xs.iter().copied());
    xs.mapv(|x| x - lse)
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 100]`
/// (numpy's default method).
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let pos = (q / 100.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if hi == lo {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
