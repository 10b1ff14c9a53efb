//! Cross-modal retrieval in the shared embedding space.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Recall cut-offs reported by default.
pub const DEFAULT_KS: [usize; 3] = [1, 3, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Image queries ranked over texts (rows).
    I2t,
    /// Text queries ranked over images (columns).
    T2i,
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i2t" => Ok(Self::I2t),
            "t2i" => Ok(Self::T2i),
            other => Err(Error::invalid(format!("unknown direction {other:?}"))),
        }
    }
}

/// Entry `(i, j)` is the cosine similarity of image `i` and text `j`.
pub fn similarity_matrix(u: ArrayView2<f64>, v: ArrayView2<f64>) -> Result<Array2<f64>> {
    if u.ncols() != v.ncols() {
        return Err(Error::invalid(format!("embedding dims differ: {} vs {}", u.ncols(), v.ncols())));
    }
    let (un, _) = crate::encoders::l2_normalize_rows(u)?;
    let (vn, _) = crate::encoders::l2_normalize_rows(v)?;
    Ok(un.dot(&vn.t()).mapv(|s| s.clamp(-1.0, 1.0)))
}

/// 1-based rank of `target` within `scores`: entries scoring higher, and
/// equal entries with a lower index, come first.
pub fn rank_of(scores: ArrayView1<f64>, target: usize) -> usize {
    let s = scores[target];
    1 + scores.iter().enumerate().filter(|&(j, &x)| x > s || (x == s && j < target)).count()
}

/// Fraction of queries whose true partner (same index) ranks within the top `k`.
pub fn recall_at_k(sim: ArrayView2<f64>, k: usize, direction: Direction) -> Result<f64> {
    let n = sim.nrows();
    if sim.ncols() != n || n == 0 {
        return Err(Error::invalid("recall needs a non-empty square similarity matrix"));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k={k} outside [1, {n}]")));
    }
    let hits: usize = (0..n)
        .into_par_iter()
        .map(|q| {
            let scores = match direction {
                Direction::I2t => sim.row(q),
                Direction::T2i => sim.column(q),
            };
            usize::from(rank_of(scores, q) <= k)
        })
        .sum();
    Ok(hits as f64 / n as f64)
}

/// Mean of image-to-text and text-to-image Recall@1.
pub fn mean_recall_at_1(sim: ArrayView2<f64>) -> Result<f64> {
    Ok((recall_at_k(sim, 1, Direction::I2t)? + recall_at_k(sim, 1, Direction::T2i)?) / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub direction: Direction,
    pub k: usize,
    pub recall: f64,
}
