//! Multi-phase inputs: per-patient phase sets, random phase sampling and
//! late logit fusion.

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView1};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// CT acquisition phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    /// Non-contrast.
    N,
    /// Arterial.
    A,
    /// Venous.
    V,
    /// Delayed.
    D,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::N, Phase::A, Phase::V, Phase::D];

    /// Order used when a single deterministic phase is needed.
    pub const PRIORITY: [Phase; 4] = [Phase::A, Phase::V, Phase::D, Phase::N];

    pub fn is_contrast(self) -> bool {
        self != Phase::N
    }

    pub fn tag(self) -> &'static str {
        match self {
            Phase::N => "N",
            Phase::A => "A",
            Phase::V => "V",
            Phase::D => "D",
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "N" => Ok(Phase::N),
            "A" => Ok(Phase::A),
            "V" => Ok(Phase::V),
            "D" => Ok(Phase::D),
            other => Err(Error::Format(format!("unknown phase tag {other:?}"))),
        }
    }
}

/// One patient's preprocessed inputs keyed by phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSet {
    inputs: BTreeMap<Phase, Vec<f64>>,
}

impl PhaseSet {
    /// Needs at least one contrast-enhanced phase and equal input lengths.
    pub fn new(inputs: BTreeMap<Phase, Vec<f64>>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Data("patient has no phases".into()));
        }
        if !inputs.keys().any(|p| p.is_contrast()) {
            return Err(Error::Data("patient has no contrast-enhanced phase".into()));
        }
        let len = inputs.values().next().map_or(0, Vec::len);
        if inputs.values().any(|v| v.len() != len) {
            return Err(Error::Data("phase inputs differ in length".into()));
        }
        Ok(Self { inputs })
    }

    pub fn available(&self) -> Vec<Phase> {
        self.inputs.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn get(&self, phase: Phase) -> Option<&[f64]> {
        self.inputs.get(&phase).map(Vec::as_slice)
    }

    pub fn input_len(&self) -> usize {
        self.inputs.values().next().map_or(0, Vec::len)
    }

    /// Uniform draw over the available phases.
    pub fn sample(&self, rng: &mut Rng) -> (Phase, &[f64]) {
        let k = rng.random_range(0..self.inputs.len());
        let (p, v) = self.inputs.iter().nth(k).expect("index in range");
        (*p, v)
    }

    /// First available phase in [`Phase::PRIORITY`] order.
    pub fn preferred(&self) -> (Phase, &[f64]) {
        Phase::PRIORITY
            .iter()
            .find_map(|p| self.inputs.get(p).map(|v| (*p, v.as_slice())))
            .expect("phase set is never empty")
    }

    /// Phases in canonical (N, A, V, D) order, at most `k` of them.
    pub fn first(&self, k: usize) -> Vec<(Phase, &[f64])> {
        self.inputs.iter().take(k).map(|(p, v)| (*p, v.as_slice())).collect()
    }
}

/// Element-wise mean of per-phase logits.
pub fn fuse_logits(per_phase: &[ArrayView1<f64>]) -> Result<Array1<f64>> {
    let first = per_phase.first().ok_or_else(|| Error::invalid("no phase logits to fuse"))?;
    if per_phase.iter().any(|l| l.len() != first.len()) {
        return Err(Error::invalid("phase logits differ in length"));
    }
    let mut sum = Array1::zeros(first.len());
    for l in per_phase {
        sum += l;
    }
    Ok(sum / per_phase.len() as f64)
}
