//! Prompt-ensemble zero-shot classification: the maximum-similarity
//! ensemble and stochastic prompt-pair sampling.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clfmetrics::roc_auc;
use crate::encoders::l2_normalize_rows;
use crate::error::{Error, Result};
use crate::math::percentile_sorted;
use crate::rng;

/// Slot replaced by a class descriptor.
pub const SLOT: &str = "{}";

/// Generic sentence templates for renal-mass prompts.
pub const DEFAULT_TEMPLATES: [&str; 20] = [
    "A soft tissue mass that is {} is visible in the kidney.",
    "A density shadow that is {} is observed in the kidney.",
    "An area that is {} is visualized at the pole of the kidney.",
    "A mass-like shadow that is {} is noted in the kidney.",
    "An occupying lesion that is {} is seen in the kidney.",
    "An abnormality that is {} is detected in the kidney.",
    "A region of interest that is {} is found in the kidney.",
    "A structural irregularity that is {} is visible in the kidney.",
    "A mixed-density lesion that is {} is apparent in the kidney.",
    "A nodule that is {} is observed in the kidney.",
    "A shadow-like lesion that is {} is identified in the kidney.",
    "A well-defined region that is {} is noted in the kidney.",
    "An abnormal soft tissue that is {} is detected in the kidney.",
    "A feature that is {} is recognized in the kidney.",
    "A density lesion that is {} is revealed in the kidney.",
    "The kidney shows a soft tissue mass that is {}.",
    "The kidney reveals a density shadow that is {}.",
    "The kidney demonstrates a lesion that is {}.",
    "The kidney presents an occupying abnormality that is {}.",
    "The kidney displays a structural irregularity that is {}.",
];

/// Prompt file contents: templates plus descriptors per class, in file order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub templates: Vec<String>,
    pub classes: serde_json::Map<String, serde_json::Value>,
}

impl PromptSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Class names and descriptor lists in file order.
    pub fn class_descriptors(&self) -> Result<Vec<(String, Vec<String>)>> {
        self.classes
            .iter()
            .map(|(name, v)| {
                let list: Vec<String> = serde_json::from_value(v.clone())
                    .map_err(|_| Error::Format(format!("class {name:?} must map to a list of strings")))?;
                Ok((name.clone(), list))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub class_names: Vec<String>,
    /// Per class, template-major: prompt `t·D + d` uses template `t` and descriptor `d`.
    pub prompts: Vec<Vec<String>>,
    /// Per class, one unit-norm row per prompt; empty until embedded.
    pub embeddings: Vec<Array2<f64>>,
}

/// Substitutes every descriptor into every template.
pub fn expand_prompts(templates: &[String], classes: &[(String, Vec<String>)]) -> Result<PromptSet> {
    for t in templates {
        if t.matches(SLOT).count() != 1 {
            return Err(Error::invalid(format!("template must contain exactly one {SLOT} slot: {t:?}")));
        }
    }
    let prompts = classes
        .iter()
        .map(|(_, descs)| templates.iter().flat_map(|t| descs.iter().map(move |d| t.replacen(SLOT, d, 1))).collect())
        .collect();
    Ok(PromptSet { class_names: classes.iter().map(|c| c.0.clone()).collect(), prompts, embeddings: Vec::new() })
}

impl PromptSet {
    pub fn n_classes(&self) -> usize {
        self.prompts.len()
    }

    /// Embeds every prompt with `encode` and L2-normalizes the result.
    pub fn embed(&mut self, encode: impl Fn(&str) -> Result<Array1<f64>>) -> Result<()> {
        self.embeddings = self
            .prompts
            .iter()
            .map(|class| {
                let rows = class.iter().map(|p| encode(p)).collect::<Result<Vec<_>>>()?;
                let dim = rows.first().map_or(0, |r| r.len());
                let mut m = Array2::zeros((rows.len(), dim));
                for (mut dst, src) in m.rows_mut().into_iter().zip(&rows) {
                    if src.len() != dim {
                        return Err(Error::invalid("prompt embeddings have inconsistent dims"));
                    }
                    dst.assign(src);
                }
                Ok(l2_normalize_rows(m.view())?.0)
            })
            .collect::<Result<_>>()?;
        Ok(())
    }

    /// Uses precomputed prompt embeddings (normalized here).
    pub fn with_embeddings(mut self, embeddings: Vec<Array2<f64>>) -> Result<Self> {
        if embeddings.len() != self.prompts.len() {
            return Err(Error::invalid("one embedding matrix per class required"));
        }
        self.embeddings = embeddings.iter().map(|e| l2_normalize_rows(e.view()).map(|r| r.0)).collect::<Result<_>>()?;
        Ok(self)
    }

    fn check_ready(&self, dim: usize) -> Result<()> {
        if self.embeddings.is_empty() {
            return Err(Error::invalid("prompt set has no classes or was not embedded"));
        }
        for (c, e) in self.embeddings.iter().enumerate() {
            if e.nrows() == 0 {
                return Err(Error::invalid(format!("class {c} has no prompts")));
            }
            if e.ncols() != dim {
                return Err(Error::invalid(format!("prompt dim {} differs from image dim {dim}", e.ncols())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZsResult {
    /// `s_c`: best prompt similarity per class.
    pub logits: Vec<f64>,
    /// Argmax of `logits`, lowest index on ties.
    pub predicted: usize,
    /// `s_1 − s_0` for two-class sets.
    pub score: Option<f64>,
}

fn unit(u: ArrayView1<f64>) -> Result<Array1<f64>> {
    let n = u.dot(&u).sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::invalid("image embedding must be non-zero and finite"));
    }
    Ok(&u / n)
}

/// Maximum-similarity ensemble: `s_c = max_k cos(u, v_{c,k})`.
pub fn zs_max_similarity(u: ArrayView1<f64>, prompts: &PromptSet) -> Result<ZsResult> {
    prompts.check_ready(u.len())?;
    let u = unit(u)?;
    let logits: Vec<f64> =
        prompts.embeddings.iter().map(|e| e.dot(&u).iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    let mut predicted = 0;
    for (c, &s) in logits.iter().enumerate() {
        if s > logits[predicted] {
            predicted = c;
        }
    }
    let score = (logits.len() == 2).then(|| logits[1] - logits[0]);
    Ok(ZsResult { logits, predicted, score })
}

/// Binary ranking scores `s_1 − s_0` of the maximum-similarity ensemble for a
/// batch of image embeddings.
pub fn max_similarity_scores(images: ArrayView2<f64>, prompts: &PromptSet) -> Result<Vec<f64>> {
    if prompts.n_classes() != 2 {
        return Err(Error::invalid("binary scores need exactly two classes"));
    }
    images.rows().into_iter().map(|u| zs_max_similarity(u, prompts).map(|r| r.score.expect("two classes"))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticAuc {
    pub mean: f64,
    /// 2.5th and 97.5th percentiles over iterations.
    pub interval: [f64; 2],
    pub iterations: usize,
    pub seed: u64,
    pub aucs: Vec<f64>,
}

/// Stochastic prompt sampling: each iteration draws one prompt per class
/// (class 0 negative, class 1 positive) and scores the cohort by the
/// similarity difference.
pub fn zs_stochastic(images: ArrayView2<f64>, labels: &[bool], prompts: &PromptSet, iterations: usize, seed: u64) -> Result<StochasticAuc> {
    if prompts.n_classes() != 2 {
        return Err(Error::invalid("stochastic sampling is defined for two classes"));
    }
    prompts.check_ready(images.ncols())?;
    if labels.len() != images.nrows() {
        return Err(Error::invalid("one label per image required"));
    }
    if iterations == 0 {
        return Err(Error::invalid("at least one iteration required"));
    }
    let (u, _) = l2_normalize_rows(images)?;
    // similarities of every image to every prompt, per class
    let sims: Vec<Array2<f64>> = prompts.embeddings.iter().map(|e| u.dot(&e.t())).collect();
    let aucs: Vec<f64> = (0..iterations)
        .into_par_iter()
        .map(|b| {
            let mut g = rng::derive(seed, b as u64);
            let neg = g.random_range(0..sims[0].ncols());
            let pos = g.random_range(0..sims[1].ncols());
            let scores: Vec<f64> = (0..u.nrows()).map(|i| sims[1][[i, pos]] - sims[0][[i, neg]]).collect();
            roc_auc(&scores, labels)
        })
        .collect::<Result<_>>()?;
    let mut sorted = aucs.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(StochasticAuc {
        mean: aucs.iter().sum::<f64>() / aucs.len() as f64,
        interval: [percentile_sorted(&sorted, 2.5), percentile_sorted(&sorted, 97.5)],
        iterations,
        seed,
        aucs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn set(a: Array2<f64>, b: Array2<f64>) -> PromptSet {
        PromptSet { class_names: vec!["a".into(), "b".into()], prompts: vec![vec![], vec![]], embeddings: vec![] }
            .with_embeddings(vec![a, b])
            .unwrap()
    }

    #[test]
    fn expansion() {
        let t: Vec<String> = DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect();
        let descs: Vec<String> = (0..5).map(|i| format!("d{i}")).collect();
        let p = expand_prompts(&t, &[("x".into(), descs.clone()), ("y".into(), descs)]).unwrap();
        assert!(p.prompts.iter().all(|c| c.len() == 100));
        assert_eq!(p.prompts[0][1], "A soft tissue mass that is d1 is visible in the kidney.");
        let one = expand_prompts(&["a {} b".into()], &[("x".into(), vec!["big".into()])]).unwrap();
        assert_eq!(one.prompts[0], vec!["a big b"]);
        let dup = expand_prompts(&["{}".into()], &[("x".into(), vec!["q".into(), "q".into()])]).unwrap();
        assert_eq!(dup.prompts[0].len(), 2);
        assert!(expand_prompts(&["no slot".into()], &[]).is_err());
        assert!(expand_prompts(&["{} {}".into()], &[]).is_err());
    }

    #[test]
    fn max_similarity_example() {
        let p = set(array![[1.0, 0.0], [0.5, 0.866]], array![[0.0, 1.0], [-1.0, 0.0]]);
        let r = zs_max_similarity(array![1.0, 0.0].view(), &p).unwrap();
        assert_eq!(r.logits, vec![1.0, 0.0]);
        assert_eq!(r.predicted, 0);
        assert_eq!(r.score, Some(-1.0));
        let scaled = zs_max_similarity(array![7.0, 0.0].view(), &p).unwrap();
        assert_eq!(scaled.predicted, 0);
        let tie = set(array![[0.0, 1.0]], array![[0.0, 1.0]]);
        assert_eq!(zs_max_similarity(array![1.0, 1.0].view(), &tie).unwrap().predicted, 0);
    }

    #[test]
    fn stochastic_single_prompt_is_degenerate() {
        let p = set(array![[1.0, 0.0]], array![[0.0, 1.0]]);
        let imgs = array![[1.0, 0.2], [0.3, 1.0], [0.9, 0.5], [0.1, 0.8]];
        let y = [false, true, false, true];
        let r = zs_stochastic(imgs.view(), &y, &p, 50, 3).unwrap();
        assert_eq!(r.interval[0], r.interval[1]);
        assert_eq!(r, zs_stochastic(imgs.view(), &y, &p, 50, 3).unwrap());
    }
}
