use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::clfmetrics::roc_auc;
use crate::error::{Error, Result};

use super::{fuse_logits, FinetuneModel, PhaseSet, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationSetting {
    pub phases: usize,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub settings: Vec<AblationSetting>,
    /// Reversing the phase order left every fused logit unchanged (≤ 1e-12).
    pub permutation_invariant: bool,
}

/// Scores a binary classifier with late fusion over the first `k` phases of
/// each patient, for `k = 1..=max_phases`.
pub fn fusion_ablation(model: &FinetuneModel, sets: &[PhaseSet], labels: &[bool], max_phases: usize) -> Result<AblationReport> {
    if model.task != TaskKind::Classification || model.head.output_dim() != 2 {
        return Err(Error::invalid("fusion ablation needs a two-class classifier"));
    }
    if sets.len() != labels.len() || sets.is_empty() {
        return Err(Error::invalid("one label per patient required"));
    }
    if let Some(i) = sets.iter().position(|s| s.len() < max_phases) {
        return Err(Error::Data(format!("patient {i} has fewer than {max_phases} phases")));
    }
    let mut settings = Vec::with_capacity(max_phases);
    let mut invariant = true;
    for k in 1..=max_phases {
        let mut scores = Vec::with_capacity(sets.len());
        for set in sets {
            let chosen = set.first(k);
            let mut x = Array2::zeros((chosen.len(), set.input_len()));
            for (mut row, (_, v)) in x.rows_mut().into_iter().zip(&chosen) {
                row.assign(&ArrayView1::from(*v));
            }
            let logits = model.logits(x.view())?;
            let views: Vec<ArrayView1<f64>> = logits.rows().into_iter().collect();
            let fused: Array1<f64> = fuse_logits(&views)?;
            let reversed: Vec<ArrayView1<f64>> = views.iter().rev().cloned().collect();
            let back = fuse_logits(&reversed)?;
            invariant &= fused.iter().zip(&back).all(|(a, b)| (a - b).abs() <= 1e-12);
            scores.push(fused[1] - fused[0]);
        }
        settings.push(AblationSetting { phases: k, auc: roc_auc(&scores, labels)? });
    }
    Ok(AblationReport { settings, permutation_invariant: invariant })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    use crate::encoders::{Activation, ImageEncoder, Mlp};
    use crate::train::Phase;

    fn model(task: TaskKind, out: usize) -> FinetuneModel {
        let mut head = Mlp::zeros(&[1, out], Activation::Identity, Activation::Identity).unwrap();
        let mut p = vec![0.0; 2 * out];
        p[out - 1] = 1.0;
        head.set_params(&p).unwrap();
        FinetuneModel { task, encoder: ImageEncoder::from_mlp([1, 1, 1], Mlp::identity(1, 1).unwrap()).unwrap(), head }
    }

    fn set(values: &[(Phase, f64)]) -> PhaseSet {
        PhaseSet::new(values.iter().map(|&(p, v)| (p, vec![v])).collect::<BTreeMap<_, _>>()).unwrap()
    }

    #[test]
    fn guards() {
        let sets = vec![set(&[(Phase::A, 1.0)])];
        assert!(fusion_ablation(&model(TaskKind::Cox, 1), &sets, &[true], 1).is_err());
        assert!(fusion_ablation(&model(TaskKind::Classification, 2), &sets, &[], 1).is_err());
        assert!(matches!(fusion_ablation(&model(TaskKind::Classification, 2), &sets, &[true], 2), Err(Error::Data(_))));
    }

    #[test]
    fn fused_scores_are_phase_means() {
        // class-1 logit equals the input, class-0 logit is zero
        let sets = vec![
            set(&[(Phase::N, 3.0), (Phase::A, -1.0)]),
            set(&[(Phase::N, -3.0), (Phase::A, 0.0)]),
            set(&[(Phase::N, 0.0), (Phase::V, 2.0)]),
        ];
        let labels = [true, false, true];
        let r = fusion_ablation(&model(TaskKind::Classification, 2), &sets, &labels, 2).unwrap();
        // k=1 uses N only: scores 3, -3, 0; k=2 means: 1, -1.5, 1
        assert_eq!(r.settings[0].auc, 1.0);
        assert_eq!(r.settings[1].auc, 1.0);
        assert!(r.permutation_invariant);
    }
}
