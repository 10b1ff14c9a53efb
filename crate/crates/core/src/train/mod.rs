//! Optimization and training: AdamW, warmup schedules, gradient clipping,
//! the two pre-training stages, downstream head fine-tuning and multi-phase
//! handling.
//!
//! Training loops are single-threaded and fully determined by their config
//! seed.

mod finetune;
mod fusion;
mod phases;
mod stage1;
mod stage2;

pub use finetune::{finetune_head, FinetuneConfig, FinetuneModel, FinetuneOutcome, GridPoint, Targets, TaskKind};
pub use fusion::{fusion_ablation, AblationReport, AblationSetting};
pub use phases::{fuse_logits, Phase, PhaseSet};
pub use stage1::{attribute_macro_auc, train_stage1, AttributeDataset, Stage1Config, Stage1Model};
pub use stage2::{clip_eval_loss, precompute_text, retrieval_score, train_stage2, PairedDataset, Stage2Config, Stage2Model};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    /// Decoupled weight decay.
    pub weight_decay: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    /// Image backbone pre-training.
    pub fn image_pretrain() -> Self {
        Self { lr: 5e-4, betas: (0.9, 0.999), weight_decay: 5e-3, eps: 1e-8 }
    }

    /// Image backbone during image–text alignment.
    pub fn clip_backbone() -> Self {
        Self { lr: 1e-5, betas: (0.9, 0.98), weight_decay: 1e-2, eps: 1e-8 }
    }

    /// Projection head during image–text alignment.
    pub fn clip_projection() -> Self {
        Self { lr: 5e-4, ..Self::clip_backbone() }
    }

    pub fn validate(&self) -> Result<()> {
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr > 0.0) || !beta_ok(self.betas.0) || !beta_ok(self.betas.1) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!("invalid optimizer config {self:?}")));
        }
        Ok(())
    }
}

/// AdamW state: bias-corrected moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub cfg: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, n_params: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, m: vec![0.0; n_params], v: vec![0.0; n_params], step: 0 })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer holds {} moments, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let t = self.step + 1;
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training { step: t, message: format!("non-finite gradient at index {i}") });
        }
        let OptimizerConfig { betas: (b1, b2), weight_decay, eps, .. } = self.cfg;
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *p -= lr * weight_decay * *p;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
        self.step = t;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub schedule: Schedule,
    pub warmup_ratio: f64,
    pub total_steps: u64,
}

impl ScheduleConfig {
    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_ratio * self.total_steps as f64).ceil() as u64
    }
}

/// Learning rate at `step`: linear ramp from 0 over the warmup, then cosine
/// or linear decay to 0 at `total_steps`.
pub fn lr_at(step: u64, cfg: &ScheduleConfig, base_lr: f64) -> f64 {
    let warm = cfg.warmup_steps();
    if step < warm {
        return base_lr * step as f64 / warm as f64;
    }
    let span = cfg.total_steps.saturating_sub(warm);
    let progress = if span == 0 { 1.0 } else { ((step - warm) as f64 / span as f64).min(1.0) };
    match cfg.schedule {
        Schedule::Cosine => base_lr * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0,
        Schedule::Linear => base_lr * (1.0 - progress),
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Learning rate at the epoch's last update.
    pub lr: f64,
    /// Validation selection metric.
    pub metric: f64,
}

/// Best checkpoint of a run plus its per-epoch history.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<M> {
    pub model: M,
    /// `None` when no epoch ran and the initialization was returned.
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
    pub history: Vec<EpochRecord>,
}

/// Writes one JSON object per epoch.
pub fn write_epoch_log(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in history {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Batches of a shuffled index permutation.
pub(crate) fn shuffled_batches(n: usize, batch_size: usize, rng: &mut crate::rng::Rng) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_zero_gradient() {
        let mut opt = AdamW::new(OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::image_pretrain() }, 2).unwrap();
        let mut p = [1.5, -2.0];
        opt.step(&mut p, &[0.0, 0.0], 1e-2).unwrap();
        assert_eq!(p, [1.5, -2.0]);

        let mut opt = AdamW::new(OptimizerConfig { weight_decay: 0.1, ..OptimizerConfig::image_pretrain() }, 1).unwrap();
        let mut p = [2.0];
        opt.step(&mut p, &[0.0], 0.01).unwrap();
        assert_eq!(p, [2.0 * (1.0 - 0.01 * 0.1)]);
    }

    #[test]
    fn adamw_first_step_scalar() {
        let cfg = OptimizerConfig { lr: 0.1, betas: (0.9, 0.999), weight_decay: 0.0, eps: 1e-8 };
        let mut opt = AdamW::new(cfg, 1).unwrap();
        let mut p = [1.0];
        opt.step(&mut p, &[0.5], 0.1).unwrap();
        // m̂ = g, v̂ = g²
        let m_hat = (0.1 * 0.5) / (1.0 - 0.9);
        let v_hat = (0.001 * 0.25) / (1.0 - 0.999);
        assert!((p[0] - (1.0 - 0.1 * m_hat / (f64::sqrt(v_hat) + 1e-8))).abs() < 1e-15);
        assert!((p[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn adamw_rejects_nan() {
        let mut opt = AdamW::new(OptimizerConfig::image_pretrain(), 1).unwrap();
        let mut p = [0.0];
        opt.step(&mut p, &[1.0], 0.1).unwrap();
        assert!(matches!(opt.step(&mut p, &[f64::NAN], 0.1), Err(Error::Training { step: 2, .. })));
    }

    #[test]
    fn schedule_points() {
        let cfg = ScheduleConfig { schedule: Schedule::Cosine, warmup_ratio: 0.1, total_steps: 100 };
        assert_eq!(lr_at(0, &cfg, 1.0), 0.0);
        assert_eq!(lr_at(10, &cfg, 1.0), 1.0);
        assert!((lr_at(55, &cfg, 1.0) - 0.5).abs() < 1e-15);
        assert!(lr_at(100, &cfg, 1.0).abs() < 1e-15);
        let lin = ScheduleConfig { schedule: Schedule::Linear, ..cfg };
        assert_eq!(lr_at(55, &lin, 2.0), 1.0);
    }

    #[test]
    fn clipping() {
        let mut g = [0.06, 0.08];
        assert_eq!(clip_grad_norm(&mut g, 0.2), 0.1);
        assert_eq!(g, [0.06, 0.08]);
        let mut g = [0.3, 0.4];
        clip_grad_norm(&mut g, 0.2);
        assert!((g[0] - 0.12).abs() < 1e-15 && (g[1] - 0.16).abs() < 1e-15);
    }
}
