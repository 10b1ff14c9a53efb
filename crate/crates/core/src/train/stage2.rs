use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::encoders::{Checkpoint, ImageEncoder, ProjectionHead, TextEncoder};
use crate::error::{Error, Result};
use crate::losses::{clip_infonce_raw, LogitScale};
use crate::retrieval::{mean_recall_at_1, similarity_matrix};
use crate::rng::{self, Rng};

use super::{clip_grad_norm, lr_at, shuffled_batches, AdamW, EpochRecord, OptimizerConfig, PhaseSet, Schedule, ScheduleConfig, TrainOutcome};

/// Image phase sets paired with precomputed text embeddings; row 0 of
/// `texts[i]` is the original report, further rows its augmented versions.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub phases: Vec<PhaseSet>,
    pub texts: Vec<Array2<f64>>,
}

impl PairedDataset {
    pub fn new(phases: Vec<PhaseSet>, texts: Vec<Array2<f64>>) -> Result<Self> {
        if phases.len() != texts.len() {
            return Err(Error::invalid(format!("{} image sets for {} texts", phases.len(), texts.len())));
        }
        if let Some(i) = texts.iter().position(|t| t.nrows() == 0) {
            return Err(Error::Data(format!("patient {i} has no text")));
        }
        if let Some(i) = phases.iter().position(PhaseSet::is_empty) {
            return Err(Error::Data(format!("patient {i} has no phases")));
        }
        Ok(Self { phases, texts })
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    fn check(&self, model: &Stage2Model) -> Result<()> {
        if self.is_empty() {
            return Err(Error::invalid("empty paired dataset"));
        }
        if self.phases.iter().any(|p| p.input_len() != model.encoder.input_len()) {
            return Err(Error::invalid("phase input width does not match the encoder"));
        }
        if self.texts.iter().any(|t| t.ncols() != model.projection.embed_dim()) {
            return Err(Error::invalid("text embedding dim does not match the projection"));
        }
        Ok(())
    }

    /// Preferred-phase inputs and original-report embeddings, row-aligned.
    fn eval_pairs(&self) -> (Array2<f64>, Array2<f64>) {
        let width = self.phases[0].input_len();
        let dim = self.texts[0].ncols();
        let mut x = Array2::zeros((self.len(), width));
        let mut t = Array2::zeros((self.len(), dim));
        for i in 0..self.len() {
            x.row_mut(i).assign(&ndarray::ArrayView1::from(self.phases[i].preferred().1));
            t.row_mut(i).assign(&self.texts[i].row(0));
        }
        (x, t)
    }
}

/// Embeds every token sequence (original first, then its augmented versions)
/// with the frozen text encoder, dropout off.
pub fn precompute_text(encoder: &TextEncoder, versions: &[Vec<usize>]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((versions.len(), encoder.dim()));
    for (mut row, tokens) in out.rows_mut().into_iter().zip(versions) {
        row.assign(&encoder.embed(tokens)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub backbone: OptimizerConfig,
    pub projection: OptimizerConfig,
    pub schedule: Schedule,
    pub warmup_ratio: f64,
    pub grad_clip: Option<f64>,
    pub init_temperature: f64,
    pub learn_temperature: bool,
    pub train_backbone: bool,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 1024,
            backbone: OptimizerConfig::clip_backbone(),
            projection: OptimizerConfig::clip_projection(),
            schedule: Schedule::Cosine,
            warmup_ratio: 0.1,
            grad_clip: Some(0.2),
            init_temperature: 0.07,
            learn_temperature: true,
            train_backbone: true,
            seed: 0,
        }
    }
}

impl Stage2Config {
    /// Small-cohort variant with larger learning rates; the backbone to
    /// projection learning-rate ratio is kept.
    pub fn desk() -> Self {
        let d = Self::default();
        Self {
            batch_size: 512,
            backbone: OptimizerConfig { lr: 2e-4, ..d.backbone },
            projection: OptimizerConfig { lr: 1e-2, ..d.projection },
            ..d
        }
    }
}

/// Image backbone, projection head and learnable temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Model {
    pub encoder: ImageEncoder,
    pub projection: ProjectionHead,
    pub logit_scale: LogitScale,
}

impl Stage2Model {
    pub fn new(encoder: ImageEncoder, embed_dim: usize, temperature: f64, rng: &mut Rng) -> Result<Self> {
        let projection = ProjectionHead::new(encoder.feature_dim(), embed_dim, rng)?;
        Ok(Self { encoder, projection, logit_scale: LogitScale::from_temperature(temperature)? })
    }

    /// Unnormalized joint-space image embeddings.
    pub fn embed(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let f = self.encoder.forward_batch(inputs)?;
        self.projection.net().forward(f.output().view())
    }

    pub fn to_checkpoint(&self, seed: u64, step: u64) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(seed, step);
        ck.set_meta("input_dims", self.encoder.input_dims())?;
        ck.set_meta("logit_scale", self.logit_scale.log())?;
        ck.push_mlp("encoder", self.encoder.net())?;
        ck.push_mlp("projection", self.projection.net())?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            encoder: ImageEncoder::from_mlp(ck.meta("input_dims")?, ck.restore_mlp("encoder")?)?,
            projection: ProjectionHead::from_mlp(ck.restore_mlp("projection")?),
            logit_scale: LogitScale::from_log(ck.meta("logit_scale")?),
        })
    }
}

/// Mean of image-to-text and text-to-image Recall@1 on the preferred phase
/// and original reports.
pub fn retrieval_score(model: &Stage2Model, data: &PairedDataset) -> Result<f64> {
    data.check(model)?;
    let (x, t) = data.eval_pairs();
    let u = model.embed(x.view())?;
    mean_recall_at_1(similarity_matrix(u.view(), t.view())?.view())
}

/// Full-cohort InfoNCE on the preferred phase and original reports.
pub fn clip_eval_loss(model: &Stage2Model, data: &PairedDataset) -> Result<f64> {
    data.check(model)?;
    let (x, t) = data.eval_pairs();
    let u = model.embed(x.view())?;
    Ok(clip_infonce_raw(u.view(), t.view(), model.logit_scale)?.value)
}

/// Image–text alignment; keeps the epoch with the best validation retrieval
/// score (the earlier one on ties). Every batch draws one available phase and
/// one stored text version per patient.
pub fn train_stage2(init: Stage2Model, train: &PairedDataset, val: &PairedDataset, cfg: &Stage2Config) -> Result<TrainOutcome<Stage2Model>> {
    train.check(&init)?;
    val.check(&init)?;
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let sched = ScheduleConfig {
        schedule: cfg.schedule,
        warmup_ratio: cfg.warmup_ratio,
        total_steps: (cfg.epochs * batches_per_epoch) as u64,
    };
    let mut model = init.clone();
    let mut enc_params = model.encoder.net().params().to_vec();
    let mut proj_params = model.projection.net().params().to_vec();
    let mut scale_param = [model.logit_scale.log()];
    let mut enc_opt = AdamW::new(cfg.backbone, enc_params.len())?;
    let mut proj_opt = AdamW::new(cfg.projection, proj_params.len())?;
    let mut scale_opt = AdamW::new(OptimizerConfig { weight_decay: 0.0, ..cfg.projection }, 1)?;
    let width = init.encoder.input_len();
    let dim = init.projection.embed_dim();

    let mut best = (init, None, None::<f64>);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut g = rng::derive(cfg.seed, epoch as u64);
        let batches = shuffled_batches(train.len(), cfg.batch_size, &mut g);
        let (mut loss_sum, mut lr) = (0.0, 0.0);
        for idx in &batches {
            let mut x = Array2::zeros((idx.len(), width));
            let mut t = Array2::zeros((idx.len(), dim));
            for (r, &i) in idx.iter().enumerate() {
                x.row_mut(r).assign(&ndarray::ArrayView1::from(train.phases[i].sample(&mut g).1));
                let v = g.random_range(0..train.texts[i].nrows());
                t.row_mut(r).assign(&train.texts[i].row(v));
            }
            let fcache = model.encoder.forward_batch(x.view())?;
            let pcache = model.projection.net().forward_cached(fcache.output().view())?;
            let out = clip_infonce_raw(pcache.output().view(), t.view(), model.logit_scale)?;
            let (gp, dfeat) = model.projection.net().backward(&pcache, out.grad_u.view())?;
            let ge = if cfg.train_backbone { model.encoder.backward(&fcache, dfeat.view())?.0 } else { vec![0.0; enc_params.len()] };
            let gs = if cfg.learn_temperature { out.grad_logit_scale } else { 0.0 };

            let mut all: Vec<f64> = ge.into_iter().chain(gp).chain([gs]).collect();
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(&mut all, max);
            }
            let (ge, rest) = all.split_at(enc_params.len());
            let (gp, gs) = rest.split_at(proj_params.len());
            let step = proj_opt.steps_taken();
            lr = lr_at(step, &sched, cfg.projection.lr);
            if cfg.train_backbone {
                enc_opt.step(&mut enc_params, ge, lr_at(step, &sched, cfg.backbone.lr))?;
                model.encoder.net_mut().set_params(&enc_params)?;
            }
            proj_opt.step(&mut proj_params, gp, lr)?;
            model.projection.net_mut().set_params(&proj_params)?;
            if cfg.learn_temperature {
                scale_opt.step(&mut scale_param, gs, lr)?;
                model.logit_scale = LogitScale::from_log(scale_param[0]);
                scale_param[0] = model.logit_scale.log();
            }
            loss_sum += out.value;
        }
        let metric = retrieval_score(&model, val)?;
        history.push(EpochRecord { epoch, loss: loss_sum / batches.len() as f64, lr, metric });
        if best.2.is_none_or(|b| metric > b) {
            best = (model.clone(), Some(epoch), Some(metric));
        }
    }
    Ok(TrainOutcome { model: best.0, best_epoch: best.1, best_metric: best.2, history })
}
