use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::clfmetrics::macro_ovr_auc;
use crate::encoders::{Activation, Checkpoint, ImageEncoder, Mlp};
use crate::error::{Error, Result};
use crate::losses::{cox_partial_loglik, multitask_ce, softmax_rows, Reduction};
use crate::rng;
use crate::survival::harrell_cindex;

use super::{shuffled_batches, AdamW, OptimizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Cox,
}

/// Supervision for a downstream head.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, n_classes: usize },
    /// Survival endpoint (recurrence-free survival when fitting the Cox head).
    Survival { times: Vec<f64>, events: Vec<bool> },
}

impl Targets {
    pub fn kind(&self) -> TaskKind {
        match self {
            Targets::Classes { .. } => TaskKind::Classification,
            Targets::Survival { .. } => TaskKind::Cox,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Survival { times, .. } => times.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn out_dim(&self) -> usize {
        match self {
            Targets::Classes { n_classes, .. } => *n_classes,
            Targets::Survival { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub batch_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub epochs: usize,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub train_backbone: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            batch_sizes: vec![50, 100, 150],
            learning_rates: vec![5e-4, 1e-4, 5e-5, 1e-5],
            epochs: 100,
            betas: (0.9, 0.999),
            weight_decay: 0.0,
            train_backbone: false,
            seed: 0,
        }
    }
}

/// Backbone plus a linear head (`C` logits, or one Cox risk score).
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneModel {
    pub task: TaskKind,
    pub encoder: ImageEncoder,
    pub head: Mlp,
}

impl FinetuneModel {
    /// Class logits or Cox risk scores, one row per input.
    pub fn logits(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let f = self.encoder.forward_batch(inputs)?;
        self.head.forward(f.output().view())
    }

    /// Ranking scores: class-1 probability (binary), or the Cox risk.
    pub fn scores(&self, inputs: ArrayView2<f64>) -> Result<Vec<f64>> {
        let l = self.logits(inputs)?;
        Ok(match self.task {
            TaskKind::Cox => l.column(0).to_vec(),
            TaskKind::Classification => softmax_rows(l.view()).column(l.ncols().min(2) - 1).to_vec(),
        })
    }

    pub fn to_checkpoint(&self, seed: u64, step: u64) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(seed, step);
        ck.set_meta("task", self.task)?;
        ck.set_meta("input_dims", self.encoder.input_dims())?;
        ck.push_mlp("encoder", self.encoder.net())?;
        ck.push_mlp("head", &self.head)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            task: ck.meta("task")?,
            encoder: ImageEncoder::from_mlp(ck.meta("input_dims")?, ck.restore_mlp("encoder")?)?,
            head: ck.restore_mlp("head")?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub batch_size: usize,
    pub lr: f64,
    pub metric: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub model: FinetuneModel,
    pub batch_size: usize,
    pub lr: f64,
    /// Macro AUC (classification) or Harrell's C (Cox) on validation.
    pub val_metric: f64,
    pub grid: Vec<GridPoint>,
}

fn validation_metric(model: &FinetuneModel, x: ArrayView2<f64>, y: &Targets) -> Result<f64> {
    let logits = model.logits(x)?;
    match y {
        Targets::Classes { labels, .. } => macro_ovr_auc(softmax_rows(logits.view()).view(), labels),
        Targets::Survival { times, events } => harrell_cindex(times, events, &logits.column(0).to_vec()),
    }
}

fn check_targets(x: ArrayView2<f64>, y: &Targets, encoder: &ImageEncoder) -> Result<()> {
    if x.nrows() != y.len() || y.is_empty() {
        return Err(Error::invalid("inputs and targets must be non-empty and aligned"));
    }
    if x.ncols() != encoder.input_len() {
        return Err(Error::invalid("input width does not match the encoder"));
    }
    match y {
        Targets::Classes { labels, n_classes } => {
            if *n_classes < 2 || labels.iter().any(|&l| l >= *n_classes) {
                return Err(Error::invalid("class labels must lie in [0, n_classes) with n_classes >= 2"));
            }
        }
        Targets::Survival { times, events } => crate::survival::km_estimate(times, events).map(|_| ())?,
    }
    Ok(())
}

/// Loss and head/backbone gradients of one batch; `None` when the batch
/// carries no signal (a Cox batch without events).
type BatchGrads = (f64, Vec<f64>, Vec<f64>);

fn batch_step(
    model: &FinetuneModel,
    x: ArrayView2<f64>,
    y: &Targets,
    idx: &[usize],
    with_backbone: bool,
) -> Result<Option<BatchGrads>> {
    let fcache = model.encoder.forward_batch(x)?;
    let hcache = model.head.forward_cached(fcache.output().view())?;
    let logits = hcache.output();
    let (loss, upstream) = match y {
        Targets::Classes { labels, .. } => {
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            multitask_ce(logits.view(), &yb, Reduction::Mean)?
        }
        Targets::Survival { times, events } => {
            let tb: Vec<f64> = idx.iter().map(|&i| times[i]).collect();
            let eb: Vec<bool> = idx.iter().map(|&i| events[i]).collect();
            let d = eb.iter().filter(|&&e| e).count();
            if d == 0 {
                return Ok(None);
            }
            let (v, g) = cox_partial_loglik(&logits.column(0).to_vec(), &tb, &eb)?;
            let g = Array2::from_shape_vec((g.len(), 1), g).expect("column shape") / d as f64;
            (v / d as f64, g)
        }
    };
    let (gh, dfeat) = model.head.backward(&hcache, upstream.view())?;
    let ge = if with_backbone { model.encoder.backward(&fcache, dfeat.view())?.0 } else { Vec::new() };
    Ok(Some((loss, gh, ge)))
}

fn train_one(
    encoder: &ImageEncoder,
    train: (ArrayView2<f64>, &Targets),
    val: (ArrayView2<f64>, &Targets),
    batch_size: usize,
    lr: f64,
    cfg: &FinetuneConfig,
    stream: u64,
) -> Result<(FinetuneModel, f64, usize)> {
    let (tx, ty) = train;
    let mut g = rng::derive(cfg.seed, stream);
    let head = Mlp::init(&[encoder.feature_dim(), ty.out_dim()], Activation::Identity, Activation::Identity, &mut g)?;
    let mut model = FinetuneModel { task: ty.kind(), encoder: encoder.clone(), head };
    let opt_cfg = OptimizerConfig { lr, betas: cfg.betas, weight_decay: cfg.weight_decay, eps: 1e-8 };
    let mut head_params = model.head.params().to_vec();
    let mut enc_params = model.encoder.net().params().to_vec();
    let mut head_opt = AdamW::new(opt_cfg, head_params.len())?;
    let mut enc_opt = AdamW::new(opt_cfg, enc_params.len())?;

    let mut best = (model.clone(), validation_metric(&model, val.0, val.1)?, 0usize);
    for epoch in 1..=cfg.epochs {
        for idx in shuffled_batches(tx.nrows(), batch_size, &mut g) {
            let xb = tx.select(Axis(0), &idx);
            let Some((_, gh, ge)) = batch_step(&model, xb.view(), ty, &idx, cfg.train_backbone)? else {
                continue;
            };
            head_opt.step(&mut head_params, &gh, lr)?;
            model.head.set_params(&head_params)?;
            if cfg.train_backbone {
                enc_opt.step(&mut enc_params, &ge, lr)?;
                model.encoder.net_mut().set_params(&enc_params)?;
            }
        }
        let m = validation_metric(&model, val.0, val.1)?;
        if m > best.1 {
            best = (model.clone(), m, epoch);
        }
    }
    Ok(best)
}

/// Grid search over batch size × learning rate. Each grid point trains a
/// fresh linear head (and optionally the backbone), keeping its best
/// validation epoch; the best grid point wins, earlier points on ties.
pub fn finetune_head(
    encoder: &ImageEncoder,
    train_x: ArrayView2<f64>,
    train_y: &Targets,
    val_x: ArrayView2<f64>,
    val_y: &Targets,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    if cfg.batch_sizes.is_empty() || cfg.learning_rates.is_empty() {
        return Err(Error::invalid("empty hyperparameter grid"));
    }
    if cfg.batch_sizes.contains(&0) || cfg.learning_rates.iter().any(|&lr| !(lr > 0.0)) {
        return Err(Error::invalid("grid batch sizes and learning rates must be positive"));
    }
    if train_y.kind() != val_y.kind() {
        return Err(Error::invalid("train and validation targets differ in task"));
    }
    check_targets(train_x, train_y, encoder)?;
    check_targets(val_x, val_y, encoder)?;
    if let (Targets::Classes { n_classes: a, .. }, Targets::Classes { n_classes: b, .. }) = (train_y, val_y) {
        if a != b {
            return Err(Error::invalid("train and validation class counts differ"));
        }
    }

    let mut grid = Vec::new();
    let mut best: Option<(FinetuneModel, usize, f64, f64)> = None;
    let mut stream = 0;
    for &bs in &cfg.batch_sizes {
        for &lr in &cfg.learning_rates {
            let (model, metric, best_epoch) = train_one(encoder, (train_x, train_y), (val_x, val_y), bs, lr, cfg, stream)?;
            stream += 1;
            grid.push(GridPoint { batch_size: bs, lr, metric, best_epoch });
            if best.as_ref().is_none_or(|b| metric > b.3) {
                best = Some((model, bs, lr, metric));
            }
        }
    }
    let (model, batch_size, lr, val_metric) = best.expect("grid is non-empty");
    Ok(FinetuneOutcome { model, batch_size, lr, val_metric, grid })
}
