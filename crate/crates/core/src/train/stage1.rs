use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::clfmetrics::ovr_aucs;
use crate::encoders::{Checkpoint, ImageEncoder, MultiTaskHeads};
use crate::error::{Error, Result};
use crate::losses::{multitask_ce, softmax_rows, Reduction};
use crate::rng::{self, Rng};

use super::{clip_grad_norm, lr_at, shuffled_batches, AdamW, EpochRecord, OptimizerConfig, Schedule, ScheduleConfig, TrainOutcome};

/// Inputs with per-head attribute labels; `None` marks a missing label.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeDataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<Vec<Option<usize>>>,
}

impl AttributeDataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<Vec<Option<usize>>>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::invalid(format!("{} inputs for {} label rows", inputs.nrows(), labels.len())));
        }
        let heads = labels.first().map_or(0, Vec::len);
        if labels.iter().any(|l| l.len() != heads) {
            return Err(Error::invalid("every sample needs the same number of head labels"));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check(&self, model: &Stage1Model) -> Result<()> {
        if self.is_empty() {
            return Err(Error::invalid("empty dataset"));
        }
        if self.inputs.ncols() != model.encoder.input_len() {
            return Err(Error::invalid("input width does not match the encoder"));
        }
        let classes = model.heads.classes();
        for row in &self.labels {
            if row.len() != classes.len() {
                return Err(Error::invalid(format!("expected {} head labels per sample", classes.len())));
            }
            if let Some((y, c)) = row.iter().zip(&classes).find(|(y, &c)| y.is_some_and(|y| y >= c)) {
                return Err(Error::invalid(format!("label {y:?} outside head with {c} classes")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    pub warmup_ratio: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 300,
            optimizer: OptimizerConfig::image_pretrain(),
            schedule: Schedule::Cosine,
            warmup_ratio: 0.1,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl Stage1Config {
    /// Small-cohort variant: shorter runs, smaller batches, same warmup ratio.
    pub fn desk() -> Self {
        Self { epochs: 50, batch_size: 32, optimizer: OptimizerConfig { lr: 5e-3, ..OptimizerConfig::image_pretrain() }, ..Self::default() }
    }
}

/// Image backbone plus the attribute heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Model {
    pub encoder: ImageEncoder,
    pub heads: MultiTaskHeads,
}

impl Stage1Model {
    pub fn new(input_len: usize, hidden: usize, features: usize, classes: &[usize], rng: &mut Rng) -> Result<Self> {
        let encoder = ImageEncoder::new([input_len, 1, 1], hidden, features, rng)?;
        let heads = MultiTaskHeads::with_classes(features, classes, rng)?;
        Ok(Self { encoder, heads })
    }

    pub fn num_params(&self) -> usize {
        self.encoder.net().params().len() + self.heads.num_params()
    }

    fn params_flat(&self) -> Vec<f64> {
        let mut p = self.encoder.net().params().to_vec();
        p.extend(self.heads.params_flat());
        p
    }

    fn set_params_flat(&mut self, p: &[f64]) -> Result<()> {
        let n = self.encoder.net().params().len();
        self.encoder.net_mut().set_params(&p[..n])?;
        self.heads.set_params_flat(&p[n..])
    }

    /// Per-head class probabilities.
    pub fn predict_proba(&self, inputs: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        let feats = self.encoder.forward_batch(inputs)?;
        let (logits, _) = self.heads.forward(feats.output().view())?;
        Ok(logits.iter().map(|l| softmax_rows(l.view())).collect())
    }

    pub fn to_checkpoint(&self, seed: u64, step: u64) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(seed, step);
        ck.set_meta("input_dims", self.encoder.input_dims())?;
        ck.set_meta("heads", self.heads.len())?;
        ck.push_mlp("encoder", self.encoder.net())?;
        for (k, h) in self.heads.heads().iter().enumerate() {
            ck.push_mlp(&format!("head{k}"), h)?;
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let encoder = ImageEncoder::from_mlp(ck.meta("input_dims")?, ck.restore_mlp("encoder")?)?;
        let n: usize = ck.meta("heads")?;
        let heads = (0..n).map(|k| ck.restore_mlp(&format!("head{k}"))).collect::<Result<Vec<_>>>()?;
        Ok(Self { encoder, heads: MultiTaskHeads::from_heads(heads)? })
    }
}

/// Unweighted mean over heads of each head's one-vs-rest macro AUC, using
/// only labeled samples and classes with both positives and negatives.
pub fn attribute_macro_auc(model: &Stage1Model, data: &AttributeDataset) -> Result<f64> {
    data.check(model)?;
    let probs = model.predict_proba(data.inputs.view())?;
    let mut head_aucs = Vec::new();
    for (k, p) in probs.iter().enumerate() {
        let rows: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i][k].is_some()).collect();
        if rows.is_empty() {
            continue;
        }
        let sub = p.select(Axis(0), &rows);
        let labels: Vec<usize> = rows.iter().map(|&i| data.labels[i][k].expect("filtered")).collect();
        let defined: Vec<f64> = ovr_aucs(sub.view(), &labels)?.into_iter().flatten().collect();
        if !defined.is_empty() {
            head_aucs.push(defined.iter().sum::<f64>() / defined.len() as f64);
        }
    }
    if head_aucs.is_empty() {
        return Err(Error::undefined("no attribute head has a defined AUC on the validation set"));
    }
    Ok(head_aucs.iter().sum::<f64>() / head_aucs.len() as f64)
}

/// Summed per-head mean cross-entropy of one batch and its parameter gradient.
fn batch_loss_grad(model: &Stage1Model, x: ArrayView2<f64>, labels: &[&Vec<Option<usize>>]) -> Result<(f64, Vec<f64>)> {
    let cache = model.encoder.forward_batch(x)?;
    let (logits, hcache) = model.heads.forward(cache.output().view())?;
    let mut total = 0.0;
    let mut upstream = Vec::with_capacity(logits.len());
    for (k, l) in logits.iter().enumerate() {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i][k].is_some()).collect();
        if rows.is_empty() {
            upstream.push(None);
            continue;
        }
        let y: Vec<usize> = rows.iter().map(|&i| labels[i][k].expect("filtered")).collect();
        let (v, g) = multitask_ce(l.select(Axis(0), &rows).view(), &y, Reduction::Mean)?;
        total += v;
        let mut full = Array2::zeros(l.raw_dim());
        for (r, &i) in rows.iter().enumerate() {
            full.row_mut(i).assign(&g.row(r));
        }
        upstream.push(Some(full));
    }
    let (gh, dfeat) = model.heads.backward(&hcache, &upstream)?;
    let (mut grads, _) = model.encoder.backward(&cache, dfeat.view())?;
    grads.extend(gh);
    Ok((total, grads))
}

/// Image pre-training on the attribute heads; keeps the epoch with the best
/// validation macro AUC (the earlier one on ties).
pub fn train_stage1(
    init: Stage1Model,
    train: &AttributeDataset,
    val: &AttributeDataset,
    cfg: &Stage1Config,
) -> Result<TrainOutcome<Stage1Model>> {
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
    let mut opt = AdamW::new(cfg.optimizer, model.num_params())?;
    let mut best = (init, None, None::<f64>);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut params = model.params_flat();
    for epoch in 0..cfg.epochs {
        let mut g = rng::derive(cfg.seed, epoch as u64);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        let batches = shuffled_batches(train.len(), cfg.batch_size, &mut g);
        for idx in &batches {
            let x = train.inputs.select(Axis(0), idx);
            let labels: Vec<&Vec<Option<usize>>> = idx.iter().map(|&i| &train.labels[i]).collect();
            let (loss, mut grads) = batch_loss_grad(&model, x.view(), &labels)?;
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(&mut grads, max);
            }
            lr = lr_at(opt.steps_taken(), &sched, cfg.optimizer.lr);
            opt.step(&mut params, &grads, lr)?;
            model.set_params_flat(&params)?;
            loss_sum += loss;
        }
        let metric = attribute_macro_auc(&model, val)?;
        history.push(EpochRecord { epoch, loss: loss_sum / batches.len() as f64, lr, metric });
        if best.2.is_none_or(|b| metric > b) {
            best = (model.clone(), Some(epoch), Some(metric));
        }
    }
    Ok(TrainOutcome { model: best.0, best_epoch: best.1, best_metric: best.2, history })
}
