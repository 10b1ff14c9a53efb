use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;

use oncoclip::encoders::{Activation, ImageEncoder, Mlp, ProjectionHead, TextEncoder, ATTRIBUTE_CLASSES};
use oncoclip::losses::{multitask_ce, LogitScale, Reduction};
use oncoclip::math::log_sum_exp;
use oncoclip::rng;
use oncoclip::survival::harrell_cindex;
use oncoclip::synth::{gen_cohort, oracle_scores, Patient, SynthConfig};
use oncoclip::train::*;
use oncoclip::Error;

fn preferred(ps: &[Patient]) -> Array2<f64> {
    let mut x = Array2::zeros((ps.len(), ps[0].features.len()));
    for (mut row, p) in x.rows_mut().into_iter().zip(ps) {
        row.assign(&ArrayView1::from(p.phases.preferred().1));
    }
    x
}

/// Every head's label is the argmax of its own random linear scores.
fn separable(n: usize, dim: usize, seed: u64, w: &[Array2<f64>]) -> AttributeDataset {
    let mut g = rng::derive(seed, 0);
    let x = Array2::from_shape_fn((n, dim), |_| g.sample::<f64, _>(StandardNormal));
    let labels = x
        .rows()
        .into_iter()
        .map(|r| {
            w.iter()
                .map(|wk| {
                    let s = wk.dot(&r);
                    Some((0..s.len()).fold(0, |b, c| if s[c] > s[b] { c } else { b }))
                })
                .collect()
        })
        .collect();
    AttributeDataset::new(x, labels).unwrap()
}

fn separable_pair() -> (AttributeDataset, AttributeDataset) {
    let mut g = rng::derive(99, 0);
    let w: Vec<Array2<f64>> = ATTRIBUTE_CLASSES.iter().map(|&c| Array2::from_shape_fn((c, 16), |_| g.sample(StandardNormal))).collect();
    (separable(600, 16, 1, &w), separable(200, 16, 2, &w))
}

#[test]
fn stage1_separable_attributes() {
    let (train, val) = separable_pair();
    let init = Stage1Model::new(16, 64, 32, &ATTRIBUTE_CLASSES, &mut rng::seeded(0)).unwrap();
    let cfg = Stage1Config::desk();
    assert!(cfg.epochs <= 50);
    let out = train_stage1(init, &train, &val, &cfg).unwrap();
    let auc = out.best_metric.unwrap();
    assert!(auc >= 0.95, "validation macro-AUC {auc}");
    assert_eq!(attribute_macro_auc(&out.model, &val).unwrap(), auc);
}

#[test]
fn stage1_zero_epochs_and_determinism() {
    let (train, val) = separable_pair();
    let init = Stage1Model::new(16, 16, 8, &ATTRIBUTE_CLASSES, &mut rng::seeded(0)).unwrap();
    let none = train_stage1(init.clone(), &train, &val, &Stage1Config { epochs: 0, ..Stage1Config::desk() }).unwrap();
    assert_eq!(none.model, init);
    assert!(none.best_epoch.is_none() && none.history.is_empty());

    let cfg = Stage1Config { epochs: 3, ..Stage1Config::desk() };
    let a = train_stage1(init.clone(), &train, &val, &cfg).unwrap();
    let b = train_stage1(init, &train, &val, &cfg).unwrap();
    assert_eq!(a.best_metric, b.best_metric);
    assert_eq!(a.model.to_checkpoint(0, 3).unwrap(), b.model.to_checkpoint(0, 3).unwrap());
    assert_eq!(a.history, b.history);
}

#[test]
fn stage1_rejects_empty() {
    let (train, _) = separable_pair();
    let empty = AttributeDataset::new(Array2::zeros((0, 16)), vec![]).unwrap();
    let init = Stage1Model::new(16, 8, 8, &ATTRIBUTE_CLASSES, &mut rng::seeded(0)).unwrap();
    assert!(matches!(train_stage1(init, &empty, &train, &Stage1Config::desk()), Err(Error::InvalidArgument(_))));
}

#[test]
fn stage1_checkpoint_round_trip() {
    let init = Stage1Model::new(16, 8, 4, &ATTRIBUTE_CLASSES, &mut rng::seeded(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("s1");
    init.to_checkpoint(5, 0).unwrap().save(&prefix).unwrap();
    let back = Stage1Model::from_checkpoint(&oncoclip::encoders::Checkpoint::load(&prefix).unwrap()).unwrap();
    assert_eq!(back, init);
}

#[test]
fn convex_toy_loss_non_increasing() {
    let mut g = rng::seeded(3);
    let x = Array2::from_shape_fn((40, 5), |_| g.sample::<f64, _>(StandardNormal));
    let y: Vec<usize> = x.rows().into_iter().map(|r| usize::from(r[0] + 0.5 * r[1] > 0.0) + usize::from(r[2] > 1.0)).collect();
    let mut layer = Mlp::init(&[5, 3], Activation::Identity, Activation::Identity, &mut g).unwrap();
    let mut opt = AdamW::new(OptimizerConfig { lr: 1e-3, betas: (0.9, 0.999), weight_decay: 0.0, eps: 1e-8 }, layer.params().len()).unwrap();
    let mut params = layer.params().to_vec();
    let mut prev = f64::INFINITY;
    for _ in 0..300 {
        let cache = layer.forward_cached(x.view()).unwrap();
        let (loss, grad) = multitask_ce(cache.output().view(), &y, Reduction::Mean).unwrap();
        assert!(loss <= prev + 1e-12, "loss rose from {prev} to {loss}");
        prev = loss;
        let (gp, _) = layer.backward(&cache, grad.view()).unwrap();
        opt.step(&mut params, &gp, 1e-3).unwrap();
        layer.set_params(&params).unwrap();
    }
}

fn identity_model(dim: usize) -> Stage2Model {
    Stage2Model {
        encoder: ImageEncoder::from_mlp([dim, 1, 1], Mlp::identity(dim, dim).unwrap()).unwrap(),
        projection: ProjectionHead::from_mlp(Mlp::identity(dim, dim).unwrap()),
        logit_scale: LogitScale::from_temperature(0.5).unwrap(),
    }
}

fn single_phase(v: Vec<f64>) -> PhaseSet {
    PhaseSet::new([(Phase::A, v)].into_iter().collect()).unwrap()
}

#[test]
fn stage2_aligned_initial_loss_is_analytic() {
    let mut g = rng::seeded(8);
    let n = 6;
    let emb = Array2::from_shape_fn((n, 4), |_| g.sample::<f64, _>(StandardNormal));
    let data = PairedDataset::new(
        emb.rows().into_iter().map(|r| single_phase(r.to_vec())).collect(),
        emb.rows().into_iter().map(|r| r.to_owned().insert_axis(Axis(0))).collect(),
    )
    .unwrap();

    // −(1/N) Σ_i [log softmax_row(i)[i] + log softmax_col(i)[i]] with unit rows, u = v
    let unit: Vec<Vec<f64>> = emb.rows().into_iter().map(|r| r.iter().map(|x| x / r.dot(&r).sqrt()).collect()).collect();
    let s = |i: usize, j: usize| unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum::<f64>() / 0.5;
    let analytic = (0..n)
        .map(|i| 2.0 * (log_sum_exp((0..n).map(|j| s(i, j))) - s(i, i)))
        .sum::<f64>()
        / n as f64;

    let model = identity_model(4);
    assert!((clip_eval_loss(&model, &data).unwrap() - analytic).abs() < 1e-12);
    let cfg = Stage2Config { epochs: 1, batch_size: n, grad_clip: None, ..Stage2Config::desk() };
    let out = train_stage2(model, &data, &data, &cfg).unwrap();
    assert!((out.history[0].loss - analytic).abs() < 1e-12);
}

#[test]
fn stage2_shuffled_reports_leave_training_unchanged() {
    let cohort = gen_cohort(96, 4, &SynthConfig::default()).unwrap();
    let text = TextEncoder::new(64, 16, 0.0, &mut rng::seeded(1)).unwrap();
    let phases: Vec<PhaseSet> = cohort.patients.iter().map(|p| p.phases.clone()).collect();
    let shuffled: Vec<Array2<f64>> = cohort.patients.iter().map(|p| precompute_text(&text, &p.tokens).unwrap()).collect();
    let original: Vec<Array2<f64>> =
        cohort.patients.iter().map(|p| precompute_text(&text, &vec![p.tokens[0].clone(); p.tokens.len()]).unwrap()).collect();
    assert_eq!(shuffled, original);

    let init = Stage2Model::new(ImageEncoder::new([32, 1, 1], 16, 16, &mut rng::seeded(2)).unwrap(), 16, 0.07, &mut rng::seeded(3)).unwrap();
    let cfg = Stage2Config { epochs: 5, batch_size: 32, ..Stage2Config::desk() };
    let a = PairedDataset::new(phases.clone(), shuffled).unwrap();
    let b = PairedDataset::new(phases, original).unwrap();
    let ra = train_stage2(init.clone(), &a, &a, &cfg).unwrap();
    let rb = train_stage2(init, &b, &b, &cfg).unwrap();
    assert_eq!(ra.history, rb.history);
    assert_eq!(ra.model.to_checkpoint(0, 0).unwrap(), rb.model.to_checkpoint(0, 0).unwrap());
}

#[test]
fn stage2_rejects_missing_text_and_width_mismatch() {
    let p = single_phase(vec![1.0, 2.0]);
    assert!(matches!(PairedDataset::new(vec![p.clone()], vec![Array2::zeros((0, 2))]), Err(Error::Data(_))));
    let data = PairedDataset::new(vec![p], vec![Array2::ones((1, 3))]).unwrap();
    assert!(retrieval_score(&identity_model(2), &data).is_err());
}

fn ph_split(seed: u64) -> (Array2<f64>, Targets, Array2<f64>, Targets, Vec<f64>) {
    let cohort = gen_cohort(1600, seed, &SynthConfig::default()).unwrap();
    let oracle = oracle_scores(&cohort).unwrap();
    let (tr, va) = cohort.patients.split_at(800);
    let surv = |ps: &[Patient]| Targets::Survival { times: ps.iter().map(|p| p.time).collect(), events: ps.iter().map(|p| p.event).collect() };
    (preferred(tr), surv(tr), preferred(va), surv(va), oracle.linear_predictor[800..].to_vec())
}

#[test]
fn finetune_cox_head_tracks_oracle() {
    let (tx, ty, vx, vy, oracle_lp) = ph_split(0);
    let encoder = ImageEncoder::from_mlp([32, 1, 1], Mlp::identity(32, 32).unwrap()).unwrap();
    let cfg = FinetuneConfig { batch_sizes: vec![100], learning_rates: vec![5e-3, 1e-3], epochs: 40, ..FinetuneConfig::default() };
    let out = finetune_head(&encoder, tx.view(), &ty, vx.view(), &vy, &cfg).unwrap();
    let Targets::Survival { times, events } = &vy else { unreachable!() };
    let oracle_c = harrell_cindex(times, events, &oracle_lp).unwrap();
    let fitted_c = harrell_cindex(times, events, &out.model.scores(vx.view()).unwrap()).unwrap();
    assert_eq!(fitted_c, out.val_metric);
    assert!((fitted_c - oracle_c).abs() <= 0.02, "fitted {fitted_c} oracle {oracle_c}");
}

fn malignancy_split() -> (ImageEncoder, Array2<f64>, Targets, Array2<f64>, Targets) {
    let cohort = gen_cohort(300, 2, &SynthConfig::default()).unwrap();
    let (tr, va) = cohort.patients.split_at(200);
    let cls = |ps: &[Patient]| Targets::Classes { labels: ps.iter().map(|p| usize::from(p.malignant)).collect(), n_classes: 2 };
    let encoder = ImageEncoder::new([32, 1, 1], 16, 8, &mut rng::seeded(0)).unwrap();
    (encoder, preferred(tr), cls(tr), preferred(va), cls(va))
}

#[test]
fn finetune_single_grid_point_matches_grid_entry() {
    let (enc, tx, ty, vx, vy) = malignancy_split();
    let one = FinetuneConfig { batch_sizes: vec![50], learning_rates: vec![1e-2], epochs: 10, ..FinetuneConfig::default() };
    let grid = FinetuneConfig { learning_rates: vec![1e-2, 1e-3], ..one.clone() };
    let a = finetune_head(&enc, tx.view(), &ty, vx.view(), &vy, &one).unwrap();
    let b = finetune_head(&enc, tx.view(), &ty, vx.view(), &vy, &grid).unwrap();
    assert_eq!(a.grid.len(), 1);
    assert_eq!(a.grid[0], b.grid[0]);
    assert_eq!((a.batch_size, a.lr, a.val_metric), (50, 1e-2, a.grid[0].metric));
    assert!(a.val_metric > 0.8);
}

#[test]
fn finetune_guards() {
    let (enc, tx, ty, vx, _) = malignancy_split();
    let cfg = FinetuneConfig { batch_sizes: vec![50], learning_rates: vec![1e-2], epochs: 2, ..FinetuneConfig::default() };
    let single = Targets::Classes { labels: vec![1; vx.nrows()], n_classes: 2 };
    let err = finetune_head(&enc, tx.view(), &ty, vx.view(), &single, &cfg).unwrap_err();
    assert!(matches!(err, Error::Undefined(_) | Error::Data(_)), "{err:?}");
    let empty = FinetuneConfig { learning_rates: vec![], ..cfg };
    assert!(matches!(finetune_head(&enc, tx.view(), &ty, vx.view(), &ty, &empty), Err(Error::InvalidArgument(_))));
}

#[test]
fn phase_sampling_frequencies() {
    let mut inputs = std::collections::BTreeMap::new();
    for p in [Phase::N, Phase::A, Phase::D] {
        inputs.insert(p, vec![0.0; 2]);
    }
    let set = PhaseSet::new(inputs).unwrap();
    let mut g = rng::seeded(12);
    let mut counts = [0usize; 4];
    let draws = 10_000;
    for _ in 0..draws {
        let (p, _) = set.sample(&mut g);
        counts[Phase::ALL.iter().position(|&q| q == p).unwrap()] += 1;
    }
    let expected = draws as f64 / 3.0;
    let chi2: f64 = counts.iter().filter(|&&c| c > 0).map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert_eq!(counts.iter().filter(|&&c| c > 0).count(), 3);
    assert!(counts.iter().filter(|&&c| c > 0).all(|&c| (c as f64 / draws as f64 - 1.0 / 3.0).abs() <= 0.05));
    assert!(chi2 < 13.8, "χ² {chi2}");
}

#[test]
fn training_log_lines() {
    let hist = vec![EpochRecord { epoch: 0, loss: 1.5, lr: 0.1, metric: 0.5 }, EpochRecord { epoch: 1, loss: 1.0, lr: 0.05, metric: 0.75 }];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    write_epoch_log(&path, &hist).unwrap();
    let lines: Vec<serde_json::Value> =
        std::fs::read_to_string(&path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["loss"], 1.0);
    assert_eq!(lines[1]["metric"], 0.75);
}
