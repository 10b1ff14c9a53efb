use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use oncoclip::clfmetrics::roc_auc;
use oncoclip::encoders::{Checkpoint, ImageEncoder, Mlp, TextEncoder, ATTRIBUTE_CLASSES};
use oncoclip::rng;
use oncoclip::train::{
    finetune_head, fuse_logits, fusion_ablation, precompute_text, train_stage1, train_stage2, write_epoch_log, AttributeDataset,
    FinetuneConfig, FinetuneModel, PairedDataset, Stage1Config, Stage1Model, Stage2Config, Stage2Model, Targets, TaskKind,
};
use serde_json::json;

use super::{load_config, out_dir, split_point, with_suffix, Outcome};
use crate::args::{FinetuneArgs, FuseArgs, PretrainClipArgs, PretrainImageArgs, TaskArg};
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;
use crate::table::{align, read_inputs, read_jsonl, read_phases, write_matrix, write_rows, Table, TokenLine};

pub(super) fn push_text(ck: &mut Checkpoint, text: &TextEncoder) -> Result<()> {
    let t = text.table();
    ck.push("text.table", vec![t.nrows(), t.ncols()], &t.iter().copied().collect::<Vec<_>>())?;
    ck.set_meta("text.vocab", text.vocab())?;
    Ok(())
}

pub(super) fn restore_text(ck: &Checkpoint) -> Result<TextEncoder> {
    let (shape, data) = ck.tensor("text.table")?;
    let table = Array2::from_shape_vec((shape[0], shape[1]), data.to_vec())
        .map_err(|e| CliError::data(format!("text table: {e}")))?;
    Ok(TextEncoder::from_table(table, 0.0)?.with_vocab(ck.meta("text.vocab")?)?)
}

/// The `encoder` of any checkpoint written by this tool.
fn load_encoder(prefix: &Path) -> Result<ImageEncoder> {
    let ck = Checkpoint::load(prefix)?;
    Ok(ImageEncoder::from_mlp(ck.meta("input_dims")?, ck.restore_mlp("encoder")?)?)
}

fn check_width(encoder: &ImageEncoder, width: usize) -> Result<()> {
    if encoder.input_len() != width {
        return Err(CliError::data(format!("encoder expects {} inputs, data has {width}", encoder.input_len())));
    }
    Ok(())
}

fn rows(x: &Array2<f64>, range: std::ops::Range<usize>) -> Array2<f64> {
    x.slice(ndarray::s![range, ..]).to_owned()
}

fn save_model(ck: &mut Checkpoint, manifest: &RunManifest, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    ck.set_meta("config_hash", &manifest.config_hash)?;
    let prefix = dir.join("model");
    ck.save(&prefix)?;
    Ok(vec![with_suffix(&prefix, ".json"), with_suffix(&prefix, ".bin")])
}

pub fn pretrain_image(a: &PretrainImageArgs) -> Result<Outcome> {
    let mut cfg = load_config(Stage1Config::desk(), a.split.config.as_deref())?;
    cfg.seed = a.split.seed;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let mut manifest = RunManifest::new("pretrain-image", &json!({ "args": a, "train": cfg }), Some(cfg.seed))?;
    manifest.input(&a.inputs)?;
    manifest.input(&a.attributes)?;
    manifest.metric("attribute_macro_auc", "ovr-macro-v1");

    let (ids, x) = read_inputs(&a.inputs)?;
    let table = Table::read(&a.attributes)?;
    let cols = table.value_columns(&["id"]);
    let id_col = table.column_index("id")?;
    let by_id: HashMap<&str, &Vec<String>> = table.rows.iter().map(|r| (r[id_col].as_str(), r)).collect();
    let col_idx = cols.iter().map(|c| table.column_index(c)).collect::<Result<Vec<_>>>()?;
    let mut labels = Vec::with_capacity(ids.len());
    for id in &ids {
        let row = by_id.get(id.as_str()).ok_or_else(|| CliError::data(format!("no attributes for id `{id}`")))?;
        let parsed = col_idx
            .iter()
            .map(|&c| match row[c].as_str() {
                "" => Ok(None),
                s => s.parse::<usize>().map(Some).map_err(|_| CliError::data(format!("attribute `{s}` of `{id}` is not a class index"))),
            })
            .collect::<Result<Vec<_>>>()?;
        labels.push(parsed);
    }
    let classes: Vec<usize> = if cols.len() == ATTRIBUTE_CLASSES.len() {
        ATTRIBUTE_CLASSES.to_vec()
    } else {
        (0..cols.len()).map(|k| labels.iter().filter_map(|l| l[k]).max().map_or(2, |m| (m + 1).max(2))).collect()
    };

    let cut = split_point(ids.len(), a.split.val_fraction)?;
    let train = AttributeDataset::new(rows(&x, 0..cut), labels[..cut].to_vec())?;
    let val = AttributeDataset::new(rows(&x, cut..ids.len()), labels[cut..].to_vec())?;
    let model = Stage1Model::new(x.ncols(), a.hidden, a.features, &classes, &mut rng::derive(cfg.seed, 1))?;
    let out = train_stage1(model, &train, &val, &cfg)?;

    let dir = out_dir(&a.split.out)?;
    let mut ck = out.model.to_checkpoint(cfg.seed, out.history.len() as u64)?;
    let mut files = save_model(&mut ck, &manifest, &dir)?;
    let log = dir.join("log.jsonl");
    write_epoch_log(&log, &out.history)?;
    files.push(log);
    manifest.finish(&dir, &files, &dir.join("manifest.json"))?;
    let result = json!({
        "n_train": cut,
        "n_val": ids.len() - cut,
        "epochs": out.history.len(),
        "best_epoch": out.best_epoch,
        "best_val_macro_auc": out.best_metric,
        "final_loss": out.history.last().map(|h| h.loss),
        "model": dir.join("model"),
    });
    Ok(Outcome { result, manifest })
}

pub fn pretrain_clip(a: &PretrainClipArgs) -> Result<Outcome> {
    let mut cfg = load_config(Stage2Config::desk(), a.split.config.as_deref())?;
    cfg.seed = a.split.seed;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let mut manifest = RunManifest::new("pretrain-clip", &json!({ "args": a, "train": cfg }), Some(cfg.seed))?;
    manifest.input(&a.phases)?;
    manifest.input(&a.tokens)?;
    manifest.input(&a.vocab)?;
    if let Some(init) = &a.init {
        manifest.input(&with_suffix(init, ".bin"))?;
    }
    manifest.metric("mean_recall_at_1", "rank-lower-index-ties-v1");

    let sets = read_phases(&a.phases)?;
    let tokens: HashMap<String, Vec<Vec<usize>>> =
        read_jsonl::<TokenLine>(&a.tokens)?.into_iter().map(|t| (t.id, t.versions)).collect();
    let vocab: Vec<String> = serde_json::from_slice(&std::fs::read(&a.vocab)?)?;
    let mut g = rng::derive(cfg.seed, 100);
    let text = TextEncoder::new(vocab.len(), a.embed_dim, 0.0, &mut g)?.with_vocab(vocab)?;
    let width = sets[0].1.input_len();
    let encoder = match &a.init {
        Some(p) => load_encoder(p)?,
        None => ImageEncoder::new([width, 1, 1], a.hidden, a.features, &mut g)?,
    };
    check_width(&encoder, width)?;
    let model = Stage2Model::new(encoder, a.embed_dim, cfg.init_temperature, &mut g)?;

    let texts = sets
        .iter()
        .map(|(id, _)| {
            let v = tokens.get(id).ok_or_else(|| CliError::data(format!("no tokens for id `{id}`")))?;
            Ok(precompute_text(&text, v)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let cut = split_point(sets.len(), a.split.val_fraction)?;
    let phases: Vec<_> = sets.iter().map(|(_, s)| s.clone()).collect();
    let train = PairedDataset::new(phases[..cut].to_vec(), texts[..cut].to_vec())?;
    let val = PairedDataset::new(phases[cut..].to_vec(), texts[cut..].to_vec())?;
    let out = train_stage2(model, &train, &val, &cfg)?;

    let dir = out_dir(&a.split.out)?;
    let mut ck = out.model.to_checkpoint(cfg.seed, out.history.len() as u64)?;
    push_text(&mut ck, &text)?;
    let mut files = save_model(&mut ck, &manifest, &dir)?;
    let log = dir.join("log.jsonl");
    write_epoch_log(&log, &out.history)?;
    files.push(log);

    let val_ids: Vec<String> = sets[cut..].iter().map(|(id, _)| id.clone()).collect();
    let mut x = Array2::zeros((val_ids.len(), width));
    for (mut row, (_, s)) in x.rows_mut().into_iter().zip(&sets[cut..]) {
        row.assign(&ArrayView1::from(s.preferred().1));
    }
    let img_path = dir.join("image_embeddings.csv");
    write_matrix(&img_path, &val_ids, "d", out.model.embed(x.view())?.view())?;
    let mut t = Array2::zeros((val_ids.len(), a.embed_dim));
    for (mut row, tx) in t.rows_mut().into_iter().zip(&texts[cut..]) {
        row.assign(&tx.row(0));
    }
    let txt_path = dir.join("text_embeddings.csv");
    write_matrix(&txt_path, &val_ids, "d", t.view())?;
    files.extend([img_path, txt_path]);
    manifest.finish(&dir, &files, &dir.join("manifest.json"))?;

    let blocks: Vec<f64> = out.history.chunks(10).map(|c| c.iter().map(|h| h.loss).sum::<f64>() / c.len() as f64).collect();
    let result = json!({
        "n_train": cut,
        "n_val": val_ids.len(),
        "epochs": out.history.len(),
        "best_epoch": out.best_epoch,
        "best_val_mean_recall_at_1": out.best_metric,
        "temperature": out.model.logit_scale.temperature(),
        "loss_10_epoch_means": blocks,
        "model": dir.join("model"),
    });
    Ok(Outcome { result, manifest })
}

pub fn finetune(a: &FinetuneArgs) -> Result<Outcome> {
    let mut cfg = load_config(FinetuneConfig::default(), a.split.config.as_deref())?;
    cfg.seed = a.split.seed;
    if let Some(b) = &a.batch_sizes {
        cfg.batch_sizes = b.clone();
    }
    if let Some(l) = &a.lrs {
        cfg.learning_rates = l.clone();
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.train_backbone |= a.train_backbone;
    let mut manifest = RunManifest::new("finetune", &json!({ "args": a, "train": cfg }), Some(cfg.seed))?;
    manifest.input(&a.inputs)?;
    manifest.input(&a.targets)?;
    if let Some(p) = &a.encoder {
        manifest.input(&with_suffix(p, ".bin"))?;
    }

    let (ids, x) = read_inputs(&a.inputs)?;
    let encoder = match &a.encoder {
        Some(p) => load_encoder(p)?,
        None => ImageEncoder::from_mlp([x.ncols(), 1, 1], Mlp::identity(x.ncols(), x.ncols())?)?,
    };
    check_width(&encoder, x.ncols())?;
    let table = Table::read(&a.targets)?;
    let targets_for = |range: std::ops::Range<usize>| -> Result<Targets> {
        let ids = &ids[range];
        match a.task {
            TaskArg::Classification => {
                let col = table.by_id(&a.label_column)?;
                let labels = align(ids, &col, "label")?
                    .into_iter()
                    .map(|s| s.parse::<usize>().map_err(|_| CliError::data(format!("label `{s}` is not a class index"))))
                    .collect::<Result<Vec<_>>>()?;
                // class count from the whole table, not one split
                let n_classes = col.values().filter_map(|s| s.parse::<usize>().ok()).max().map_or(2, |m| (m + 1).max(2));
                Ok(Targets::Classes { labels, n_classes })
            }
            TaskArg::Cox => {
                let (tcol, ecol) = (table.by_id("time")?, table.by_id("event")?);
                let times = align(ids, &tcol, "time")?
                    .into_iter()
                    .map(|s| s.parse::<f64>().map_err(|_| CliError::data(format!("time `{s}` is not a number"))))
                    .collect::<Result<Vec<_>>>()?;
                let events = align(ids, &ecol, "event")?
                    .into_iter()
                    .enumerate()
                    .map(|(i, s)| crate::table::parse_bool(s, &table.path, i, "event"))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Targets::Survival { times, events })
            }
        }
    };
    let cut = split_point(ids.len(), a.split.val_fraction)?;
    let (train_y, val_y) = (targets_for(0..cut)?, targets_for(cut..ids.len())?);
    let out = finetune_head(&encoder, rows(&x, 0..cut).view(), &train_y, rows(&x, cut..ids.len()).view(), &val_y, &cfg)?;
    manifest.metric(
        match out.model.task {
            TaskKind::Classification => "macro_auc",
            TaskKind::Cox => "harrell_cindex",
        },
        "pairs-half-ties-v1",
    );

    let dir = out_dir(&a.split.out)?;
    let mut ck = out.model.to_checkpoint(cfg.seed, 0)?;
    let mut files = save_model(&mut ck, &manifest, &dir)?;
    let scores = out.model.scores(x.view())?;
    let score_path = dir.join("scores.csv");
    write_rows(&score_path, &["id", "score"], ids.iter().zip(&scores).map(|(id, s)| vec![id.clone(), format!("{s:?}")]))?;
    files.push(score_path);
    manifest.finish(&dir, &files, &dir.join("manifest.json"))?;
    let result = json!({
        "task": out.model.task,
        "n_train": cut,
        "n_val": ids.len() - cut,
        "batch_size": out.batch_size,
        "lr": out.lr,
        "val_metric": out.val_metric,
        "grid": out.grid,
        "model": dir.join("model"),
    });
    Ok(Outcome { result, manifest })
}

pub fn fuse(a: &FuseArgs) -> Result<Outcome> {
    let mut manifest = RunManifest::new("fuse", a, None)?;
    manifest.input(&with_suffix(&a.model, ".bin"))?;
    manifest.input(&a.phases)?;
    manifest.metric("fusion", "mean-logits-v1");
    let model = FinetuneModel::from_checkpoint(&Checkpoint::load(&a.model)?)?;
    let sets = read_phases(&a.phases)?;
    check_width(&model.encoder, sets[0].1.input_len())?;

    let mut rows_out = Vec::with_capacity(sets.len());
    let mut scores = Vec::with_capacity(sets.len());
    for (id, set) in &sets {
        let chosen = set.first(set.len());
        let mut x = Array2::zeros((chosen.len(), set.input_len()));
        for (mut row, (_, v)) in x.rows_mut().into_iter().zip(&chosen) {
            row.assign(&ArrayView1::from(*v));
        }
        let logits = model.logits(x.view())?;
        let fused = fuse_logits(&logits.rows().into_iter().collect::<Vec<_>>())?;
        let score = match model.task {
            TaskKind::Cox => fused[0],
            TaskKind::Classification if fused.len() == 2 => fused[1] - fused[0],
            TaskKind::Classification => f64::NAN,
        };
        let mut r = vec![id.clone(), set.len().to_string()];
        r.extend(fused.iter().map(|v| format!("{v:?}")));
        r.push(format!("{score:?}"));
        rows_out.push(r);
        scores.push(score);
    }
    let width = rows_out[0].len() - 3;
    let mut header: Vec<String> = vec!["id".into(), "n_phases".into()];
    header.extend((0..width).map(|j| format!("l{j}")));
    header.push("score".into());
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_rows(&a.out, &header_refs, rows_out)?;

    let mut result = json!({ "n": sets.len(), "output": a.out });
    if let Some(path) = &a.labels {
        manifest.input(path)?;
        manifest.metric("roc_auc", "pairs-half-ties-v1");
        let ids: Vec<String> = sets.iter().map(|(id, _)| id.clone()).collect();
        let col = Table::read(path)?.by_id(&a.label_column)?;
        let labels = align(&ids, &col, "label")?
            .into_iter()
            .enumerate()
            .map(|(i, s)| crate::table::parse_bool(s, &path.display().to_string(), i, &a.label_column))
            .collect::<Result<Vec<_>>>()?;
        let fewest = sets.iter().map(|(_, s)| s.len()).min().unwrap_or(1);
        let max_phases = a.max_phases.unwrap_or(fewest);
        let sets: Vec<_> = sets.into_iter().map(|(_, s)| s).collect();
        let ablation = fusion_ablation(&model, &sets, &labels, max_phases)?;
        result["fused_auc"] = json!(roc_auc(&scores, &labels)?);
        result["ablation"] = serde_json::to_value(ablation)?;
    }
    let parent = a.out.parent().unwrap_or(Path::new("")).to_path_buf();
    let manifest_path = with_suffix(&a.out, ".manifest.json");
    manifest.finish(&parent, std::slice::from_ref(&a.out), &manifest_path)?;
    Ok(Outcome { result, manifest })
}
