use ndarray::Array2;
use oncoclip::clfmetrics::{metric_report, roc_auc, Metric};
use oncoclip::encoders::Checkpoint;
use oncoclip::retrieval::{recall_at_k, similarity_matrix, Direction, RecallReport};
use oncoclip::textmetrics::{text_report, TokenPair, TOKENIZER_VERSION};
use oncoclip::zeroshot::{expand_prompts, max_similarity_scores, zs_stochastic, PromptSpec};
use serde::Deserialize;
use serde_json::json;

use super::train::restore_text;
use super::{with_suffix, Outcome};
use crate::args::{ClfArgs, MetricArg, RetrievalArgs, TextArgs, ZeroshotArgs, ZsStrategy};
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;
use crate::table::{align, parse_bool, read_jsonl, read_matrix, Table};

fn binary_labels(ids: &[String], path: &std::path::Path, column: &str) -> Result<Vec<bool>> {
    let col = Table::read(path)?.by_id(column)?;
    let name = path.display().to_string();
    align(ids, &col, "label")?.into_iter().enumerate().map(|(i, s)| parse_bool(s, &name, i, column)).collect()
}

pub fn zeroshot(a: &ZeroshotArgs) -> Result<Outcome> {
    let mut manifest = RunManifest::new("eval-zeroshot", a, Some(a.seed))?;
    for p in [&a.prompts, &a.embeddings, &a.labels] {
        manifest.input(p)?;
    }
    manifest.input(&with_suffix(&a.text_model, ".bin"))?;
    manifest.metric("roc_auc", "pairs-half-ties-v1");
    manifest.metric("zeroshot", "max-similarity-or-prompt-pair-v1");

    let spec = PromptSpec::load(&a.prompts)?;
    let classes = spec.class_descriptors()?;
    if classes.len() != 2 {
        return Err(CliError::data(format!("binary zero-shot needs two classes, prompt file has {}", classes.len())));
    }
    let mut prompts = expand_prompts(&spec.templates, &classes)?;
    let text = restore_text(&Checkpoint::load(&a.text_model)?)?;
    prompts.embed(|s| text.embed_text(s))?;
    let (ids, u) = read_matrix(&a.embeddings)?;
    let labels = binary_labels(&ids, &a.labels, &a.label_column)?;
    let base = json!({
        "strategy": a.strategy,
        "n": ids.len(),
        "classes": prompts.class_names,
        "prompts_per_class": prompts.prompts.iter().map(Vec::len).collect::<Vec<_>>(),
    });
    let mut result = base;
    match a.strategy {
        ZsStrategy::Max => {
            let scores = max_similarity_scores(u.view(), &prompts)?;
            result["auc"] = json!(roc_auc(&scores, &labels)?);
        }
        ZsStrategy::Stochastic => {
            let st = zs_stochastic(u.view(), &labels, &prompts, a.iters, a.seed)?;
            result["auc"] = json!(st.mean);
            result["interval"] = json!(st.interval);
            result["iterations"] = json!(st.iterations);
            result["seed"] = json!(st.seed);
        }
    }
    Ok(Outcome { result, manifest })
}

pub fn retrieval(a: &RetrievalArgs) -> Result<Outcome> {
    let mut manifest = RunManifest::new("eval-retrieval", a, None)?;
    manifest.input(&a.images)?;
    manifest.input(&a.texts)?;
    manifest.metric("recall_at_k", "rank-lower-index-ties-v1");
    let (ids, u) = read_matrix(&a.images)?;
    let (tids, v) = read_matrix(&a.texts)?;
    // texts reordered to the image order
    let pos: std::collections::HashMap<&str, usize> = tids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    if tids.len() != ids.len() {
        return Err(CliError::data(format!("{} images but {} texts", ids.len(), tids.len())));
    }
    let mut vt = Array2::zeros((ids.len(), v.ncols()));
    for (mut row, id) in vt.rows_mut().into_iter().zip(&ids) {
        let j = *pos.get(id.as_str()).ok_or_else(|| CliError::data(format!("no text embedding for id `{id}`")))?;
        row.assign(&v.row(j));
    }
    let sim = similarity_matrix(u.view(), vt.view())?;
    let mut recalls = Vec::new();
    for direction in [Direction::I2t, Direction::T2i] {
        for &k in &a.k {
            recalls.push(RecallReport { direction, k, recall: recall_at_k(sim.view(), k, direction)? });
        }
    }
    Ok(Outcome { result: json!({ "n": ids.len(), "recalls": recalls }), manifest })
}

pub fn clf(a: &ClfArgs) -> Result<Outcome> {
    let mut manifest = RunManifest::new("eval-clf", a, Some(a.seed))?;
    manifest.input(&a.input)?;
    let metric = match a.metric {
        MetricArg::Auc => Metric::Auc,
        MetricArg::Prauc => Metric::PrAuc,
        MetricArg::Sensitivity => Metric::Sensitivity,
        MetricArg::Specificity => Metric::Specificity,
        MetricArg::F1 => Metric::F1,
    };
    manifest.metric(
        match metric {
            Metric::Auc => "roc_auc",
            Metric::PrAuc => "pr_auc",
            _ => "youden_threshold",
        },
        match metric {
            Metric::Auc => "pairs-half-ties-v1",
            Metric::PrAuc => "average-precision-tie-groups-v1",
            _ => "max-j-lowest-threshold-v1",
        },
    );
    manifest.metric("bootstrap_ci", "percentile-95-redraw-undefined-v1");
    let t = Table::read(&a.input)?;
    let scores = t.floats(&a.score_column)?;
    let labels = t.bools(&a.label_column)?;
    let report = metric_report(metric, &scores, &labels, a.bootstrap, a.seed)?;
    let mut result = serde_json::to_value(&report)?;
    result["n"] = json!(scores.len());
    Ok(Outcome { result, manifest })
}

#[derive(Debug, Deserialize)]
struct TextLine {
    #[allow(dead_code)]
    id: serde_json::Value,
    candidate: String,
    reference: String,
}

pub fn text(a: &TextArgs) -> Result<Outcome> {
    let mut manifest = RunManifest::new("eval-text", a, None)?;
    manifest.input(&a.input)?;
    manifest.metric("tokenizer", TOKENIZER_VERSION);
    manifest.metric("bleu", "corpus-brevity-penalty-v1");
    manifest.metric("meteor_lite", "exact-match-fmean-fragmentation-v1");
    manifest.metric("rouge_l", "lcs-f1-v1");
    let lines: Vec<TextLine> = read_jsonl(&a.input)?;
    let pairs: Vec<TokenPair> = lines.iter().map(|l| TokenPair::from_text(&l.candidate, &l.reference)).collect();
    let report = text_report(&pairs)?;
    Ok(Outcome { result: serde_json::to_value(report)?, manifest })
}
