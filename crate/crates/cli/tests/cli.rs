use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use oncoclip::volume::kvol::{save_mask, save_volume, Dtype};
use oncoclip::volume::{Geometry, Mask3D, Volume3D};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_oncoclip"));
    c.env_remove("ONCOCLIP_THREADS");
    c
}

fn validator() -> &'static jsonschema::Validator {
    static V: OnceLock<jsonschema::Validator> = OnceLock::new();
    V.get_or_init(|| {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schema/report.schema.json");
        let schema: Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
        jsonschema::validator_for(&schema).unwrap()
    })
}

fn report(out: &Output) -> Value {
    let v: Value = serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout)));
    let errors: Vec<String> = validator().iter_errors(&v).map(|e| format!("{e} at {}", e.instance_path)).collect();
    assert!(errors.is_empty(), "report violates schema: {errors:?}\n{v:#}");
    v
}

/// Runs and expects success; returns the `result` object.
fn ok(args: &[&str]) -> Value {
    let out = bin().args(args).output().unwrap();
    assert!(out.status.success(), "{args:?} failed: {}\n{}", String::from_utf8_lossy(&out.stderr), String::from_utf8_lossy(&out.stdout));
    let v = report(&out);
    assert_eq!(v["command"], args[0]);
    v["result"].clone()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, n: usize, extra: &[&str]) -> PathBuf {
    let out = dir.join("cohort");
    let n = n.to_string();
    let mut args = vec!["synth", "--n", &n, "--seed", "0", "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

#[test]
fn synth_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(tmp.path(), 100, &[]);
    let first: Vec<(String, Vec<u8>)> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    assert_eq!(first.len(), 10);
    synth(tmp.path(), 100, &[]);
    for (name, bytes) in &first {
        assert_eq!(&std::fs::read(a.join(name)).unwrap(), bytes, "{name} changed between runs");
    }
    let other = tmp.path().join("elsewhere");
    ok(&["synth", "--n", "100", "--seed", "0", "--out", s(&other)]);
    for (name, bytes) in first.iter().filter(|(n, _)| n != "manifest.json") {
        assert_eq!(&std::fs::read(other.join(name)).unwrap(), bytes, "{name} depends on the output path");
    }
}

#[test]
fn manifest_digests_match_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = synth(tmp.path(), 30, &["--phases", "2"]);
    let m: Value = serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "synth");
    assert_eq!(m["seed"], 0);
    let outputs = m["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 9);
    for o in outputs {
        use sha2::Digest;
        let bytes = std::fs::read(dir.join(o["path"].as_str().unwrap())).unwrap();
        let hex: String = sha2::Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(o["sha256"], hex.as_str());
    }
}

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &yi) in labels.iter().enumerate() {
        for (j, &yj) in labels.iter().enumerate() {
            if yi && !yj {
                den += 1.0;
                num += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
            }
        }
    }
    num / den
}

#[test]
fn eval_clf_point_and_interval() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("cohort.csv");
    let rows: Vec<(f64, bool)> = (0..60).map(|i| (((i * 37) % 23) as f64 / 23.0 + if i % 3 == 0 { 0.4 } else { 0.0 }, i % 3 == 0)).collect();
    let mut text = String::from("id,score,label\n");
    for (i, (sc, y)) in rows.iter().enumerate() {
        text.push_str(&format!("p{i},{sc},{}\n", u8::from(*y)));
    }
    std::fs::write(&path, text).unwrap();
    let args = ["eval-clf", "--in", s(&path), "--metric", "auc", "--bootstrap", "1000", "--seed", "0"];
    let r = ok(&args);
    let (sc, y): (Vec<f64>, Vec<bool>) = rows.into_iter().unzip();
    assert_eq!(r["point"].as_f64().unwrap(), brute_auc(&sc, &y));
    let ci: Vec<f64> = r["ci"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(ci[0] <= r["point"].as_f64().unwrap() && r["point"].as_f64().unwrap() <= ci[1]);
    assert_eq!(r["n_resamples"], 1000);

    let single = bin().args(args).output().unwrap().stdout;
    let many = bin().args(args).env("ONCOCLIP_THREADS", "4").output().unwrap().stdout;
    let flag = bin().args(args).args(["--threads", "3"]).output().unwrap().stdout;
    assert_eq!(single, many);
    assert_eq!(single, flag);
}

#[test]
fn identical_groups_give_unit_logrank_p() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("surv.csv");
    let mut text = String::from("id,time,event,score,group\n");
    for g in ["a", "b"] {
        for i in 0..12 {
            text.push_str(&format!("{g}{i},{},{},{},{g}\n", 1.0 + i as f64, u8::from(i % 4 != 0), i as f64 * 0.1));
        }
    }
    std::fs::write(&path, text).unwrap();
    let r = ok(&["eval-survival", "--in", s(&path), "--analysis", "km", "--group", "group"]);
    assert_eq!(r["logrank"]["p"].as_f64().unwrap(), 1.0);
    assert_eq!(r["logrank"]["chi2"].as_f64().unwrap(), 0.0);
    assert_eq!(r["curves"].as_array().unwrap().len(), 2);
    assert_eq!(r["curves"][0]["survival"], r["curves"][1]["survival"]);
    let lr = ok(&["eval-survival", "--in", s(&path), "--analysis", "logrank", "--group", "group"]);
    assert_eq!(lr["logrank"]["p"].as_f64().unwrap(), 1.0);
}

#[test]
fn survival_analyses_on_synthetic_cohort() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = synth(tmp.path(), 400, &[]);
    let surv = dir.join("survival.csv");
    let cox = ok(&["eval-survival", "--in", s(&surv), "--analysis", "cox", "--covariates", "z1"]);
    let beta = cox["coefficients"][0]["beta"].as_f64().unwrap();
    assert!((0.7..1.3).contains(&beta), "beta {beta}");
    let c = ok(&["eval-survival", "--in", s(&surv), "--analysis", "cindex"]);
    assert!(c["harrell"].as_f64().unwrap() > 0.6);
    let td = ok(&["eval-survival", "--in", s(&surv), "--analysis", "td", "--times", "5,10"]);
    assert_eq!(td["auc"].as_array().unwrap().len(), 2);
    let st = ok(&["eval-survival", "--in", s(&surv), "--analysis", "stratify"]);
    assert_eq!(st["n_high"], 200);
    assert!(st["logrank"]["p"].as_f64().unwrap() < 0.01);
}

#[test]
fn text_and_retrieval_examples() {
    let tmp = tempfile::tempdir().unwrap();
    let pairs = tmp.path().join("pairs.jsonl");
    std::fs::write(&pairs, "{\"id\":1,\"candidate\":\"a b c\",\"reference\":\"a b d\"}\n").unwrap();
    let t = ok(&["eval-text", "--in", s(&pairs)]);
    assert!((t["bleu_1"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-9);
    assert_eq!(t["n_pairs"], 1);

    let img = tmp.path().join("img.csv");
    let txt = tmp.path().join("txt.csv");
    std::fs::write(&img, "id,d0,d1,d2\nx,1,0,0\ny,0,1,0\nz,0,0,1\n").unwrap();
    // same vectors, rows shuffled: matching is by id
    std::fs::write(&txt, "id,d0,d1,d2\nz,0,0,1\nx,1,0,0\ny,0,1,0\n").unwrap();
    let r = ok(&["eval-retrieval", "--images", s(&img), "--texts", s(&txt), "--k", "1,2"]);
    let recalls = r["recalls"].as_array().unwrap();
    assert_eq!(recalls.len(), 4);
    assert!(recalls.iter().all(|x| x["recall"] == 1.0));
}

#[test]
fn prep_emits_model_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let geom = Geometry::new([60, 50, 20], [0.8, 0.8, 3.0], [-20.0, 10.0, 0.0]).unwrap();
    let vol = Volume3D::from_fn(geom, |x, y, z| (x as f32 * 10.0 - 200.0) + y as f32 + z as f32).unwrap();
    let mut mask = Mask3D::empty(geom).unwrap();
    for x in 20..30 {
        for y in 20..28 {
            mask.set(x, y, 10, 2);
        }
    }
    let (vp, mp, out) = (tmp.path().join("ct.kvol"), tmp.path().join("m.kvol"), tmp.path().join("roi.kvol"));
    save_volume(&vp, &vol, Dtype::I16).unwrap();
    save_mask(&mp, &mask).unwrap();
    let args = ["prep", "--in", s(&vp), "--mask", s(&mp), "--strategy", "largest_axial_lesion", "--out", s(&out)];
    let r = ok(&args);
    assert_eq!(r["dims"], serde_json::json!([140, 140, 32]));
    assert_eq!(r["spacing_mm"], serde_json::json!([1.0, 1.0, 5.0]));
    let v = oncoclip::volume::kvol::load_volume(&out).unwrap();
    assert!(v.min_value() >= 0.0 && v.max_value() <= 1.0);
    let bytes = std::fs::read(&out).unwrap();
    ok(&args);
    assert_eq!(std::fs::read(&out).unwrap(), bytes);
    assert!(tmp.path().join("roi.kvol.manifest.json").exists());

    let mut cropped = args.to_vec();
    cropped.push("--center-crop");
    assert_eq!(ok(&cropped)["dims"], serde_json::json!([128, 128, 32]));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = bin().args(["eval-clf", "--bogus", "1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("valid flags:"), "{err}");
    for flag in ["--in", "--metric", "--bootstrap", "--seed"] {
        assert!(err.contains(flag), "{flag} missing from {err}");
    }
    assert_eq!(report(&out)["error"]["kind"], "usage");

    let out = bin().args(["no-such-command"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["eval-clf"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["synth", "--n", "5", "--out"]).arg(tempfile::tempdir().unwrap().path()).env("ONCOCLIP_THREADS", "zero").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_are_structured() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.csv");
    let out = bin().args(["eval-clf", "--in", s(&missing)]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let v = report(&out);
    assert_eq!(v["error"]["kind"], "io");

    let single = tmp.path().join("single.csv");
    std::fs::write(&single, "id,score,label\na,0.1,1\nb,0.2,1\n").unwrap();
    let out = bin().args(["eval-clf", "--in", s(&single)]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(report(&out)["error"]["kind"], "invalid_argument");

    let bad = tmp.path().join("bad.csv");
    std::fs::write(&bad, "id,score,label\na,zz,1\nb,0.2,0\n").unwrap();
    let out = bin().args(["eval-clf", "--in", s(&bad)]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(report(&out)["error"]["kind"], "data");
}

#[test]
fn training_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = synth(tmp.path(), 200, &["--phases", "3"]);
    let p = |name: &str| dir.join(name);
    let pre = tmp.path().join("pre");
    let r = ok(&[
        "pretrain-image", "--inputs", s(&p("phases.csv")), "--attributes", s(&p("attributes.csv")), "--epochs", "5", "--out", s(&pre),
    ]);
    assert_eq!(r["epochs"], 5);
    assert_eq!(r["n_val"], 40);

    let cfg = tmp.path().join("clip.json");
    std::fs::write(&cfg, r#"{"epochs": 4, "backbone": {"lr": 1e-4}}"#).unwrap();
    let clip = tmp.path().join("clip");
    let clip_args = [
        "pretrain-clip", "--phases", s(&p("phases.csv")), "--tokens", s(&p("tokens.jsonl")), "--vocab", s(&p("vocab.json")), "--init",
        s(&pre.join("model")), "--config", s(&cfg), "--embed-dim", "32", "--out", s(&clip),
    ]
    .map(str::to_owned);
    let clip_args: Vec<&str> = clip_args.iter().map(String::as_str).collect();
    let out = bin().args(&clip_args).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let v = report(&out);
    assert_eq!(v["result"]["epochs"], 4);
    assert_eq!(v["manifest"]["config"]["train"]["backbone"]["lr"], 1e-4);
    assert_eq!(v["manifest"]["config"]["train"]["backbone"]["weight_decay"], 1e-2);
    let model_bytes = std::fs::read(clip.join("model.bin")).unwrap();
    ok(&clip_args);
    assert_eq!(std::fs::read(clip.join("model.bin")).unwrap(), model_bytes);

    for strategy in ["max", "stochastic"] {
        let z = ok(&[
            "eval-zeroshot", "--prompts", s(&p("prompts.json")), "--embeddings", s(&clip.join("image_embeddings.csv")), "--labels",
            s(&p("labels.csv")), "--label-column", "malignant", "--text-model", s(&clip.join("model")), "--strategy", strategy, "--iters", "50",
        ]);
        assert_eq!(z["n"], 40);
        assert_eq!(z["prompts_per_class"], serde_json::json!([100, 100]));
    }
    ok(&["eval-retrieval", "--images", s(&clip.join("image_embeddings.csv")), "--texts", s(&clip.join("text_embeddings.csv"))]);

    let ft = tmp.path().join("ft");
    let r = ok(&[
        "finetune", "--inputs", s(&p("phases.csv")), "--targets", s(&p("labels.csv")), "--label-column", "malignant", "--encoder",
        s(&clip.join("model")), "--batch-sizes", "20,40", "--lrs", "1e-2", "--epochs", "10", "--out", s(&ft),
    ]);
    assert_eq!(r["grid"].as_array().unwrap().len(), 2);
    assert!(r["val_metric"].as_f64().unwrap() > 0.7);
    let fused = tmp.path().join("fused.csv");
    let r = ok(&[
        "fuse", "--model", s(&ft.join("model")), "--phases", s(&p("phases.csv")), "--out", s(&fused), "--labels", s(&p("labels.csv")),
        "--label-column", "malignant",
    ]);
    let settings = r["ablation"]["settings"].as_array().unwrap();
    assert_eq!(settings.iter().map(|x| x["phases"].as_u64().unwrap()).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert_eq!(r["ablation"]["permutation_invariant"], true);
    assert_eq!(std::fs::read_to_string(&fused).unwrap().lines().count(), 201);

    let cox = ok(&[
        "finetune", "--inputs", s(&p("features.csv")), "--targets", s(&p("survival.csv")), "--task", "cox", "--batch-sizes", "40", "--lrs",
        "1e-2", "--epochs", "20", "--out", s(&tmp.path().join("cox")),
    ]);
    assert_eq!(cox["task"], "cox");
}

#[test]
fn config_rejects_unknown_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = synth(tmp.path(), 40, &[]);
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"epochz": 3}"#).unwrap();
    let out = bin()
        .args(["pretrain-image", "--inputs", s(&dir.join("features.csv")), "--attributes", s(&dir.join("attributes.csv"))])
        .args(["--config", s(&cfg), "--out", s(&tmp.path().join("o"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let v = report(&out);
    assert!(v["error"]["message"].as_str().unwrap().contains("epochz"));
}
