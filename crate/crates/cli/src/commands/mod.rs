mod data;
mod eval;
mod survival;
mod train;

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::args::Command;
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;

/// A finished command: its report body and run manifest.
pub struct Outcome {
    pub result: Value,
    pub manifest: RunManifest,
}

pub fn run(command: &Command) -> Result<Outcome> {
    match command {
        Command::Prep(a) => data::prep(a),
        Command::Synth(a) => data::synth(a),
        Command::PretrainImage(a) => train::pretrain_image(a),
        Command::PretrainClip(a) => train::pretrain_clip(a),
        Command::Finetune(a) => train::finetune(a),
        Command::Fuse(a) => train::fuse(a),
        Command::EvalZeroshot(a) => eval::zeroshot(a),
        Command::EvalRetrieval(a) => eval::retrieval(a),
        Command::EvalClf(a) => eval::clf(a),
        Command::EvalText(a) => eval::text(a),
        Command::EvalSurvival(a) => survival::run(a),
    }
}

/// Overlays a JSON config file on `defaults`; unknown keys are rejected.
pub fn load_config<T: Serialize + DeserializeOwned>(defaults: T, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(defaults);
    };
    let mut base = serde_json::to_value(&defaults)?;
    let patch: Value = serde_json::from_slice(&std::fs::read(path)?)?;
    merge(&mut base, patch, "")?;
    serde_json::from_value(base).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn merge(base: &mut Value, patch: Value, at: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let key = format!("{at}{k}");
                let slot = b.get_mut(&k).ok_or_else(|| CliError::data(format!("unknown config key `{key}`")))?;
                if slot.is_object() && v.is_object() {
                    merge(slot, v, &format!("{key}."))?;
                } else {
                    *slot = v;
                }
            }
            Ok(())
        }
        _ => Err(CliError::data("config file must hold a JSON object")),
    }
}

/// Rows `[0, n_train)` train, the rest validate.
pub fn split_point(n: usize, val_fraction: f64) -> Result<usize> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(CliError::Usage(format!("--val-fraction must lie in (0, 1), got {val_fraction}")));
    }
    let n_val = (n as f64 * val_fraction).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(CliError::data(format!("cannot hold out {val_fraction} of {n} rows")));
    }
    Ok(n - n_val)
}

pub fn out_dir(path: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(path)?;
    Ok(path.to_path_buf())
}

pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, serde::Deserialize)]
    struct Inner {
        lr: f64,
        wd: f64,
    }

    #[derive(Debug, PartialEq, Serialize, serde::Deserialize)]
    struct Cfg {
        epochs: usize,
        opt: Inner,
    }

    #[test]
    fn config_overlay() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let defaults = || Cfg { epochs: 5, opt: Inner { lr: 0.1, wd: 0.01 } };
        std::fs::write(&p, r#"{"opt": {"lr": 0.5}}"#).unwrap();
        assert_eq!(load_config(defaults(), Some(&p)).unwrap(), Cfg { epochs: 5, opt: Inner { lr: 0.5, wd: 0.01 } });
        assert_eq!(load_config(defaults(), None).unwrap(), defaults());
        std::fs::write(&p, r#"{"opt": {"momentum": 0.5}}"#).unwrap();
        assert!(load_config(defaults(), Some(&p)).unwrap_err().to_string().contains("opt.momentum"));
        std::fs::write(&p, "[1]").unwrap();
        assert!(load_config(defaults(), Some(&p)).is_err());
    }

    #[test]
    fn splits() {
        assert_eq!(split_point(640, 0.2).unwrap(), 512);
        assert_eq!(split_point(10, 0.25).unwrap(), 7);
        assert!(split_point(1, 0.5).is_err());
        assert!(matches!(split_point(10, 1.0), Err(CliError::Usage(_))));
    }
}
