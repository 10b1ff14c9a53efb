//! Checkpoints: a JSON manifest (`<prefix>.json`) describing named tensors
//! plus a raw little-endian f64 blob (`<prefix>.bin`) holding them back to back.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Activation, Mlp};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "oncoclip-ckpt-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f64 elements.
    pub offset: usize,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub seed: u64,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    blob: Vec<f64>,
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

impl Checkpoint {
    pub fn new(seed: u64, step: u64) -> Self {
        Self {
            manifest: CheckpointManifest {
                format: CHECKPOINT_FORMAT.into(),
                seed,
                step,
                tensors: Vec::new(),
                meta: BTreeMap::new(),
            },
            blob: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[f64]) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::invalid(format!("tensor `{name}` shape {shape:?} does not match {} values", data.len())));
        }
        if self.manifest.tensors.iter().any(|t| t.name == name) {
            return Err(Error::invalid(format!("duplicate tensor `{name}`")));
        }
        self.manifest.tensors.push(TensorEntry { name, shape, offset: self.blob.len() });
        self.blob.extend_from_slice(data);
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let t = self
            .manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor `{name}`")))?;
        Ok((&t.shape, &self.blob[t.offset..t.offset + t.len()]))
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Serialize) -> Result<()> {
        self.manifest.meta.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .manifest
            .meta
            .get(key)
            .ok_or_else(|| Error::Format(format!("checkpoint has no meta `{key}`")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn push_mlp(&mut self, name: &str, net: &Mlp) -> Result<()> {
        for (slice_name, range) in net.param_slices() {
            let layer: usize = slice_name[5..slice_name.find('.').unwrap()].parse().unwrap();
            let spec = net.layers()[layer];
            let shape = if slice_name.ends_with("weight") { vec![spec.output, spec.input] } else { vec![spec.output] };
            self.push(format!("{name}.{slice_name}"), shape, &net.params()[range])?;
        }
        self.set_meta(format!("{name}.layers"), net.layers().len())?;
        self.set_meta(format!("{name}.activations"), net.activations())?;
        Ok(())
    }

    pub fn restore_mlp(&self, name: &str) -> Result<Mlp> {
        let n: usize = self.meta(&format!("{name}.layers"))?;
        let (hidden, output): (Activation, Activation) = self.meta(&format!("{name}.activations"))?;
        let mut widths = Vec::with_capacity(n + 1);
        let mut params = Vec::new();
        for l in 0..n {
            let (shape, w) = self.tensor(&format!("{name}.layer{l}.weight"))?;
            if shape.len() != 2 {
                return Err(Error::Format(format!("weight of layer {l} is not 2-D")));
            }
            if l == 0 {
                widths.push(shape[1]);
            }
            widths.push(shape[0]);
            params.extend_from_slice(w);
            params.extend_from_slice(self.tensor(&format!("{name}.layer{l}.bias"))?.1);
        }
        let mut net = Mlp::zeros(&widths, hidden, output)?;
        net.set_params(&params)?;
        Ok(net)
    }

    pub fn save(&self, prefix: impl AsRef<Path>) -> Result<()> {
        let prefix = prefix.as_ref();
        std::fs::write(with_ext(prefix, "json"), serde_json::to_vec_pretty(&self.manifest)?)?;
        let bytes: Vec<u8> = self.blob.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(with_ext(prefix, "bin"), bytes)?;
        Ok(())
    }

    pub fn load(prefix: impl AsRef<Path>) -> Result<Self> {
        let prefix = prefix.as_ref();
        let manifest: CheckpointManifest = serde_json::from_slice(&std::fs::read(with_ext(prefix, "json"))?)?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unknown checkpoint format `{}`", manifest.format)));
        }
        let bytes = std::fs::read(with_ext(prefix, "bin"))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Format("checkpoint blob is not a whole number of f64 values".into()));
        }
        let blob: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let needed = manifest.tensors.iter().map(|t| t.offset + t.len()).max().unwrap_or(0);
        if needed != blob.len() {
            return Err(Error::Format(format!("blob holds {} values, manifest expects {needed}", blob.len())));
        }
        Ok(Self { manifest, blob })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn round_trip() {
        let net = Mlp::init(&[4, 3, 2], Activation::Tanh, Activation::Identity, &mut rng::seeded(0)).unwrap();
        let mut ck = Checkpoint::new(7, 42);
        ck.push_mlp("enc", &net).unwrap();
        ck.set_meta("note", "x").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("model");
        ck.save(&prefix).unwrap();
        let back = Checkpoint::load(&prefix).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.restore_mlp("enc").unwrap(), net);
        assert_eq!(back.meta::<String>("note").unwrap(), "x");
        assert!(back.restore_mlp("missing").is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut ck = Checkpoint::new(0, 0);
        assert!(ck.push("w", vec![2, 2], &[1.0; 3]).is_err());
        ck.push("w", vec![1], &[1.0]).unwrap();
        assert!(ck.push("w", vec![1], &[1.0]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("c");
        ck.save(&prefix).unwrap();
        std::fs::write(dir.path().join("c.bin"), [0u8; 12]).unwrap();
        assert!(matches!(Checkpoint::load(&prefix), Err(Error::Format(_))));
    }
}
