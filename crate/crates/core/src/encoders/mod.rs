//! Toy differentiable encoders: an affine/tanh image backbone with a
//! projection head, a mean-pooling token-embedding text encoder with
//! inverted dropout, and the 14 multi-task attribute heads. Every
//! parameterized piece has an analytic reverse pass.

mod checkpoint;
mod mlp;
mod text;

pub use checkpoint::{Checkpoint, CheckpointManifest, TensorEntry};
pub use mlp::{Activation, LayerSpec, Mlp, MlpCache};
pub use text::{TextCache, TextEncoder};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::volume::Volume3D;

/// Option counts of the 14 structured report questions, in question order.
pub const ATTRIBUTE_CLASSES: [usize; 14] = [4, 4, 5, 2, 5, 4, 7, 3, 7, 4, 3, 5, 5, 3];

/// Flattened-input backbone producing `F`-dim features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoder {
    input_dims: [usize; 3],
    net: Mlp,
}

impl ImageEncoder {
    /// Default toy backbone: two tanh hidden layers then a tanh feature layer.
    pub fn new(input_dims: [usize; 3], hidden: usize, features: usize, rng: &mut Rng) -> Result<Self> {
        Self::with_widths(input_dims, &[hidden, hidden, features], Activation::Tanh, rng)
    }

    pub fn with_widths(input_dims: [usize; 3], widths: &[usize], act: Activation, rng: &mut Rng) -> Result<Self> {
        let mut all = vec![input_dims.iter().product()];
        all.extend_from_slice(widths);
        Ok(Self { input_dims, net: Mlp::init(&all, act, act, rng)? })
    }

    pub fn from_mlp(input_dims: [usize; 3], net: Mlp) -> Result<Self> {
        if net.input_dim() != input_dims.iter().product::<usize>() {
            return Err(Error::invalid("network input width does not match input dims"));
        }
        Ok(Self { input_dims, net })
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.input_dims
    }

    pub fn input_len(&self) -> usize {
        self.net.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn forward_volume(&self, vol: &Volume3D) -> Result<Array1<f64>> {
        if vol.dims() != self.input_dims {
            return Err(Error::invalid(format!(
                "volume dims {:?} do not match encoder input {:?}",
                vol.dims(),
                self.input_dims
            )));
        }
        let x: Vec<f64> = vol.voxels().iter().map(|&v| v as f64).collect();
        self.forward(ArrayView1::from(&x))
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let batch = x.insert_axis(Axis(0));
        Ok(self.net.forward(batch)?.row(0).to_owned())
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<MlpCache> {
        self.net.forward_cached(x)
    }

    pub fn backward(&self, cache: &MlpCache, upstream: ArrayView2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        self.net.backward(cache, upstream)
    }
}

/// Maps backbone features into the text embedding space. One affine layer
/// by default; deeper heads use tanh between layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    net: Mlp,
}

impl ProjectionHead {
    pub fn new(features: usize, embed_dim: usize, rng: &mut Rng) -> Result<Self> {
        Self::with_depth(features, embed_dim, 1, rng)
    }

    pub fn with_depth(features: usize, embed_dim: usize, depth: usize, rng: &mut Rng) -> Result<Self> {
        if depth == 0 {
            return Err(Error::invalid("projection depth must be >= 1"));
        }
        let mut widths = vec![features; depth];
        widths.push(embed_dim);
        Ok(Self { net: Mlp::init(&widths, Activation::Tanh, Activation::Identity, rng)? })
    }

    pub fn from_mlp(net: Mlp) -> Self {
        Self { net }
    }

    pub fn embed_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }
}

/// One affine classifier per structured attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskHeads {
    heads: Vec<Mlp>,
}

pub struct HeadsCache {
    caches: Vec<MlpCache>,
}

impl MultiTaskHeads {
    pub fn new(features: usize, rng: &mut Rng) -> Result<Self> {
        Self::with_classes(features, &ATTRIBUTE_CLASSES, rng)
    }

    pub fn with_classes(features: usize, classes: &[usize], rng: &mut Rng) -> Result<Self> {
        let heads = classes
            .iter()
            .map(|&c| Mlp::init(&[features, c], Activation::Identity, Activation::Identity, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { heads })
    }

    pub fn from_heads(heads: Vec<Mlp>) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::invalid("at least one head required"));
        }
        let f = heads[0].input_dim();
        if heads.iter().any(|h| h.input_dim() != f) {
            return Err(Error::invalid("heads must share the feature width"));
        }
        Ok(Self { heads })
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.heads.iter().map(Mlp::output_dim).collect()
    }

    pub fn heads(&self) -> &[Mlp] {
        &self.heads
    }

    pub fn num_params(&self) -> usize {
        self.heads.iter().map(|h| h.params().len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.heads.iter().flat_map(|h| h.params().iter().copied()).collect()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::invalid("flat parameter length mismatch"));
        }
        let mut off = 0;
        for h in &mut self.heads {
            let n = h.params().len();
            h.set_params(&flat[off..off + n])?;
            off += n;
        }
        Ok(())
    }

    /// Per-head logits for a batch of features.
    pub fn forward(&self, features: ArrayView2<f64>) -> Result<(Vec<Array2<f64>>, HeadsCache)> {
        let caches = self.heads.iter().map(|h| h.forward_cached(features)).collect::<Result<Vec<_>>>()?;
        let logits = caches.iter().map(|c| c.output().clone()).collect();
        Ok((logits, HeadsCache { caches }))
    }

    /// `upstream[k]` is the gradient on head `k`'s logits (`None` = zero).
    /// Returns flat parameter gradients and the summed feature gradient.
    pub fn backward(&self, cache: &HeadsCache, upstream: &[Option<Array2<f64>>]) -> Result<(Vec<f64>, Array2<f64>)> {
        if cache.caches.len() != self.heads.len() || upstream.len() != self.heads.len() {
            return Err(Error::State("head cache/upstream count mismatch".into()));
        }
        let Some(first) = cache.caches.first() else {
            return Err(Error::State("no heads".into()));
        };
        let input = first.input();
        let mut dfeat = Array2::zeros(input.raw_dim());
        let mut grads = Vec::with_capacity(self.num_params());
        for ((head, c), up) in self.heads.iter().zip(&cache.caches).zip(upstream) {
            match up {
                Some(g) => {
                    let (gp, gx) = head.backward(c, g.view())?;
                    grads.extend(gp);
                    dfeat += &gx;
                }
                None => grads.extend(std::iter::repeat_n(0.0, head.params().len())),
            }
        }
        Ok((grads, dfeat))
    }
}

/// Unit-norm copy of `v`.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = crate::math::norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::invalid("cannot normalize a zero or non-finite vector"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Row-wise normalization; returns normalized rows and the original norms.
pub fn l2_normalize_rows(m: ArrayView2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut out = m.to_owned();
    let mut norms = Vec::with_capacity(m.nrows());
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::invalid("cannot normalize a zero or non-finite row"));
        }
        row /= n;
        norms.push(n);
    }
    Ok((out, norms))
}

/// Gradient through row normalization: `(g − u (u·g)) / ‖x‖` per row.
pub fn l2_normalize_rows_backward(normalized: ArrayView2<f64>, norms: &[f64], upstream: ArrayView2<f64>) -> Array2<f64> {
    let mut out = upstream.to_owned();
    for ((mut g, u), &n) in out.rows_mut().into_iter().zip(normalized.rows()).zip(norms) {
        let proj = u.dot(&g);
        g.zip_mut_with(&u, |gi, &ui| *gi = (*gi - ui * proj) / n);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[1.0, 1.0, 1.0, 1.0]).unwrap(), vec![0.5; 4]);
        assert_eq!(l2_normalize(&[0.0, 1.0]).unwrap(), vec![0.0, 1.0]);
        assert!(l2_normalize(&[0.0, 0.0]).is_err());
        assert!(l2_normalize_rows(ndarray::array![[1.0, 0.0], [0.0, 0.0]].view()).is_err());
    }

    #[test]
    fn heads_distributions() {
        let mut g = rng::seeded(3);
        let heads = MultiTaskHeads::new(8, &mut g).unwrap();
        assert_eq!(heads.classes(), ATTRIBUTE_CLASSES);
        let f = Array2::from_shape_fn((5, 8), |(i, j)| ((i * 8 + j) as f64).sin());
        let (logits, _) = heads.forward(f.view()).unwrap();
        for l in logits {
            for row in crate::losses::softmax_rows(l.view()).rows() {
                assert!((row.sum() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn image_encoder_dims() {
        let mut g = rng::seeded(1);
        let enc = ImageEncoder::new([2, 3, 4], 8, 5, &mut g).unwrap();
        assert_eq!(enc.input_len(), 24);
        assert_eq!(enc.feature_dim(), 5);
        let geom = crate::volume::Geometry::new([2, 3, 4], [1.0; 3], [0.0; 3]).unwrap();
        let vol = Volume3D::filled(geom, 0.5).unwrap();
        assert_eq!(enc.forward_volume(&vol).unwrap().len(), 5);
        let other = Volume3D::filled(crate::volume::Geometry::new([4, 3, 2], [1.0; 3], [0.0; 3]).unwrap(), 0.5).unwrap();
        assert!(enc.forward_volume(&other).is_err());
        assert!(ProjectionHead::with_depth(5, 3, 0, &mut g).is_err());
    }
}
