use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
}

impl LayerSpec {
    pub fn num_params(&self) -> usize {
        self.input * self.output + self.output
    }
}

/// Stack of affine layers over one flat parameter vector. Each layer stores
/// its `output × input` weight (row-major) followed by its bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<LayerSpec>,
    hidden: Activation,
    output: Activation,
    params: Vec<f64>,
}

/// Per-layer activations from a batch forward pass: entry 0 is the input,
/// entry `l + 1` the output of layer `l`.
#[derive(Debug, Clone)]
pub struct MlpCache {
    activations: Vec<Array2<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("cache holds at least the input")
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.activations[0]
    }
}

impl Mlp {
    /// Zero-initialized network. `widths` lists input width then every layer's output width.
    pub fn zeros(widths: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(format!("bad layer widths {widths:?}")));
        }
        let layers: Vec<LayerSpec> =
            widths.windows(2).map(|w| LayerSpec { input: w[0], output: w[1] }).collect();
        let n = layers.iter().map(LayerSpec::num_params).sum();
        Ok(Self { layers, hidden, output, params: vec![0.0; n] })
    }

    /// Uniform `±1/√fan_in` initialization for weights and biases.
    pub fn init(widths: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Result<Self> {
        let mut m = Self::zeros(widths, hidden, output)?;
        let mut off = 0;
        for spec in &m.layers {
            let bound = 1.0 / (spec.input as f64).sqrt();
            for p in &mut m.params[off..off + spec.num_params()] {
                *p = rng::uniform(rng, -bound, bound);
            }
            off += spec.num_params();
        }
        Ok(m)
    }

    /// Single layer whose weight is the rectangular identity and bias zero.
    pub fn identity(input: usize, output: usize) -> Result<Self> {
        let mut m = Self::zeros(&[input, output], Activation::Identity, Activation::Identity)?;
        for i in 0..input.min(output) {
            m.params[i * input + i] = 1.0;
        }
        Ok(m)
    }

    /// Hidden and output activations.
    pub fn activations(&self) -> (Activation, Activation) {
        (self.hidden, self.output)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    fn offsets(&self) -> Vec<usize> {
        self.layers
            .iter()
            .scan(0, |off, s| {
                let o = *off;
                *off += s.num_params();
                Some(o)
            })
            .collect()
    }

    /// Named parameter slices (`layer{i}.weight`, `layer{i}.bias`).
    pub fn param_slices(&self) -> Vec<(String, Range<usize>)> {
        let mut out = Vec::new();
        for (i, (spec, off)) in self.layers.iter().zip(self.offsets()).enumerate() {
            let w = spec.input * spec.output;
            out.push((format!("layer{i}.weight"), off..off + w));
            out.push((format!("layer{i}.bias"), off + w..off + w + spec.output));
        }
        out
    }

    fn weight(&self, layer: usize, off: usize) -> ArrayView2<'_, f64> {
        let s = self.layers[layer];
        ArrayView2::from_shape((s.output, s.input), &self.params[off..off + s.input * s.output])
            .expect("layout matches spec")
    }

    fn bias(&self, layer: usize, off: usize) -> &[f64] {
        let s = self.layers[layer];
        &self.params[off + s.input * s.output..off + s.num_params()]
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.activations.pop().unwrap())
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<MlpCache> {
        if x.ncols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input width {} does not match layer input {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut acts = vec![x.to_owned()];
        for (l, off) in self.offsets().into_iter().enumerate() {
            let w = self.weight(l, off);
            let b = Array1::from(self.bias(l, off).to_vec());
            let act = self.activation(l);
            let z = acts[l].dot(&w.t()) + &b;
            acts.push(z.mapv(|v| act.apply(v)));
        }
        Ok(MlpCache { activations: acts })
    }

    /// Reverse pass: returns `(dL/dparams, dL/dinput)` for an upstream
    /// gradient on the network output.
    pub fn backward(&self, cache: &MlpCache, upstream: ArrayView2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        if cache.activations.len() != self.layers.len() + 1 {
            return Err(Error::State("forward cache does not belong to this network".into()));
        }
        let out = cache.output();
        if upstream.dim() != out.dim() {
            return Err(Error::State(format!(
                "upstream gradient shape {:?} does not match cached output {:?}",
                upstream.dim(),
                out.dim()
            )));
        }
        for (l, s) in self.layers.iter().enumerate() {
            if cache.activations[l].ncols() != s.input {
                return Err(Error::State("forward cache does not belong to this network".into()));
            }
        }
        let mut grads = vec![0.0; self.params.len()];
        let offsets = self.offsets();
        let mut delta = upstream.to_owned();
        for l in (0..self.layers.len()).rev() {
            let act = self.activation(l);
            let a_out = &cache.activations[l + 1];
            let mut dz = delta;
            dz.zip_mut_with(a_out, |d, &a| *d *= act.derivative_from_output(a));
            let a_in = &cache.activations[l];
            let dw = dz.t().dot(a_in);
            let db = dz.sum_axis(Axis(0));
            let s = self.layers[l];
            let off = offsets[l];
            grads[off..off + s.input * s.output].copy_from_slice(dw.as_slice().expect("standard layout"));
            grads[off + s.input * s.output..off + s.num_params()].copy_from_slice(db.as_slice().unwrap());
            delta = dz.dot(&self.weight(l, off));
        }
        Ok((grads, delta))
    }
}
