use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Token-embedding table with mean pooling and inverted dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    table: Array2<f64>,
    dropout: f64,
    #[serde(default)]
    vocab: Vec<String>,
}

/// What a dropout-active forward pass needs to replay its gradient.
#[derive(Debug, Clone)]
pub struct TextCache {
    tokens: Vec<usize>,
    /// Per-position, per-dimension multipliers (0 or 1/(1−p)).
    mask: Array2<f64>,
}

/// Positions sorted by token id, so the pooled sum is bitwise independent of
/// token order.
fn summation_order(tokens: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..tokens.len()).collect();
    order.sort_by_key(|&p| tokens[p]);
    order
}

impl TextEncoder {
    pub fn new(vocab_size: usize, dim: usize, dropout: f64, rng: &mut Rng) -> Result<Self> {
        if vocab_size == 0 || dim == 0 {
            return Err(Error::invalid("vocabulary and embedding dim must be >= 1"));
        }
        let table = Array2::from_shape_fn((vocab_size, dim), |_| rng::uniform(rng, -1.0, 1.0));
        Self::from_table(table, dropout)
    }

    pub fn from_table(table: Array2<f64>, dropout: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::invalid(format!("dropout must lie in [0, 1), got {dropout}")));
        }
        if table.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding table has non-finite entries"));
        }
        Ok(Self { table, dropout, vocab: Vec::new() })
    }

    /// Attaches token names so free text can be encoded with [`Self::tokenize`].
    pub fn with_vocab(mut self, vocab: Vec<String>) -> Result<Self> {
        if vocab.len() != self.table.nrows() {
            return Err(Error::invalid("vocabulary size does not match table rows"));
        }
        self.vocab = vocab;
        Ok(self)
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.table.nrows()
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout must lie in [0, 1), got {p}")));
        }
        self.dropout = p;
        Ok(())
    }

    pub fn table(&self) -> ArrayView2<'_, f64> {
        self.table.view()
    }

    pub fn table_mut(&mut self) -> &mut Array2<f64> {
        &mut self.table
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("token sequence is empty"));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab_size()) {
            return Err(Error::invalid(format!("token id {t} >= vocabulary size {}", self.vocab_size())));
        }
        Ok(())
    }

    /// Training-mode pass: mean of dropout-masked token embeddings.
    pub fn forward(&self, tokens: &[usize], rng: &mut Rng) -> Result<(Array1<f64>, TextCache)> {
        self.check_tokens(tokens)?;
        let d = self.dim();
        let keep = 1.0 - self.dropout;
        let mask = if self.dropout == 0.0 {
            Array2::ones((tokens.len(), d))
        } else {
            Array2::from_shape_fn((tokens.len(), d), |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        };
        let mut out = Array1::zeros(d);
        for pos in summation_order(tokens) {
            out.scaled_add(1.0, &(&self.table.row(tokens[pos]) * &mask.row(pos)));
        }
        out /= tokens.len() as f64;
        Ok((out, TextCache { tokens: tokens.to_vec(), mask }))
    }

    /// Evaluation-mode pass (no dropout).
    pub fn embed(&self, tokens: &[usize]) -> Result<Array1<f64>> {
        self.check_tokens(tokens)?;
        let mut out = Array1::zeros(self.dim());
        for pos in summation_order(tokens) {
            out += &self.table.row(tokens[pos]);
        }
        Ok(out / tokens.len() as f64)
    }

    /// Gradient on the embedding table for an upstream gradient on the pooled output.
    pub fn backward(&self, cache: &TextCache, upstream: ArrayView1<f64>) -> Result<Array2<f64>> {
        if upstream.len() != self.dim() || cache.mask.ncols() != self.dim() {
            return Err(Error::State("text cache does not match this encoder".into()));
        }
        let mut grad = Array2::zeros(self.table.raw_dim());
        let scale = 1.0 / cache.tokens.len() as f64;
        for (pos, &t) in cache.tokens.iter().enumerate() {
            if t >= self.vocab_size() {
                return Err(Error::State("text cache does not match this encoder".into()));
            }
            let contrib = &cache.mask.row(pos) * &upstream * scale;
            let mut row = grad.row_mut(t);
            row += &contrib;
        }
        Ok(grad)
    }

    /// Lowercases and splits on anything that is not alphanumeric or `_`,
    /// keeping only words present in the vocabulary.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let index: HashMap<&str, usize> = self.vocab.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
        text.to_lowercase()
            .split(|c: char| !(c.is_alphanumeric() || c == '_'))
            .filter_map(|w| index.get(w).copied())
            .collect()
    }

    pub fn embed_text(&self, text: &str) -> Result<Array1<f64>> {
        let tokens = self.tokenize(text);
        if tokens.is_empty() {
            return Err(Error::invalid(format!("no in-vocabulary tokens in `{text}`")));
        }
        self.embed(&tokens)
    }
}
