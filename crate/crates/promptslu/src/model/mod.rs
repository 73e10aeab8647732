//! From-scratch encoder-decoder transformer in f64 with hand-written
//! gradients.
//!
//! Parameters live in one flat `Vec<f64>` addressed through a [`Layout`]
//! of named entries, so the optimizer and checkpointing treat the model as
//! a single vector while the network code sees named ndarray views.
//! Everything is deliberately per-example and sequential: runs are bitwise
//! reproducible for a given seed, and gradient checks stay simple.

mod adam;
mod checkpoint;
mod decode;
mod net;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{blob_sha256, load_model, read_f64s, save_model, write_f64s};
pub use decode::{
    beam_search, greedy_decode, DecodeConfig, DecodeConstraint, Hypothesis, ModelScorer,
    TokenScorer,
};
pub use net::{
    label_smoothed_loss_and_grad, masked_loss, Forward, LossOutput, TransformerModel,
};

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("sequence of length {len} exceeds the model maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("token id {0} is outside the model vocabulary")]
    TokenOutOfRange(usize),
    /// The forward pass produced a non-finite value; training treats this
    /// as divergence.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("bad loss mask: {0}")]
    BadMask(&'static str),
    #[error("unknown parameter entry `{0}`")]
    UnknownParameter(String),
    #[error("parameter shape mismatch for `{0}`")]
    ShapeMismatch(String),
    #[error("checkpoint is malformed: {0}")]
    MalformedCheckpoint(String),
    #[error("checkpoint blob hash does not match its header")]
    ChecksumMismatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Architecture hyperparameters. `max_len` bounds both encoder and decoder
/// positions (separate learned tables of this many rows each).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ffn: usize,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let all_nonzero = self.vocab_size > 0
            && self.d_model > 0
            && self.n_heads > 0
            && self.n_encoder_layers > 0
            && self.n_decoder_layers > 0
            && self.d_ffn > 0
            && self.max_len > 0;
        if !all_nonzero {
            return Err(ModelError::BadConfig("all dimensions must be nonzero".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    #[must_use]
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Named view table into the flat parameter vector. Layouts are a pure
/// function of the config, so checkpoints store only the config and rebuild
/// the layout on load.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    index: HashMap<String, usize>,
    total: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct LayoutEntry {
    name: String,
    offset: usize,
    shape: Vec<usize>,
}

impl Layout {
    fn new(entries: Vec<(String, Vec<usize>)>) -> Self {
        let mut offset = 0;
        let mut built = Vec::with_capacity(entries.len());
        let mut index = HashMap::new();
        for (name, shape) in entries {
            let len: usize = shape.iter().product();
            index.insert(name.clone(), built.len());
            built.push(LayoutEntry { name, offset, shape });
            offset += len;
        }
        Self { entries: built, index, total: offset }
    }

    #[must_use]
    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    fn entry(&self, name: &str) -> Result<&LayoutEntry, ModelError> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| ModelError::UnknownParameter(name.to_owned()))
    }

    /// The parameter layout of a model with this config.
    #[must_use]
    pub fn of(cfg: &ModelConfig) -> Self {
        let (v, d, f, m) = (cfg.vocab_size, cfg.d_model, cfg.d_ffn, cfg.max_len);
        let mut e: Vec<(String, Vec<usize>)> = vec![
            ("enc.embed".into(), vec![v, d]),
            ("enc.pos".into(), vec![m, d]),
            ("dec.embed".into(), vec![v, d]),
            ("dec.pos".into(), vec![m, d]),
        ];
        let attn = |e: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
            for w in ["wq", "wk", "wv", "wo"] {
                e.push((format!("{prefix}.{w}"), vec![d, d]));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                e.push((format!("{prefix}.{b}"), vec![d]));
            }
        };
        let ln = |e: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
            e.push((format!("{prefix}.g"), vec![d]));
            e.push((format!("{prefix}.b"), vec![d]));
        };
        let ffn = |e: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
            e.push((format!("{prefix}.w1"), vec![d, f]));
            e.push((format!("{prefix}.b1"), vec![f]));
            e.push((format!("{prefix}.w2"), vec![f, d]));
            e.push((format!("{prefix}.b2"), vec![d]));
        };
        for i in 0..cfg.n_encoder_layers {
            ln(&mut e, &format!("enc.{i}.ln1"));
            attn(&mut e, &format!("enc.{i}.attn"));
            ln(&mut e, &format!("enc.{i}.ln2"));
            ffn(&mut e, &format!("enc.{i}.ffn"));
        }
        ln(&mut e, "enc.ln_f");
        for i in 0..cfg.n_decoder_layers {
            ln(&mut e, &format!("dec.{i}.ln1"));
            attn(&mut e, &format!("dec.{i}.self"));
            ln(&mut e, &format!("dec.{i}.ln2"));
            attn(&mut e, &format!("dec.{i}.cross"));
            ln(&mut e, &format!("dec.{i}.ln3"));
            ffn(&mut e, &format!("dec.{i}.ffn"));
        }
        ln(&mut e, "dec.ln_f");
        e.push(("out.w".into(), vec![d, v]));
        e.push(("out.b".into(), vec![v]));
        Self::new(e)
    }
}

/// Flat parameter (or gradient) vector with named matrix/vector views.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub data: Vec<f64>,
    layout: std::sync::Arc<Layout>,
}

impl Parameters {
    /// All-zero vector over the layout; used for gradient accumulators.
    #[must_use]
    pub fn zeros(layout: std::sync::Arc<Layout>) -> Self {
        Self {
            data: vec![0.0; layout.total_len()],
            layout,
        }
    }

    pub fn from_data(layout: std::sync::Arc<Layout>, data: Vec<f64>) -> Result<Self, ModelError> {
        if data.len() != layout.total_len() {
            return Err(ModelError::ShapeMismatch(format!(
                "flat vector has {} values, layout wants {}",
                data.len(),
                layout.total_len()
            )));
        }
        Ok(Self { data, layout })
    }

    /// Seeded initialization: token and positional embeddings uniform in
    /// ±1/sqrt(d_model), projection matrices Glorot uniform, gains one,
    /// biases zero.
    #[must_use]
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let layout = std::sync::Arc::new(Layout::of(cfg));
        let mut p = Self::zeros(layout.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed_scale = 1.0 / (cfg.d_model as f64).sqrt();
        for entry in &layout.entries {
            let slice = &mut p.data[entry.offset..entry.offset + entry.shape.iter().product::<usize>()];
            let leaf = entry.name.rsplit('.').next().unwrap_or_default();
            match leaf {
                "embed" | "pos" => {
                    for x in slice.iter_mut() {
                        *x = rng.gen_range(-embed_scale..embed_scale);
                    }
                }
                "g" => slice.fill(1.0),
                "b" | "bq" | "bk" | "bv" | "bo" | "b1" | "b2" => slice.fill(0.0),
                _ => {
                    let (rows, cols) = (entry.shape[0], entry.shape[1]);
                    let a = (6.0 / (rows + cols) as f64).sqrt();
                    for x in slice.iter_mut() {
                        *x = rng.gen_range(-a..a);
                    }
                }
            }
        }
        p
    }

    #[must_use]
    pub fn layout(&self) -> &std::sync::Arc<Layout> {
        &self.layout
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn scale(&mut self, factor: f64) {
        for x in &mut self.data {
            *x *= factor;
        }
    }

    /// 2-D view of a named matrix entry.
    pub fn mat(&self, name: &str) -> ndarray::ArrayView2<'_, f64> {
        let e = self.layout.entry(name).expect("known parameter name");
        assert_eq!(e.shape.len(), 2, "{name} is not a matrix");
        ndarray::ArrayView2::from_shape(
            (e.shape[0], e.shape[1]),
            &self.data[e.offset..e.offset + e.shape[0] * e.shape[1]],
        )
        .expect("layout shapes are consistent")
    }

    /// 1-D view of a named vector entry.
    pub fn vec1(&self, name: &str) -> ndarray::ArrayView1<'_, f64> {
        let e = self.layout.entry(name).expect("known parameter name");
        assert_eq!(e.shape.len(), 1, "{name} is not a vector");
        ndarray::ArrayView1::from_shape(e.shape[0], &self.data[e.offset..e.offset + e.shape[0]])
            .expect("layout shapes are consistent")
    }

    pub fn mat_mut(&mut self, name: &str) -> ndarray::ArrayViewMut2<'_, f64> {
        let e = self.layout.entry(name).expect("known parameter name").clone();
        assert_eq!(e.shape.len(), 2, "{name} is not a matrix");
        ndarray::ArrayViewMut2::from_shape(
            (e.shape[0], e.shape[1]),
            &mut self.data[e.offset..e.offset + e.shape[0] * e.shape[1]],
        )
        .expect("layout shapes are consistent")
    }

    pub fn vec1_mut(&mut self, name: &str) -> ndarray::ArrayViewMut1<'_, f64> {
        let e = self.layout.entry(name).expect("known parameter name").clone();
        assert_eq!(e.shape.len(), 1, "{name} is not a vector");
        ndarray::ArrayViewMut1::from_shape(
            e.shape[0],
            &mut self.data[e.offset..e.offset + e.shape[0]],
        )
        .expect("layout shapes are consistent")
    }

    /// Offset and flat length of a named entry; lets callers address the
    /// same region in a parallel flat vector (moments, gradients).
    pub fn span(&self, name: &str) -> Result<(usize, usize), ModelError> {
        let e = self.layout.entry(name)?;
        Ok((e.offset, e.shape.iter().product()))
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "d{}h{} enc{} dec{} ffn{} vocab{} max{}",
            self.d_model,
            self.n_heads,
            self.n_encoder_layers,
            self.n_decoder_layers,
            self.d_ffn,
            self.vocab_size,
            self.max_len
        )
    }
}

#[cfg(test)]
pub(crate) fn tiny_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        d_model: 8,
        n_heads: 2,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        d_ffn: 16,
        max_len: 32,
    }
}
