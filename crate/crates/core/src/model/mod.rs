//! Transformer encoder-decoder over token ids, trained from scratch.
//!
//! Everything is generic over [`Scalar`]: `f64` is the reference mode used
//! by gradient checks and oracles, `f32` the fast mode used for training.

mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
mod params;
mod tensor;
pub mod train;
mod transformer;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub use attention::{attention, attention_weights, Span};
pub use params::{
    init_params, AttnIds, DecoderLayerIds, EncoderLayerIds, Grads, LayerNormIds, Layout, LinearIds, ParamStore,
};
pub use tensor::{gemm, log_softmax, softmax_in_place, Matrix, Scalar, View};
pub use transformer::{argmax, BatchStats, DecoderState, EncoderMemory, Example, Transformer};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("invalid model configuration: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub vocab_size_src: usize,
    pub vocab_size_tgt: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Add sinusoidal position vectors to the embeddings.
    pub positional_encoding: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            n_layers_enc: 2,
            n_layers_dec: 2,
            vocab_size_src: 0,
            vocab_size_tgt: 0,
            max_len: 256,
            dropout: 0.1,
            positional_encoding: true,
            seed: 1,
        }
    }
}

const CONFIG_KEYS: [&str; 11] = [
    "d_model",
    "n_heads",
    "d_ff",
    "n_layers_enc",
    "n_layers_dec",
    "vocab_size_src",
    "vocab_size_tgt",
    "max_len",
    "dropout",
    "positional_encoding",
    "seed",
];

impl ModelConfig {
    /// Per-head key and query width.
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size_src", self.vocab_size_src),
            ("vocab_size_tgt", self.vocab_size_tgt),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Set one field from its textual `key=value` form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ModelError> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T, ModelError> {
            value.trim().parse().map_err(|_| ModelError::Config(format!("bad value {value:?} for {key}")))
        }
        match key.trim() {
            "d_model" => self.d_model = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "d_ff" => self.d_ff = num(key, value)?,
            "n_layers_enc" => self.n_layers_enc = num(key, value)?,
            "n_layers_dec" => self.n_layers_dec = num(key, value)?,
            "vocab_size_src" => self.vocab_size_src = num(key, value)?,
            "vocab_size_tgt" => self.vocab_size_tgt = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "dropout" | "dropout_rate" => self.dropout = num(key, value)?,
            "positional_encoding" => self.positional_encoding = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            other => return Err(ModelError::Config(format!("unknown model key {other:?}"))),
        }
        Ok(())
    }

    pub fn is_key(key: &str) -> bool {
        CONFIG_KEYS.contains(&key) || key == "dropout_rate"
    }

    /// `key=value` lines, one per field.
    pub fn to_text(&self) -> String {
        self.to_string()
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let mut config = ModelConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| ModelError::Config(format!("expected key=value, got {line:?}")))?;
            config.set(k, v)?;
        }
        Ok(config)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "d_model={}", self.d_model)?;
        writeln!(f, "n_heads={}", self.n_heads)?;
        writeln!(f, "d_ff={}", self.d_ff)?;
        writeln!(f, "n_layers_enc={}", self.n_layers_enc)?;
        writeln!(f, "n_layers_dec={}", self.n_layers_dec)?;
        writeln!(f, "vocab_size_src={}", self.vocab_size_src)?;
        writeln!(f, "vocab_size_tgt={}", self.vocab_size_tgt)?;
        writeln!(f, "max_len={}", self.max_len)?;
        writeln!(f, "dropout={}", self.dropout)?;
        writeln!(f, "positional_encoding={}", self.positional_encoding)?;
        writeln!(f, "seed={}", self.seed)
    }
}

/// Sinusoidal position vector: `sin(p / 10000^(2i/d))` at even index `2i`,
/// the matching cosine at odd index `2i+1`.
pub fn positional_encoding(position: usize, d_model: usize, max_len: usize) -> Result<Vec<f64>, ModelError> {
    if position >= max_len {
        return Err(ModelError::Range(format!("position {position} is not below max_len {max_len}")));
    }
    Ok(sinusoid(position, d_model))
}

fn sinusoid(position: usize, d_model: usize) -> Vec<f64> {
    (0..d_model)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = position as f64 / 10000f64.powf(2.0 * i / d_model as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

pub(crate) fn positional_encoding_table<F: Scalar>(max_len: usize, d_model: usize) -> Matrix<F> {
    let data = (0..max_len).flat_map(|p| sinusoid(p, d_model)).map(F::of).collect();
    Matrix::from_vec(max_len, d_model, data)
}

/// Query, key and value projections of `x`, each split into per-head blocks
/// of width `d_model / n_heads`.
pub fn self_attention_projections<F: Scalar>(
    x: &Matrix<F>,
    w_q: &Matrix<F>,
    w_k: &Matrix<F>,
    w_v: &Matrix<F>,
    n_heads: usize,
) -> Result<[Vec<Matrix<F>>; 3], ModelError> {
    for (name, w) in [("W_Q", w_q), ("W_K", w_k), ("W_V", w_v)] {
        if w.rows != x.cols || w.cols != x.cols {
            return Err(ModelError::Shape(format!(
                "{name} is {}x{}, expected {}x{}",
                w.rows, w.cols, x.cols, x.cols
            )));
        }
    }
    if n_heads == 0 || x.cols % n_heads != 0 {
        return Err(ModelError::Shape(format!("width {} does not split into {n_heads} heads", x.cols)));
    }
    let dk = x.cols / n_heads;
    let split = |m: Matrix<F>| -> Vec<Matrix<F>> {
        (0..n_heads)
            .map(|h| {
                let data = (0..m.rows).flat_map(|r| m.row(r)[h * dk..(h + 1) * dk].to_vec()).collect();
                Matrix::from_vec(m.rows, dk, data)
            })
            .collect()
    };
    Ok([split(x.matmul(w_q)), split(x.matmul(w_k)), split(x.matmul(w_v))])
}
