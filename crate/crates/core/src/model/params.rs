//! Named parameter tensors and the index layout of the Transformer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{Matrix, Scalar};
use super::ModelConfig;

/// Parameters in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Matrix<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    pub(crate) fn push(&mut self, name: String, tensor: Matrix<F>) -> usize {
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: usize) -> &Matrix<F> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Matrix<F> {
        &mut self.tensors[id]
    }

    pub fn tensors(&self) -> &[Matrix<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix<F>] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar parameters.
    pub fn size(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Matrix::zeros(t.rows, t.cols)).collect(),
        }
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Matrix::cast).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffers shaped like a [`ParamStore`].
pub type Grads<F> = ParamStore<F>;

impl<F: Scalar> ParamStore<F> {
    pub(crate) fn accumulate(&mut self, id: usize, delta: &Matrix<F>) {
        self.tensors[id].add_assign(delta);
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors.iter().flat_map(|t| &t.data).map(|x| x.to_f64_lossy().powi(2)).sum()
    }

    pub fn scale(&mut self, factor: F) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormIds {
    pub gain: usize,
    pub bias: usize,
}

/// Projections of one attention block. Q, K and V have no bias.
#[derive(Clone, Copy, Debug)]
pub struct AttnIds {
    pub w_q: usize,
    pub w_k: usize,
    pub w_v: usize,
    pub w_o: usize,
    pub b_o: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerIds {
    pub ln_attn: LayerNormIds,
    pub self_attn: AttnIds,
    pub ln_ff: LayerNormIds,
    pub ff_in: LinearIds,
    pub ff_out: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayerIds {
    pub ln_self: LayerNormIds,
    pub self_attn: AttnIds,
    pub ln_cross: LayerNormIds,
    pub cross_attn: AttnIds,
    pub ln_ff: LayerNormIds,
    pub ff_in: LinearIds,
    pub ff_out: LinearIds,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub src_embedding: usize,
    pub tgt_embedding: usize,
    pub encoder: Vec<EncoderLayerIds>,
    pub encoder_norm: LayerNormIds,
    pub decoder: Vec<DecoderLayerIds>,
    pub decoder_norm: LayerNormIds,
    pub output: LinearIds,
}

fn glorot<F: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<F> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| F::of(rng.gen_range(-limit..limit))).collect())
}

struct Builder<'a, F> {
    store: ParamStore<F>,
    rng: &'a mut ChaCha8Rng,
}

impl<F: Scalar> Builder<'_, F> {
    fn weight(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let m = glorot(rows, cols, self.rng);
        self.store.push(name, m)
    }

    fn constant(&mut self, name: String, cols: usize, value: f64) -> usize {
        let mut m = Matrix::zeros(1, cols);
        m.fill(F::of(value));
        self.store.push(name, m)
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> LinearIds {
        LinearIds {
            w: self.weight(format!("{prefix}.weight"), fan_in, fan_out),
            b: self.constant(format!("{prefix}.bias"), fan_out, 0.0),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> LayerNormIds {
        LayerNormIds {
            gain: self.constant(format!("{prefix}.gain"), d, 1.0),
            bias: self.constant(format!("{prefix}.bias"), d, 0.0),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        AttnIds {
            w_q: self.weight(format!("{prefix}.w_q"), d, d),
            w_k: self.weight(format!("{prefix}.w_k"), d, d),
            w_v: self.weight(format!("{prefix}.w_v"), d, d),
            w_o: self.weight(format!("{prefix}.w_o"), d, d),
            b_o: self.constant(format!("{prefix}.b_o"), d, 0.0),
        }
    }
}

/// Allocate and initialise all parameters in declaration order.
pub fn init_params<F: Scalar>(config: &ModelConfig, rng: &mut ChaCha8Rng) -> (ParamStore<F>, Layout) {
    let d = config.d_model;
    let mut b = Builder { store: ParamStore::new(), rng };
    let src_embedding = b.weight("src_embedding".into(), config.vocab_size_src, d);
    let tgt_embedding = b.weight("tgt_embedding".into(), config.vocab_size_tgt, d);
    let encoder = (0..config.n_layers_enc)
        .map(|i| {
            let p = format!("encoder.{i}");
            EncoderLayerIds {
                ln_attn: b.norm(&format!("{p}.ln_attn"), d),
                self_attn: b.attn(&format!("{p}.self_attn"), d),
                ln_ff: b.norm(&format!("{p}.ln_ff"), d),
                ff_in: b.linear(&format!("{p}.ff_in"), d, config.d_ff),
                ff_out: b.linear(&format!("{p}.ff_out"), config.d_ff, d),
            }
        })
        .collect();
    let encoder_norm = b.norm("encoder.norm", d);
    let decoder = (0..config.n_layers_dec)
        .map(|i| {
            let p = format!("decoder.{i}");
            DecoderLayerIds {
                ln_self: b.norm(&format!("{p}.ln_self"), d),
                self_attn: b.attn(&format!("{p}.self_attn"), d),
                ln_cross: b.norm(&format!("{p}.ln_cross"), d),
                cross_attn: b.attn(&format!("{p}.cross_attn"), d),
                ln_ff: b.norm(&format!("{p}.ln_ff"), d),
                ff_in: b.linear(&format!("{p}.ff_in"), d, config.d_ff),
                ff_out: b.linear(&format!("{p}.ff_out"), config.d_ff, d),
            }
        })
        .collect();
    let decoder_norm = b.norm("decoder.norm", d);
    let output = b.linear("output", d, config.vocab_size_tgt);
    let layout = Layout { src_embedding, tgt_embedding, encoder, encoder_norm, decoder, decoder_norm, output };
    (b.store, layout)
}
