//! Pre-norm Transformer encoder-decoder with explicit backward pass.
//!
//! Sequences of a batch are packed row-wise into one matrix so every
//! position-wise layer is a single matrix product; attention runs per
//! sequence and per head on strided views.

use std::ops::Range;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::{accumulate_bias, add_bias, mha_backward, mha_forward, AttnCache, Span};
use super::params::{init_params, Grads, LayerNormIds, Layout, LinearIds, ParamStore};
use super::tensor::{log_softmax, softmax_in_place, Matrix, Scalar};
use super::{positional_encoding_table, ModelConfig, ModelError};
use crate::tokenizer::Vocabulary;

const LN_EPS: f64 = 1e-6;

/// One training pair of id sequences. `target` starts with `<s>` and ends
/// with `</s>`; the decoder reads `target[..n-1]` and predicts `target[1..]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Loss and accuracy over the labelled (non-pad) positions of a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub loss: f64,
    pub tokens: usize,
    pub correct: usize,
}

impl BatchStats {
    pub fn accuracy(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.correct as f64 / self.tokens as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct Transformer<F> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: ParamStore<F>,
    pe: Matrix<F>,
}

struct LnCache<F> {
    xhat: Matrix<F>,
    inv_std: Vec<F>,
}

struct EncoderLayerCache<F> {
    ln_attn: LnCache<F>,
    attn_in: Matrix<F>,
    attn: AttnCache<F>,
    attn_drop: Option<Vec<F>>,
    ln_ff: LnCache<F>,
    ff_in: Matrix<F>,
    hidden_pre: Matrix<F>,
    hidden: Matrix<F>,
    ff_drop: Option<Vec<F>>,
}

struct DecoderLayerCache<F> {
    ln_self: LnCache<F>,
    self_in: Matrix<F>,
    self_attn: AttnCache<F>,
    self_drop: Option<Vec<F>>,
    ln_cross: LnCache<F>,
    cross_in: Matrix<F>,
    cross_attn: AttnCache<F>,
    cross_drop: Option<Vec<F>>,
    ln_ff: LnCache<F>,
    ff_in: Matrix<F>,
    hidden_pre: Matrix<F>,
    hidden: Matrix<F>,
    ff_drop: Option<Vec<F>>,
}

struct Trace<F> {
    src_ids: Vec<usize>,
    tgt_ids: Vec<usize>,
    src_drop: Option<Vec<F>>,
    tgt_drop: Option<Vec<F>>,
    encoder: Vec<EncoderLayerCache<F>>,
    encoder_norm: LnCache<F>,
    memory: Matrix<F>,
    decoder: Vec<DecoderLayerCache<F>>,
    decoder_norm: LnCache<F>,
    decoded: Matrix<F>,
    self_spans_src: Vec<Span>,
    self_spans_tgt: Vec<Span>,
    cross_spans: Vec<Span>,
}

fn pack(seqs: &[&[usize]]) -> (Vec<usize>, Vec<usize>, Vec<Range<usize>>) {
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut ranges = Vec::with_capacity(seqs.len());
    for s in seqs {
        let start = ids.len();
        ids.extend_from_slice(s);
        positions.extend(0..s.len());
        ranges.push(start..ids.len());
    }
    (ids, positions, ranges)
}

fn layer_norm<F: Scalar>(p: &ParamStore<F>, ids: LayerNormIds, x: &Matrix<F>) -> (Matrix<F>, LnCache<F>) {
    let d = x.cols;
    let gain = &p.get(ids.gain).data;
    let bias = &p.get(ids.bias).data;
    let mut xhat = Matrix::zeros(x.rows, d);
    let mut y = Matrix::zeros(x.rows, d);
    let mut inv_std = Vec::with_capacity(x.rows);
    let n = F::of(d as f64);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<F>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let inv = F::one() / (var + F::of(LN_EPS)).sqrt();
        inv_std.push(inv);
        let xh = xhat.row_mut(r);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
        let yr = &mut y.data[r * d..(r + 1) * d];
        for j in 0..d {
            yr[j] = xhat.data[r * d + j] * gain[j] + bias[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward<F: Scalar>(
    p: &ParamStore<F>,
    g: &mut Grads<F>,
    ids: LayerNormIds,
    cache: &LnCache<F>,
    dy: &Matrix<F>,
) -> Matrix<F> {
    let d = dy.cols;
    let n = F::of(d as f64);
    let gain = p.get(ids.gain).data.clone();
    let mut dx = Matrix::zeros(dy.rows, d);
    {
        let gg = g.get_mut(ids.gain);
        for r in 0..dy.rows {
            for j in 0..d {
                gg.data[j] += dy.data[r * d + j] * cache.xhat.data[r * d + j];
            }
        }
    }
    accumulate_bias(g.get_mut(ids.bias), dy);
    for r in 0..dy.rows {
        let xh = cache.xhat.row(r);
        let dyr = dy.row(r);
        let mut sum = F::zero();
        let mut sum_x = F::zero();
        for j in 0..d {
            let dxh = dyr[j] * gain[j];
            sum += dxh;
            sum_x += dxh * xh[j];
        }
        let inv = cache.inv_std[r];
        let out = dx.row_mut(r);
        for j in 0..d {
            let dxh = dyr[j] * gain[j];
            out[j] = inv * (dxh - sum / n - xh[j] * sum_x / n);
        }
    }
    dx
}

fn linear<F: Scalar>(p: &ParamStore<F>, ids: LinearIds, x: &Matrix<F>) -> Matrix<F> {
    let mut y = x.matmul(p.get(ids.w));
    add_bias(&mut y, p.get(ids.b));
    y
}

fn linear_backward<F: Scalar>(
    p: &ParamStore<F>,
    g: &mut Grads<F>,
    ids: LinearIds,
    x: &Matrix<F>,
    dy: &Matrix<F>,
) -> Matrix<F> {
    g.accumulate(ids.w, &x.t_matmul(dy));
    accumulate_bias(g.get_mut(ids.b), dy);
    dy.matmul_t(p.get(ids.w))
}

fn relu<F: Scalar>(x: &Matrix<F>) -> Matrix<F> {
    Matrix { rows: x.rows, cols: x.cols, data: x.data.iter().map(|&v| v.max(F::zero())).collect() }
}

fn dropout<F: Scalar>(x: &mut Matrix<F>, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Option<Vec<F>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = F::of(1.0 / (1.0 - rate));
    let mask: Vec<F> = x.data.iter().map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep }).collect();
    for (v, m) in x.data.iter_mut().zip(&mask) {
        *v *= *m;
    }
    Some(mask)
}

fn dropout_backward<F: Scalar>(dy: &Matrix<F>, mask: &Option<Vec<F>>) -> Matrix<F> {
    match mask {
        None => dy.clone(),
        Some(m) => Matrix { rows: dy.rows, cols: dy.cols, data: dy.data.iter().zip(m).map(|(a, b)| *a * *b).collect() },
    }
}

/// Cross-attention keys and values of every decoder layer for one source.
#[derive(Clone, Debug)]
pub struct EncoderMemory<F> {
    pub states: Matrix<F>,
    keys: Vec<Matrix<F>>,
    values: Vec<Matrix<F>>,
}

/// Self-attention cache of one partial hypothesis.
#[derive(Clone, Debug)]
pub struct DecoderState<F> {
    len: usize,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
}

impl<F> DecoderState<F> {
    /// Number of tokens fed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl<F: Scalar> Transformer<F> {
    /// Fresh model with scaled-uniform weights drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (params, layout) = init_params(&config, &mut rng);
        let pe = positional_encoding_table(config.max_len, config.d_model);
        Ok(Transformer { config, layout, params, pe })
    }

    /// Model with the given parameter values; names and shapes must match.
    pub fn from_params(config: ModelConfig, params: ParamStore<F>) -> Result<Self, ModelError> {
        let mut model = Self::new(config)?;
        if model.params.names() != params.names() {
            return Err(ModelError::Shape("parameter names differ from the configuration".into()));
        }
        for (a, b) in model.params.tensors().iter().zip(params.tensors()) {
            if (a.rows, a.cols) != (b.rows, b.cols) {
                return Err(ModelError::Shape("parameter shapes differ from the configuration".into()));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn cast<G: Scalar>(&self) -> Transformer<G> {
        Transformer {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
            pe: self.pe.cast(),
        }
    }

    fn check_ids(&self, ids: &[usize], vocab: usize, what: &str) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::Shape(format!("empty {what} sequence")));
        }
        if ids.len() > self.config.max_len {
            return Err(ModelError::Range(format!("{what} length {} exceeds max_len {}", ids.len(), self.config.max_len)));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(ModelError::Range(format!("{what} id {bad} outside vocabulary of {vocab}")));
        }
        Ok(())
    }

    fn embed(&self, table: usize, ids: &[usize], positions: &[usize]) -> Matrix<F> {
        let d = self.config.d_model;
        let scale = F::of((d as f64).sqrt());
        let emb = self.params.get(table);
        let mut x = Matrix::zeros(ids.len(), d);
        for (r, (&id, &pos)) in ids.iter().zip(positions).enumerate() {
            let out = x.row_mut(r);
            let e = emb.row(id);
            for j in 0..d {
                out[j] = e[j] * scale;
            }
            if self.config.positional_encoding {
                for (o, &pe) in out.iter_mut().zip(self.pe.row(pos)) {
                    *o += pe;
                }
            }
        }
        x
    }

    fn run(&self, batch: &[(&[usize], &[usize])], mut rng: Option<&mut ChaCha8Rng>) -> Trace<F> {
        let h = self.config.n_heads;
        let rate = self.config.dropout;
        let srcs: Vec<&[usize]> = batch.iter().map(|b| b.0).collect();
        let tgts: Vec<&[usize]> = batch.iter().map(|b| b.1).collect();
        let (src_ids, src_pos, src_ranges) = pack(&srcs);
        let (tgt_ids, tgt_pos, tgt_ranges) = pack(&tgts);
        let self_spans_src: Vec<Span> = src_ranges.iter().map(|r| Span { queries: r.clone(), keys: r.clone() }).collect();
        let self_spans_tgt: Vec<Span> = tgt_ranges.iter().map(|r| Span { queries: r.clone(), keys: r.clone() }).collect();
        let cross_spans: Vec<Span> =
            tgt_ranges.iter().zip(&src_ranges).map(|(t, s)| Span { queries: t.clone(), keys: s.clone() }).collect();

        let mut x = self.embed(self.layout.src_embedding, &src_ids, &src_pos);
        let src_drop = dropout(&mut x, rate, rng.as_deref_mut());
        let mut encoder = Vec::with_capacity(self.layout.encoder.len());
        for ids in &self.layout.encoder {
            let (attn_in, ln_attn) = layer_norm(&self.params, ids.ln_attn, &x);
            let (mut a, attn) = mha_forward(&self.params, &ids.self_attn, h, &attn_in, &attn_in, &self_spans_src, false);
            let attn_drop = dropout(&mut a, rate, rng.as_deref_mut());
            x.add_assign(&a);
            let (ff_in, ln_ff) = layer_norm(&self.params, ids.ln_ff, &x);
            let hidden_pre = linear(&self.params, ids.ff_in, &ff_in);
            let hidden = relu(&hidden_pre);
            let mut f = linear(&self.params, ids.ff_out, &hidden);
            let ff_drop = dropout(&mut f, rate, rng.as_deref_mut());
            x.add_assign(&f);
            encoder.push(EncoderLayerCache { ln_attn, attn_in, attn, attn_drop, ln_ff, ff_in, hidden_pre, hidden, ff_drop });
        }
        let (memory, encoder_norm) = layer_norm(&self.params, self.layout.encoder_norm, &x);

        let mut y = self.embed(self.layout.tgt_embedding, &tgt_ids, &tgt_pos);
        let tgt_drop = dropout(&mut y, rate, rng.as_deref_mut());
        let mut decoder = Vec::with_capacity(self.layout.decoder.len());
        for ids in &self.layout.decoder {
            let (self_in, ln_self) = layer_norm(&self.params, ids.ln_self, &y);
            let (mut a, self_attn) = mha_forward(&self.params, &ids.self_attn, h, &self_in, &self_in, &self_spans_tgt, true);
            let self_drop = dropout(&mut a, rate, rng.as_deref_mut());
            y.add_assign(&a);
            let (cross_in, ln_cross) = layer_norm(&self.params, ids.ln_cross, &y);
            let (mut c, cross_attn) = mha_forward(&self.params, &ids.cross_attn, h, &cross_in, &memory, &cross_spans, false);
            let cross_drop = dropout(&mut c, rate, rng.as_deref_mut());
            y.add_assign(&c);
            let (ff_in, ln_ff) = layer_norm(&self.params, ids.ln_ff, &y);
            let hidden_pre = linear(&self.params, ids.ff_in, &ff_in);
            let hidden = relu(&hidden_pre);
            let mut f = linear(&self.params, ids.ff_out, &hidden);
            let ff_drop = dropout(&mut f, rate, rng.as_deref_mut());
            y.add_assign(&f);
            decoder.push(DecoderLayerCache {
                ln_self,
                self_in,
                self_attn,
                self_drop,
                ln_cross,
                cross_in,
                cross_attn,
                cross_drop,
                ln_ff,
                ff_in,
                hidden_pre,
                hidden,
                ff_drop,
            });
        }
        let (decoded, decoder_norm) = layer_norm(&self.params, self.layout.decoder_norm, &y);
        Trace {
            src_ids,
            tgt_ids,
            src_drop,
            tgt_drop,
            encoder,
            encoder_norm,
            memory,
            decoder,
            decoder_norm,
            decoded,
            self_spans_src,
            self_spans_tgt,
            cross_spans,
        }
    }

    fn backward(&self, trace: &Trace<F>, dlogits: &Matrix<F>) -> Grads<F> {
        let h = self.config.n_heads;
        let p = &self.params;
        let mut g = p.zeros_like();
        let d = self.config.d_model;
        let scale = F::of((d as f64).sqrt());

        let ddecoded = linear_backward(p, &mut g, self.layout.output, &trace.decoded, dlogits);
        let mut dy = layer_norm_backward(p, &mut g, self.layout.decoder_norm, &trace.decoder_norm, &ddecoded);
        let mut dmemory = Matrix::zeros(trace.memory.rows, d);
        for (ids, c) in self.layout.decoder.iter().zip(&trace.decoder).rev() {
            // feed-forward sublayer
            let df = dropout_backward(&dy, &c.ff_drop);
            let mut dhidden = linear_backward(p, &mut g, ids.ff_out, &c.hidden, &df);
            for (dh, &pre) in dhidden.data.iter_mut().zip(&c.hidden_pre.data) {
                if pre <= F::zero() {
                    *dh = F::zero();
                }
            }
            let dff_in = linear_backward(p, &mut g, ids.ff_in, &c.ff_in, &dhidden);
            dy.add_assign(&layer_norm_backward(p, &mut g, ids.ln_ff, &c.ln_ff, &dff_in));
            // cross-attention sublayer
            let dc = dropout_backward(&dy, &c.cross_drop);
            let (dq, dkv) = mha_backward(p, &mut g, &ids.cross_attn, h, &c.cross_attn, &c.cross_in, &trace.memory, &trace.cross_spans, &dc);
            dmemory.add_assign(&dkv);
            dy.add_assign(&layer_norm_backward(p, &mut g, ids.ln_cross, &c.ln_cross, &dq));
            // masked self-attention sublayer
            let da = dropout_backward(&dy, &c.self_drop);
            let (mut dq, dkv) = mha_backward(p, &mut g, &ids.self_attn, h, &c.self_attn, &c.self_in, &c.self_in, &trace.self_spans_tgt, &da);
            dq.add_assign(&dkv);
            dy.add_assign(&layer_norm_backward(p, &mut g, ids.ln_self, &c.ln_self, &dq));
        }
        let dy = dropout_backward(&dy, &trace.tgt_drop);
        scatter_embedding(g.get_mut(self.layout.tgt_embedding), &trace.tgt_ids, &dy, scale);

        let mut dx = layer_norm_backward(p, &mut g, self.layout.encoder_norm, &trace.encoder_norm, &dmemory);
        for (ids, c) in self.layout.encoder.iter().zip(&trace.encoder).rev() {
            let df = dropout_backward(&dx, &c.ff_drop);
            let mut dhidden = linear_backward(p, &mut g, ids.ff_out, &c.hidden, &df);
            for (dh, &pre) in dhidden.data.iter_mut().zip(&c.hidden_pre.data) {
                if pre <= F::zero() {
                    *dh = F::zero();
                }
            }
            let dff_in = linear_backward(p, &mut g, ids.ff_in, &c.ff_in, &dhidden);
            dx.add_assign(&layer_norm_backward(p, &mut g, ids.ln_ff, &c.ln_ff, &dff_in));
            let da = dropout_backward(&dx, &c.attn_drop);
            let (mut dq, dkv) = mha_backward(p, &mut g, &ids.self_attn, h, &c.attn, &c.attn_in, &c.attn_in, &trace.self_spans_src, &da);
            dq.add_assign(&dkv);
            dx.add_assign(&layer_norm_backward(p, &mut g, ids.ln_attn, &c.ln_attn, &dq));
        }
        let dx = dropout_backward(&dx, &trace.src_drop);
        scatter_embedding(g.get_mut(self.layout.src_embedding), &trace.src_ids, &dx, scale);
        g
    }

    fn check_example(&self, source: &[usize], target: &[usize]) -> Result<(), ModelError> {
        self.check_ids(source, self.config.vocab_size_src, "source")?;
        self.check_ids(target, self.config.vocab_size_tgt, "target")
    }

    /// Unnormalised next-token scores for every prefix position.
    pub fn forward(&self, source: &[usize], target_prefix: &[usize]) -> Result<Matrix<F>, ModelError> {
        self.check_example(source, target_prefix)?;
        let trace = self.run(&[(source, target_prefix)], None);
        Ok(linear(&self.params, self.layout.output, &trace.decoded))
    }

    /// Final encoder states (after the closing layer norm).
    pub fn encoder_output(&self, source: &[usize]) -> Result<Matrix<F>, ModelError> {
        self.check_ids(source, self.config.vocab_size_src, "source")?;
        Ok(self.run(&[(source, &[Vocabulary::START][..])], None).memory)
    }

    fn batch_view<'a>(&self, batch: &'a [Example]) -> Result<Vec<(&'a [usize], &'a [usize])>, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Shape("empty batch".into()));
        }
        batch
            .iter()
            .map(|ex| {
                if ex.target.len() < 2 {
                    return Err(ModelError::Shape("target needs at least two tokens".into()));
                }
                let input = &ex.target[..ex.target.len() - 1];
                self.check_example(&ex.source, input)?;
                if let Some(&bad) = ex.target.iter().find(|&&id| id >= self.config.vocab_size_tgt) {
                    return Err(ModelError::Range(format!("target id {bad} outside vocabulary")));
                }
                Ok((ex.source.as_slice(), input))
            })
            .collect()
    }

    fn score(&self, batch: &[Example], trace: &Trace<F>, want_grad: bool) -> (BatchStats, Matrix<F>) {
        let logits = linear(&self.params, self.layout.output, &trace.decoded);
        let labels: Vec<usize> = batch.iter().flat_map(|ex| ex.target[1..].iter().copied()).collect();
        let count = labels.iter().filter(|&&l| l != Vocabulary::PAD).count();
        let mut stats = BatchStats { tokens: count, ..Default::default() };
        let mut dlogits = if want_grad { Matrix::zeros(logits.rows, logits.cols) } else { Matrix::zeros(0, 0) };
        let inv = if count > 0 { 1.0 / count as f64 } else { 0.0 };
        let mut logp = Vec::new();
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label == Vocabulary::PAD {
                continue;
            }
            let row = logits.row(r);
            log_softmax(row, &mut logp);
            loss -= logp[label].to_f64_lossy();
            let best = argmax(row);
            if best == label {
                stats.correct += 1;
            }
            if want_grad {
                let out = dlogits.row_mut(r);
                for (o, &lp) in out.iter_mut().zip(&logp) {
                    *o = lp.exp() * F::of(inv);
                }
                out[label] -= F::of(inv);
            }
        }
        stats.loss = loss * inv;
        (stats, dlogits)
    }

    /// Mean cross-entropy of next-token prediction with teacher forcing,
    /// plus its gradient. Dropout is applied when `rng` is given.
    pub fn loss_and_grads(&self, batch: &[Example], rng: Option<&mut ChaCha8Rng>) -> Result<(BatchStats, Grads<F>), ModelError> {
        let view = self.batch_view(batch)?;
        let trace = self.run(&view, rng);
        let (stats, dlogits) = self.score(batch, &trace, true);
        let grads = self.backward(&trace, &dlogits);
        Ok((stats, grads))
    }

    /// Loss and teacher-forced accuracy without dropout or gradients.
    pub fn evaluate(&self, batch: &[Example]) -> Result<BatchStats, ModelError> {
        let view = self.batch_view(batch)?;
        let trace = self.run(&view, None);
        Ok(self.score(batch, &trace, false).0)
    }

    /// Run the encoder once and precompute cross-attention keys and values.
    pub fn encode_source(&self, source: &[usize]) -> Result<EncoderMemory<F>, ModelError> {
        let states = self.encoder_output(source)?;
        let keys = self.layout.decoder.iter().map(|ids| states.matmul(self.params.get(ids.cross_attn.w_k))).collect();
        let values = self.layout.decoder.iter().map(|ids| states.matmul(self.params.get(ids.cross_attn.w_v))).collect();
        Ok(EncoderMemory { states, keys, values })
    }

    pub fn start_decoder(&self) -> DecoderState<F> {
        let n = self.layout.decoder.len();
        DecoderState { len: 0, keys: vec![Vec::new(); n], values: vec![Vec::new(); n] }
    }

    /// Feed one token to each state and return next-token logits, one row
    /// per state. Equivalent to the last row of [`Transformer::forward`].
    pub fn decode_step(
        &self,
        memory: &EncoderMemory<F>,
        states: &mut [DecoderState<F>],
        tokens: &[usize],
    ) -> Result<Matrix<F>, ModelError> {
        assert_eq!(states.len(), tokens.len(), "one token per decoder state");
        let d = self.config.d_model;
        let h = self.config.n_heads;
        let dk = d / h;
        let scale = F::one() / F::of(dk as f64).sqrt();
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size_tgt) {
            return Err(ModelError::Range(format!("target id {bad} outside vocabulary")));
        }
        if let Some(s) = states.iter().find(|s| s.len >= self.config.max_len) {
            return Err(ModelError::Range(format!("position {} exceeds max_len {}", s.len, self.config.max_len)));
        }
        let positions: Vec<usize> = states.iter().map(|s| s.len).collect();
        let mut y = self.embed(self.layout.tgt_embedding, tokens, &positions);
        let p = &self.params;
        let mut scores = Vec::new();
        for (l, ids) in self.layout.decoder.iter().enumerate() {
            let (a, _) = layer_norm(p, ids.ln_self, &y);
            let q = a.matmul(p.get(ids.self_attn.w_q));
            let k = a.matmul(p.get(ids.self_attn.w_k));
            let v = a.matmul(p.get(ids.self_attn.w_v));
            let mut concat = Matrix::zeros(states.len(), d);
            for (i, state) in states.iter_mut().enumerate() {
                state.keys[l].extend_from_slice(k.row(i));
                state.values[l].extend_from_slice(v.row(i));
                let n = state.len + 1;
                attend_row(q.row(i), &state.keys[l], &state.values[l], n, h, dk, scale, &mut scores, concat.row_mut(i));
            }
            let mut out = concat.matmul(p.get(ids.self_attn.w_o));
            add_bias(&mut out, p.get(ids.self_attn.b_o));
            y.add_assign(&out);

            let (c, _) = layer_norm(p, ids.ln_cross, &y);
            let q = c.matmul(p.get(ids.cross_attn.w_q));
            let mut concat = Matrix::zeros(states.len(), d);
            let n_src = memory.states.rows;
            for i in 0..states.len() {
                attend_row(q.row(i), &memory.keys[l].data, &memory.values[l].data, n_src, h, dk, scale, &mut scores, concat.row_mut(i));
            }
            let mut out = concat.matmul(p.get(ids.cross_attn.w_o));
            add_bias(&mut out, p.get(ids.cross_attn.b_o));
            y.add_assign(&out);

            let (e, _) = layer_norm(p, ids.ln_ff, &y);
            let hidden = relu(&linear(p, ids.ff_in, &e));
            y.add_assign(&linear(p, ids.ff_out, &hidden));
        }
        for s in states.iter_mut() {
            s.len += 1;
        }
        let (out, _) = layer_norm(p, self.layout.decoder_norm, &y);
        Ok(linear(p, self.layout.output, &out))
    }
}

/// Multi-head attention of one query row over `n` cached key/value rows.
#[allow(clippy::too_many_arguments)]
fn attend_row<F: Scalar>(
    q: &[F],
    keys: &[F],
    values: &[F],
    n: usize,
    heads: usize,
    dk: usize,
    scale: F,
    scores: &mut Vec<F>,
    out: &mut [F],
) {
    let d = heads * dk;
    for hd in 0..heads {
        let qh = &q[hd * dk..(hd + 1) * dk];
        scores.clear();
        for j in 0..n {
            let kh = &keys[j * d + hd * dk..j * d + (hd + 1) * dk];
            scores.push(qh.iter().zip(kh).map(|(&a, &b)| a * b).sum::<F>() * scale);
        }
        softmax_in_place(scores);
        let oh = &mut out[hd * dk..(hd + 1) * dk];
        for (j, &w) in scores.iter().enumerate() {
            let vh = &values[j * d + hd * dk..j * d + (hd + 1) * dk];
            for (o, &v) in oh.iter_mut().zip(vh) {
                *o += w * v;
            }
        }
    }
}

fn scatter_embedding<F: Scalar>(table: &mut Matrix<F>, ids: &[usize], dx: &Matrix<F>, scale: F) {
    for (r, &id) in ids.iter().enumerate() {
        let src = dx.row(r);
        for (t, &v) in table.row_mut(id).iter_mut().zip(src) {
            *t += v * scale;
        }
    }
}

pub fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
