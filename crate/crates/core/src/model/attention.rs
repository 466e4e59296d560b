//! Scaled dot-product attention and its multi-head form.

use std::ops::Range;

use super::params::{AttnIds, Grads, ParamStore};
use super::tensor::{gemm, softmax_in_place, Matrix, Scalar, View};
use super::ModelError;

/// `softmax(Q Kᵀ / √d_k) V`, with `mask[i][j] == false` excluding key `j`
/// from query `i`.
pub fn attention<F: Scalar>(
    q: &Matrix<F>,
    k: &Matrix<F>,
    v: &Matrix<F>,
    mask: Option<&[Vec<bool>]>,
) -> Result<Matrix<F>, ModelError> {
    if q.cols != k.cols {
        return Err(ModelError::Shape(format!("Q has width {}, K has width {}", q.cols, k.cols)));
    }
    if k.rows != v.rows {
        return Err(ModelError::Shape(format!("K has {} rows, V has {}", k.rows, v.rows)));
    }
    if let Some(mask) = mask {
        if mask.len() != q.rows || mask.iter().any(|r| r.len() != k.rows) {
            return Err(ModelError::Shape(format!("mask must be {} x {}", q.rows, k.rows)));
        }
    }
    let weights = attention_weights(q, k, mask);
    Ok(weights.matmul(v))
}

/// The softmax weight matrix of [`attention`].
pub fn attention_weights<F: Scalar>(q: &Matrix<F>, k: &Matrix<F>, mask: Option<&[Vec<bool>]>) -> Matrix<F> {
    let scale = F::one() / F::of(q.cols as f64).sqrt();
    let mut scores = q.matmul_t(k);
    for i in 0..scores.rows {
        let row = scores.row_mut(i);
        for (j, s) in row.iter_mut().enumerate() {
            let allowed = mask.map_or(true, |m| m[i][j]);
            *s = if allowed { *s * scale } else { F::neg_infinity() };
        }
        softmax_in_place(row);
    }
    scores
}

/// Query and key/value row ranges of one attention problem in a packed batch.
#[derive(Clone, Debug)]
pub struct Span {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
}

pub(crate) struct AttnCache<F> {
    q: Matrix<F>,
    k: Matrix<F>,
    v: Matrix<F>,
    /// Softmax weights per (span, head), row-major `n_q × n_kv`.
    probs: Vec<Vec<F>>,
    concat: Matrix<F>,
}

/// Multi-head attention over a packed batch. `xq` supplies queries and `xkv`
/// keys/values; `spans` pairs each sequence's query rows with its key rows.
pub(crate) fn mha_forward<F: Scalar>(
    p: &ParamStore<F>,
    ids: &AttnIds,
    n_heads: usize,
    xq: &Matrix<F>,
    xkv: &Matrix<F>,
    spans: &[Span],
    causal: bool,
) -> (Matrix<F>, AttnCache<F>) {
    let d = xq.cols;
    let dk = d / n_heads;
    let q = xq.matmul(p.get(ids.w_q));
    let k = xkv.matmul(p.get(ids.w_k));
    let v = xkv.matmul(p.get(ids.w_v));
    let scale = F::one() / F::of(dk as f64).sqrt();
    let mut concat = Matrix::zeros(xq.rows, d);
    let mut probs = Vec::with_capacity(spans.len() * n_heads);
    for span in spans {
        let nq = span.queries.len();
        let nk = span.keys.len();
        for h in 0..n_heads {
            let mut s = vec![F::zero(); nq * nk];
            gemm(
                scale,
                &q.data,
                View::block(d, span.queries.start, nq, h * dk, dk),
                &k.data,
                View::block(d, span.keys.start, nk, h * dk, dk).t(),
                F::zero(),
                &mut s,
                View::dense(nq, nk),
            );
            for i in 0..nq {
                let row = &mut s[i * nk..(i + 1) * nk];
                if causal {
                    row[i + 1..].iter_mut().for_each(|x| *x = F::neg_infinity());
                }
                softmax_in_place(row);
            }
            gemm(
                F::one(),
                &s,
                View::dense(nq, nk),
                &v.data,
                View::block(d, span.keys.start, nk, h * dk, dk),
                F::zero(),
                &mut concat.data,
                View::block(d, span.queries.start, nq, h * dk, dk),
            );
            probs.push(s);
        }
    }
    let mut out = concat.matmul(p.get(ids.w_o));
    add_bias(&mut out, p.get(ids.b_o));
    (out, AttnCache { q, k, v, probs, concat })
}

/// Backward pass; returns gradients with respect to `xq` and `xkv`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn mha_backward<F: Scalar>(
    p: &ParamStore<F>,
    g: &mut Grads<F>,
    ids: &AttnIds,
    n_heads: usize,
    cache: &AttnCache<F>,
    xq: &Matrix<F>,
    xkv: &Matrix<F>,
    spans: &[Span],
    dout: &Matrix<F>,
) -> (Matrix<F>, Matrix<F>) {
    let d = xq.cols;
    let dk = d / n_heads;
    let scale = F::one() / F::of(dk as f64).sqrt();

    g.accumulate(ids.w_o, &cache.concat.t_matmul(dout));
    accumulate_bias(g.get_mut(ids.b_o), dout);
    let dconcat = dout.matmul_t(p.get(ids.w_o));

    let mut dq = Matrix::zeros(cache.q.rows, d);
    let mut dk_m = Matrix::zeros(cache.k.rows, d);
    let mut dv = Matrix::zeros(cache.v.rows, d);
    let mut probs = cache.probs.iter();
    for span in spans {
        let nq = span.queries.len();
        let nk = span.keys.len();
        for h in 0..n_heads {
            let pm = probs.next().expect("one probability block per span and head");
            let o_block = View::block(d, span.queries.start, nq, h * dk, dk);
            let kv_block = View::block(d, span.keys.start, nk, h * dk, dk);
            // dV += Pᵀ dO
            gemm(F::one(), pm, View::dense(nq, nk).t(), &dconcat.data, o_block, F::one(), &mut dv.data, kv_block);
            // dP = dO Vᵀ
            let mut ds = vec![F::zero(); nq * nk];
            gemm(F::one(), &dconcat.data, o_block, &cache.v.data, kv_block.t(), F::zero(), &mut ds, View::dense(nq, nk));
            // dS = P ⊙ (dP − Σ_j dP·P)
            for i in 0..nq {
                let prow = &pm[i * nk..(i + 1) * nk];
                let drow = &mut ds[i * nk..(i + 1) * nk];
                let dot: F = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                for (dx, &px) in drow.iter_mut().zip(prow) {
                    *dx = px * (*dx - dot);
                }
            }
            gemm(scale, &ds, View::dense(nq, nk), &cache.k.data, kv_block, F::one(), &mut dq.data, o_block);
            gemm(scale, &ds, View::dense(nq, nk).t(), &cache.q.data, o_block, F::one(), &mut dk_m.data, kv_block);
        }
    }

    g.accumulate(ids.w_q, &xq.t_matmul(&dq));
    g.accumulate(ids.w_k, &xkv.t_matmul(&dk_m));
    g.accumulate(ids.w_v, &xkv.t_matmul(&dv));
    let dxq = dq.matmul_t(p.get(ids.w_q));
    let mut dxkv = dk_m.matmul_t(p.get(ids.w_k));
    dxkv.add_assign(&dv.matmul_t(p.get(ids.w_v)));
    (dxq, dxkv)
}

pub(crate) fn add_bias<F: Scalar>(x: &mut Matrix<F>, bias: &Matrix<F>) {
    for r in 0..x.rows {
        for (a, b) in x.row_mut(r).iter_mut().zip(&bias.data) {
            *a += *b;
        }
    }
}

pub(crate) fn accumulate_bias<F: Scalar>(gb: &mut Matrix<F>, dy: &Matrix<F>) {
    for r in 0..dy.rows {
        for (a, b) in gb.data.iter_mut().zip(dy.row(r)) {
            *a += *b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn single_key_returns_its_value() {
        let out = attention(&m(&[&[0.3, -1.2]]), &m(&[&[2.0, 0.5]]), &m(&[&[5.0]]), None).unwrap();
        assert_eq!(out.data, vec![5.0]);
    }

    #[test]
    fn equal_scores_average_values() {
        let v = m(&[&[1.0, 4.0], &[3.0, -2.0]]);
        let out = attention(&m(&[&[0.0, 0.0]]), &m(&[&[1.0, 2.0], &[-3.0, 0.5]]), &v, None).unwrap();
        assert_eq!(out.data, vec![2.0, 1.0]);
    }

    #[test]
    fn two_key_hand_computation() {
        let out = attention(&m(&[&[1.0, 0.0]]), &m(&[&[1.0, 0.0], &[0.0, 1.0]]), &m(&[&[1.0], &[0.0]]), None).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let expected = s.exp() / (s.exp() + 1.0);
        assert!((out.data[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn mask_excludes_keys() {
        let v = m(&[&[1.0], &[100.0]]);
        let mask = vec![vec![true, false]];
        let out = attention(&m(&[&[1.0]]), &m(&[&[1.0], &[5.0]]), &v, Some(&mask)).unwrap();
        assert_eq!(out.data, vec![1.0]);
    }

    #[test]
    fn shape_errors() {
        let q = m(&[&[1.0, 0.0]]);
        assert!(matches!(attention(&q, &m(&[&[1.0]]), &m(&[&[1.0]]), None), Err(ModelError::Shape(_))));
        assert!(matches!(attention(&q, &m(&[&[1.0, 0.0]]), &m(&[&[1.0], &[2.0]]), None), Err(ModelError::Shape(_))));
        let bad_mask = vec![vec![true, true]];
        assert!(matches!(attention(&q, &q, &m(&[&[1.0]]), Some(&bad_mask)), Err(ModelError::Shape(_))));
    }
}
