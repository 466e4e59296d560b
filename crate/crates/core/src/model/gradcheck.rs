//! Central finite-difference verification of analytic gradients.

use super::params::{Grads, ParamStore};
use super::tensor::{log_softmax, Matrix};
use super::transformer::{Example, Transformer};

/// A scalar loss of a parameter set with an analytic gradient.
pub trait Objective {
    fn params(&self) -> &ParamStore<f64>;
    fn params_mut(&mut self) -> &mut ParamStore<f64>;
    fn loss(&self) -> f64;
    fn loss_and_grads(&self) -> (f64, Grads<f64>);
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare every analytic partial derivative with
/// `(f(θ+ε) − f(θ−ε)) / 2ε` and report the largest relative error.
pub fn grad_check(objective: &mut impl Objective, eps: f64) -> GradCheckReport {
    let (_, grads) = objective.loss_and_grads();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, analytic: 0.0, numeric: 0.0, checked: 0 };
    for id in 0..grads.len() {
        for i in 0..grads.get(id).data.len() {
            let original = objective.params().get(id).data[i];
            objective.params_mut().get_mut(id).data[i] = original + eps;
            let plus = objective.loss();
            objective.params_mut().get_mut(id).data[i] = original - eps;
            let minus = objective.loss();
            objective.params_mut().get_mut(id).data[i] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.get(id).data[i];
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((grads.name(id).to_string(), i));
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    report
}

/// Full encoder-decoder loss on a fixed batch, without dropout.
pub struct TransformerObjective {
    pub model: Transformer<f64>,
    pub batch: Vec<Example>,
}

impl Objective for TransformerObjective {
    fn params(&self) -> &ParamStore<f64> {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.model.params
    }

    fn loss(&self) -> f64 {
        self.model.evaluate(&self.batch).expect("valid batch").loss
    }

    fn loss_and_grads(&self) -> (f64, Grads<f64>) {
        let (stats, grads) = self.model.loss_and_grads(&self.batch, None).expect("valid batch");
        (stats.loss, grads)
    }
}

/// Embedding lookup followed by an output matrix and softmax cross-entropy:
/// `mean_i −log softmax(E[x_i] · W)[y_i]`.
pub struct ToyHead {
    pub params: ParamStore<f64>,
    pub inputs: Vec<usize>,
    pub labels: Vec<usize>,
}

impl ToyHead {
    pub fn new(embedding: Matrix<f64>, output: Matrix<f64>, inputs: Vec<usize>, labels: Vec<usize>) -> Self {
        assert_eq!(embedding.cols, output.rows);
        assert_eq!(inputs.len(), labels.len());
        let mut params = ParamStore::new();
        params.push("embedding".into(), embedding);
        params.push("output".into(), output);
        ToyHead { params, inputs, labels }
    }

    fn hidden(&self) -> Matrix<f64> {
        let e = self.params.get(0);
        Matrix::from_rows(&self.inputs.iter().map(|&i| e.row(i).to_vec()).collect::<Vec<_>>())
    }
}

impl Objective for ToyHead {
    fn params(&self) -> &ParamStore<f64> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.params
    }

    fn loss(&self) -> f64 {
        self.loss_and_grads().0
    }

    fn loss_and_grads(&self) -> (f64, Grads<f64>) {
        let h = self.hidden();
        let w = self.params.get(1);
        let logits = h.matmul(w);
        let n = self.labels.len() as f64;
        let mut dlogits = Matrix::zeros(logits.rows, logits.cols);
        let mut loss = 0.0;
        let mut lp = Vec::new();
        for (r, &y) in self.labels.iter().enumerate() {
            log_softmax(logits.row(r), &mut lp);
            loss -= lp[y];
            for (d, &l) in dlogits.row_mut(r).iter_mut().zip(&lp) {
                *d = l.exp() / n;
            }
            dlogits.row_mut(r)[y] -= 1.0 / n;
        }
        let mut grads = self.params.zeros_like();
        let dh = dlogits.matmul_t(w);
        for (r, &i) in self.inputs.iter().enumerate() {
            for (g, &d) in grads.get_mut(0).row_mut(i).iter_mut().zip(dh.row(r)) {
                *g += d;
            }
        }
        *grads.get_mut(1) = h.t_matmul(&dlogits);
        (loss / n, grads)
    }
}
