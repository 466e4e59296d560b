//! Training loop: batching, optimisation steps, evaluation and logging.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{Adam, AdamConfig};
use super::tensor::Scalar;
use super::transformer::{BatchStats, Example, Transformer};
use super::ModelError;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seeds batch order and dropout masks.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 2000, batch_size: 16, adam: AdamConfig::default(), seed: 1 }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub learning_rate: f64,
    pub wall_ms: u128,
    pub accuracy: f64,
}

impl StepRecord {
    pub const TSV_HEADER: &'static str = "step\tloss\tlearning_rate\twall_ms";

    pub fn tsv_line(&self) -> String {
        format!("{}\t{:.6}\t{:.6e}\t{}", self.step, self.loss, self.learning_rate, self.wall_ms)
    }
}

/// Indices of the examples used at 1-based `step`: each epoch is a fresh
/// shuffle derived from `seed` and the epoch number, so any step can be
/// reproduced without replaying earlier ones.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: usize) -> Vec<usize> {
    assert!(n > 0 && batch_size > 0);
    let start = (step - 1) * batch_size;
    let mut out = Vec::with_capacity(batch_size);
    let mut epoch = usize::MAX;
    let mut order: Vec<usize> = Vec::new();
    for k in start..start + batch_size {
        let e = k / n;
        if e != epoch {
            epoch = e;
            order = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(e as u64);
            order.shuffle(&mut rng);
        }
        let idx = order[k % n];
        if out.contains(&idx) {
            break;
        }
        out.push(idx);
    }
    out
}

pub struct Trainer<F> {
    pub model: Transformer<F>,
    pub optimizer: Adam<F>,
    pub config: TrainConfig,
    started: Instant,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(model: Transformer<F>, config: TrainConfig) -> Self {
        let optimizer = Adam::new(config.adam.clone(), &model.params);
        Trainer { model, optimizer, config, started: Instant::now() }
    }

    /// Continue from a saved optimiser state.
    pub fn resume(model: Transformer<F>, optimizer: Adam<F>, config: TrainConfig) -> Self {
        Trainer { model, optimizer, config, started: Instant::now() }
    }

    pub fn step(&self) -> usize {
        self.optimizer.step
    }

    /// One optimiser update on `batch`; fails on a non-finite loss or gradient.
    pub fn train_step(&mut self, batch: &[Example]) -> Result<StepRecord, ModelError> {
        let step = self.optimizer.step + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x9e37_79b9_7f4a_7c15);
        rng.set_stream(step as u64);
        let (stats, mut grads) = self.model.loss_and_grads(batch, Some(&mut rng))?;
        if !stats.loss.is_finite() || !grads.is_finite() {
            return Err(ModelError::Divergence { step, loss: stats.loss });
        }
        let d_model = self.model.config.d_model;
        let lr = self.optimizer.update(&mut self.model.params, &mut grads, d_model);
        if !self.model.params.is_finite() {
            return Err(ModelError::Divergence { step, loss: f64::NAN });
        }
        Ok(StepRecord {
            step,
            loss: stats.loss,
            learning_rate: lr,
            wall_ms: self.started.elapsed().as_millis(),
            accuracy: stats.accuracy(),
        })
    }

    /// Train until `config.steps` updates have been applied in total,
    /// calling `on_step` after each one.
    pub fn run(
        &mut self,
        data: &[Example],
        mut on_step: impl FnMut(&StepRecord, &Self),
    ) -> Result<Option<StepRecord>, ModelError> {
        if data.is_empty() {
            return Err(ModelError::Shape("no training examples".into()));
        }
        let mut last = None;
        while self.optimizer.step < self.config.steps {
            let idx = batch_indices(data.len(), self.config.batch_size, self.config.seed, self.optimizer.step + 1);
            let batch: Vec<Example> = idx.iter().map(|&i| data[i].clone()).collect();
            let record = self.train_step(&batch)?;
            on_step(&record, self);
            last = Some(record);
        }
        Ok(last)
    }
}

/// Teacher-forced loss and accuracy over `data`, without dropout.
pub fn evaluate<F: Scalar>(model: &Transformer<F>, data: &[Example], batch_size: usize) -> Result<BatchStats, ModelError> {
    let mut total = BatchStats::default();
    let mut loss_sum = 0.0;
    for chunk in data.chunks(batch_size.max(1)) {
        let s = model.evaluate(chunk)?;
        loss_sum += s.loss * s.tokens as f64;
        total.tokens += s.tokens;
        total.correct += s.correct;
    }
    total.loss = if total.tokens > 0 { loss_sum / total.tokens as f64 } else { 0.0 };
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 7;
        let mut seen = Vec::new();
        for step in 1..=7 {
            seen.extend(batch_indices(n, 1, 3, step));
        }
        seen.sort();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn batches_are_reproducible_and_distinct() {
        for step in 1..20 {
            let a = batch_indices(10, 4, 5, step);
            assert_eq!(a, batch_indices(10, 4, 5, step));
            let mut d = a.clone();
            d.sort();
            d.dedup();
            assert_eq!(d.len(), a.len());
        }
    }

    #[test]
    fn oversized_batch_is_whole_dataset() {
        let mut b = batch_indices(3, 8, 1, 1);
        b.sort();
        assert_eq!(b, vec![0, 1, 2]);
    }
}
