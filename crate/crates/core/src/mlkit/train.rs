//! Softmax cross-entropy, backpropagation and SGD with classical momentum.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::gemm::{gemm, MatRef};
use super::model::{affine, forward_rows, relu_in_place, ModelParams};
use super::MlError;

/// Training hyperparameters. Defaults are lr 0.01, momentum 0.5, batch 64,
/// 20 rounds of 5 epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: u32,
    pub epochs_per_round: u32,
    pub rounds: u32,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            learning_rate: 0.01,
            momentum: 0.5,
            batch_size: 64,
            epochs_per_round: 5,
            rounds: 20,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), MlError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MlError::InvalidHyperparams(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        self.validate_kernel()
    }

    /// Checks the kernel needs; a zero learning rate is tolerated here.
    fn validate_kernel(&self) -> Result<(), MlError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(MlError::InvalidHyperparams(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(MlError::InvalidHyperparams(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(MlError::InvalidHyperparams("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the
/// logits. Uses the max-shift trick, so any finite logits give a finite loss.
pub fn softmax_cross_entropy(logits: &[f32], labels: &[u8], classes: usize) -> (f32, Vec<f32>) {
    let batch = labels.len();
    debug_assert_eq!(logits.len(), batch * classes);
    let mut grad = vec![0.0f32; logits.len()];
    let mut total = 0.0f64;
    let inv_batch = 1.0 / batch as f32;
    for (row, (&label, g)) in logits
        .chunks(classes)
        .zip(labels.iter().zip(grad.chunks_mut(classes)))
    {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for (gi, &z) in g.iter_mut().zip(row) {
            let e = (z - max).exp();
            *gi = e;
            sum += e;
        }
        let label = label as usize;
        let log_sum = sum.ln();
        total += (log_sum - (row[label] - max)) as f64;
        for gi in g.iter_mut() {
            *gi = *gi / sum * inv_batch;
        }
        g[label] -= inv_batch;
    }
    ((total / batch as f64) as f32, grad)
}

/// Loss and parameter gradients for one batch of rows.
pub fn loss_and_grad(
    params: &ModelParams,
    inputs: &[f32],
    labels: &[u8],
) -> (f32, ModelParams) {
    let mut scratch = Grads::zeros(params);
    let loss = backprop(params, inputs, labels, &mut scratch);
    (loss, scratch.0)
}

struct Grads(ModelParams);

impl Grads {
    fn zeros(params: &ModelParams) -> Self {
        Grads(ModelParams::zeros(params.arch()))
    }
}

fn backprop(params: &ModelParams, inputs: &[f32], labels: &[u8], grads: &mut Grads) -> f32 {
    let batch = labels.len();
    let layers = params.layers();
    let last = layers.len() - 1;

    // Activations feeding each layer; acts[0] is the input batch.
    let mut acts: Vec<Vec<f32>> = Vec::with_capacity(layers.len());
    acts.push(inputs.to_vec());
    let mut logits = Vec::new();
    for (idx, layer) in layers.iter().enumerate() {
        let mut z = affine(layer, &acts[idx], batch);
        if idx < last {
            relu_in_place(&mut z);
            acts.push(z);
        } else {
            logits = z;
        }
    }

    let (loss, mut delta) = softmax_cross_entropy(&logits, labels, params.arch().output());

    for idx in (0..layers.len()).rev() {
        let layer = &layers[idx];
        let g = &mut grads.0.layers_mut()[idx];
        // dW = deltaᵀ · act
        gemm(
            1.0,
            MatRef::transposed(&delta, batch, layer.output),
            MatRef::row_major(&acts[idx], batch, layer.input),
            0.0,
            &mut g.weight,
        );
        g.bias.iter_mut().for_each(|b| *b = 0.0);
        for row in delta.chunks(layer.output) {
            for (b, d) in g.bias.iter_mut().zip(row) {
                *b += d;
            }
        }
        if idx > 0 {
            let mut prev = vec![0.0f32; batch * layer.input];
            gemm(
                1.0,
                MatRef::row_major(&delta, batch, layer.output),
                MatRef::row_major(&layer.weight, layer.output, layer.input),
                0.0,
                &mut prev,
            );
            for (p, &a) in prev.iter_mut().zip(&acts[idx]) {
                if a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
    loss
}

/// Result of [`train_epochs`].
#[derive(Debug, Clone)]
pub struct Trained {
    pub params: ModelParams,
    /// Mean batch loss of each epoch.
    pub epoch_loss: Vec<f32>,
}

/// Runs `epochs` passes of mini-batch SGD with momentum
/// (`v ← μv + ∇`, `θ ← θ − η·v`). The velocity starts at zero on every call.
/// The shuffle order is drawn from `seed`.
pub fn train_epochs(
    params: &ModelParams,
    data: &Dataset,
    hp: &Hyperparams,
    epochs: u32,
    seed: u64,
) -> Result<Trained, MlError> {
    hp.validate_kernel()?;
    if data.is_empty() {
        return Err(MlError::EmptyDataset);
    }
    if data.dim() != params.arch().input() || data.max_label() as usize >= params.arch().output() {
        return Err(MlError::ShapeMismatch(format!(
            "dataset of width {} (max label {}) does not fit arch {}",
            data.dim(),
            data.max_label(),
            params.arch()
        )));
    }
    let mut params = params.clone();
    let mut velocity = ModelParams::zeros(params.arch());
    let mut grads = Grads::zeros(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let dim = data.dim();
    let batch_size = hp.batch_size as usize;
    let mut xbuf = Vec::with_capacity(batch_size * dim);
    let mut ybuf = Vec::with_capacity(batch_size);
    let mut epoch_loss = Vec::with_capacity(epochs as usize);

    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            xbuf.clear();
            ybuf.clear();
            for &i in chunk {
                xbuf.extend_from_slice(data.image(i));
                ybuf.push(data.label(i));
            }
            let loss = backprop(&params, &xbuf, &ybuf, &mut grads);
            if !loss.is_finite() {
                return Err(MlError::NonFiniteLoss { epoch, batch: batches });
            }
            sum += loss as f64;
            batches += 1;
            for ((p, v), g) in params
                .buffers_mut()
                .zip(velocity.buffers_mut())
                .zip(grads.0.buffers())
            {
                for ((pi, vi), &gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = hp.momentum * *vi + gi;
                    *pi -= hp.learning_rate * *vi;
                }
            }
        }
        epoch_loss.push((sum / batches as f64) as f32);
    }
    Ok(Trained { params, epoch_loss })
}

/// Fraction of samples whose argmax logit equals the label; ties resolve to
/// the lowest class index.
pub fn evaluate(params: &ModelParams, test: &Dataset) -> Result<f32, MlError> {
    if test.is_empty() {
        return Err(MlError::EmptyDataset);
    }
    if test.dim() != params.arch().input() {
        return Err(MlError::ShapeMismatch(format!(
            "dataset of width {} does not fit arch {}",
            test.dim(),
            params.arch()
        )));
    }
    const CHUNK: usize = 500;
    let classes = params.arch().output();
    let mut correct = 0usize;
    let mut start = 0;
    while start < test.len() {
        let end = (start + CHUNK).min(test.len());
        let rows = test.rows_block(start, end);
        let logits = forward_rows(params, &rows, end - start);
        for (offset, row) in logits.chunks(classes).enumerate() {
            if argmax(row) == test.label(start + offset) as usize {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f32 / test.len() as f32)
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
