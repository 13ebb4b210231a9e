//! Deterministic training and inference for a small feed-forward softmax
//! classifier.
//!
//! Everything here is a pure function of its arguments, including the
//! [`RngKey`]: repeated calls are bit-identical. Gradient accumulation is
//! sequential over the batch and layer-major over parameters, so determinism
//! is exact rather than tolerance-based.

pub mod checkpoint;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::{RngKey, Stream};

pub use checkpoint::Checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Shape of the classifier. The flat parameter layout is layer-major: for
/// each affine layer, the `out x in` weight matrix row-major, then `out`
/// biases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl ModelArch {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize, activation: Activation) -> Result<Self> {
        let arch = ModelArch {
            input_dim,
            hidden_dims,
            num_classes,
            activation,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("all layer dims must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be >= 2"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.num_classes));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| (i + 1) * o).sum()
    }
}

/// Flat parameter vector tied to its architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    arch: ModelArch,
    values: Vec<f64>,
}

impl ModelWeights {
    pub fn from_values(arch: ModelArch, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if values.len() != arch.param_count() {
            return Err(Error::DimensionMismatch {
                expected: arch.param_count(),
                got: values.len(),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("weights must be finite"));
        }
        Ok(ModelWeights { arch, values })
    }

    pub fn zeros(arch: ModelArch) -> Result<Self> {
        let n = arch.param_count();
        ModelWeights::from_values(arch, vec![0.0; n])
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// One delegated block of `steps` gradient updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubRunSpec {
    /// Gradient updates to perform (k).
    pub steps: u64,
    /// Client-specified learning rate (eta). Zero is a degenerate no-op.
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Step the sub-run starts from (t); bookkeeping only.
    pub start_step: u64,
    /// Std of the per-feature Gaussian jitter modeling training stochasticity.
    pub augment_noise_std: f64,
}

impl SubRunSpec {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("sub-run must have at least one step"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning rate must be finite and nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if !(self.augment_noise_std >= 0.0) {
            return Err(Error::invalid("augment noise std must be nonnegative"));
        }
        Ok(())
    }
}

/// Scaled-uniform initialization: every parameter of a layer is drawn from
/// `U(-limit, limit)` with `limit = sqrt(6 / (fan_in + fan_out))`, using the
/// key's init stream.
pub fn init_weights(arch: &ModelArch, key: &RngKey) -> Result<ModelWeights> {
    arch.validate()?;
    let mut rng = key.with_stream(Stream::Init).rng();
    let mut values = Vec::with_capacity(arch.param_count());
    for (fan_in, fan_out) in arch.layer_dims() {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..(fan_in + 1) * fan_out {
            values.push(rng.random_range(-limit..limit));
        }
    }
    ModelWeights::from_values(arch.clone(), values)
}

/// Pre-softmax logits for one input.
pub fn forward(weights: &ModelWeights, input: &[f64]) -> Result<Vec<f64>> {
    let trace = forward_trace(weights, input)?;
    Ok(trace.into_logits())
}

/// Activation of the last hidden layer before the output map.
pub fn forward_hidden(weights: &ModelWeights, input: &[f64]) -> Result<Vec<f64>> {
    if weights.arch.hidden_dims.is_empty() {
        return Err(Error::invalid("model has no hidden layer"));
    }
    let trace = forward_trace(weights, input)?;
    let n = trace.layers.len();
    Ok(trace.layers[n - 2].clone())
}

/// Numerically stable softmax; output sums to 1 within 1e-12.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / total).collect()
}

/// Per-layer outputs of one forward pass; `layers[0]` is the input and the
/// last entry holds the logits.
struct ForwardTrace {
    layers: Vec<Vec<f64>>,
}

impl ForwardTrace {
    fn into_logits(mut self) -> Vec<f64> {
        self.layers.pop().expect("trace has at least input and logits")
    }
}

fn forward_trace(weights: &ModelWeights, input: &[f64]) -> Result<ForwardTrace> {
    let arch = &weights.arch;
    if input.len() != arch.input_dim {
        return Err(Error::DimensionMismatch {
            expected: arch.input_dim,
            got: input.len(),
        });
    }
    let dims = arch.layer_dims();
    let last = dims.len() - 1;
    let mut layers = Vec::with_capacity(dims.len() + 1);
    layers.push(input.to_vec());
    let mut offset = 0;
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let w = &weights.values[offset..offset + fan_in * fan_out];
        let b = &weights.values[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
        offset += (fan_in + 1) * fan_out;
        let prev = layers.last().expect("non-empty trace");
        let mut out = Vec::with_capacity(fan_out);
        for o in 0..fan_out {
            let row = &w[o * fan_in..(o + 1) * fan_in];
            let mut z = b[o];
            for (wi, xi) in row.iter().zip(prev) {
                z += wi * xi;
            }
            out.push(if l == last { z } else { arch.activation.apply(z) });
        }
        layers.push(out);
    }
    Ok(ForwardTrace { layers })
}

/// How the loss gradient at the logits is produced for one example.
enum LogitLoss<'a> {
    /// Softmax cross-entropy against integer labels.
    CrossEntropy(&'a [usize]),
    /// Squared error against target logit vectors, averaged over batch and
    /// classes.
    MseToTargets(&'a [Vec<f64>]),
}

/// Mean softmax cross-entropy and its gradient over a batch.
pub fn loss_and_grad(weights: &ModelWeights, features: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    if features.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            got: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= weights.arch.num_classes) {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: weights.arch.num_classes,
        });
    }
    batch_loss_and_grad(weights, features, LogitLoss::CrossEntropy(labels))
}

/// Mean squared error between the model's logits and fixed target logits,
/// averaged over batch and classes, with its gradient.
pub fn mse_loss_and_grad(weights: &ModelWeights, features: &[Vec<f64>], target_logits: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
    if features.len() != target_logits.len() {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            got: target_logits.len(),
        });
    }
    batch_loss_and_grad(weights, features, LogitLoss::MseToTargets(target_logits))
}

fn batch_loss_and_grad(weights: &ModelWeights, features: &[Vec<f64>], loss: LogitLoss<'_>) -> Result<(f64, Vec<f64>)> {
    if features.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let arch = &weights.arch;
    let dims = arch.layer_dims();
    let batch = features.len() as f64;
    let classes = arch.num_classes as f64;
    let mut grad = vec![0.0; weights.values.len()];
    let mut total_loss = 0.0;

    for (idx, x) in features.iter().enumerate() {
        let trace = forward_trace(weights, x)?;
        let logits = trace.layers.last().expect("logits");

        // dL/dz at the output layer, already scaled for the batch mean.
        let (example_loss, mut delta): (f64, Vec<f64>) = match loss {
            LogitLoss::CrossEntropy(labels) => {
                let label = labels[idx];
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
                let probs = softmax(logits);
                let mut d: Vec<f64> = probs.iter().map(|&p| p / batch).collect();
                d[label] -= 1.0 / batch;
                (lse - logits[label], d)
            }
            LogitLoss::MseToTargets(targets) => {
                let t = &targets[idx];
                if t.len() != logits.len() {
                    return Err(Error::DimensionMismatch {
                        expected: logits.len(),
                        got: t.len(),
                    });
                }
                let se: f64 = logits.iter().zip(t).map(|(&z, &tv)| (z - tv) * (z - tv)).sum();
                let d = logits
                    .iter()
                    .zip(t)
                    .map(|(&z, &tv)| 2.0 * (z - tv) / (batch * classes))
                    .collect();
                (se / classes, d)
            }
        };
        total_loss += example_loss;

        // Backward pass, writing into the flat gradient layer by layer.
        let mut layer_offsets = Vec::with_capacity(dims.len());
        let mut off = 0;
        for &(fan_in, fan_out) in &dims {
            layer_offsets.push(off);
            off += (fan_in + 1) * fan_out;
        }
        for l in (0..dims.len()).rev() {
            let (fan_in, fan_out) = dims[l];
            let offset = layer_offsets[l];
            let prev = &trace.layers[l];
            for o in 0..fan_out {
                let d = delta[o];
                let row = offset + o * fan_in;
                for i in 0..fan_in {
                    grad[row + i] += d * prev[i];
                }
                grad[offset + fan_in * fan_out + o] += d;
            }
            if l > 0 {
                let w = &weights.values[offset..offset + fan_in * fan_out];
                let mut next_delta = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let d = delta[o];
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    for i in 0..fan_in {
                        next_delta[i] += row[i] * d;
                    }
                }
                for (nd, &h) in next_delta.iter_mut().zip(&trace.layers[l]) {
                    *nd *= arch.activation.derivative_from_output(h);
                }
                delta = next_delta;
            }
        }
    }
    Ok((total_loss / batch, grad))
}

/// Per-step batch control handed to sub-run variants: may rewrite the batch
/// (after jitter) and sets the step's learning rate.
pub(crate) type BatchHook<'h> = &'h mut dyn FnMut(u64, &mut [Vec<f64>], &mut [usize]) -> f64;

/// Post-update control: runs after the SGD update of each step and may
/// adjust the weights further (used by output-matching adversaries).
pub(crate) type AfterStepHook<'h> = &'h mut dyn FnMut(u64, &mut ModelWeights) -> Result<()>;

/// Shared SGD sub-run driver. Minibatch order is a key-seeded shuffle,
/// reshuffled each epoch (a trailing remainder shorter than one batch is
/// dropped). Gaussian feature jitter is drawn from the augment stream per
/// example, in batch order, feature-major, before the batch hook runs.
pub(crate) fn run_subrun_with_hooks(
    weights: &ModelWeights,
    dataset: &LabeledDataset,
    spec: &SubRunSpec,
    key: &RngKey,
    batch_hook: BatchHook<'_>,
    after_step: AfterStepHook<'_>,
) -> Result<ModelWeights> {
    spec.validate()?;
    dataset.validate()?;
    if dataset.dim() != weights.arch.input_dim {
        return Err(Error::DimensionMismatch {
            expected: weights.arch.input_dim,
            got: dataset.dim(),
        });
    }
    if dataset.num_classes != weights.arch.num_classes {
        return Err(Error::DimensionMismatch {
            expected: weights.arch.num_classes,
            got: dataset.num_classes,
        });
    }
    if spec.batch_size > dataset.len() {
        return Err(Error::invalid(format!(
            "batch size {} exceeds dataset size {}",
            spec.batch_size,
            dataset.len()
        )));
    }

    let mut shuffle_rng = key.with_stream(Stream::Shuffle).rng();
    let mut augment_rng = key.with_stream(Stream::Augment).rng();
    let jitter = if spec.augment_noise_std > 0.0 {
        Some(Normal::new(0.0, spec.augment_noise_std).map_err(|_| Error::invalid("bad jitter std"))?)
    } else {
        None
    };

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut shuffle_rng);
    let mut cursor = 0;

    let mut current = weights.clone();
    for step in 0..spec.steps {
        if cursor + spec.batch_size > order.len() {
            order.shuffle(&mut shuffle_rng);
            cursor = 0;
        }
        let picked = &order[cursor..cursor + spec.batch_size];
        cursor += spec.batch_size;

        let mut feats: Vec<Vec<f64>> = picked.iter().map(|&i| dataset.features[i].clone()).collect();
        let mut labels: Vec<usize> = picked.iter().map(|&i| dataset.labels[i]).collect();
        if let Some(noise) = &jitter {
            for f in &mut feats {
                for v in f.iter_mut() {
                    *v += noise.sample(&mut augment_rng);
                }
            }
        }

        let lr = batch_hook(step, &mut feats, &mut labels);
        let (_, grad) = loss_and_grad(&current, &feats, &labels)?;
        for (w, g) in current.values.iter_mut().zip(&grad) {
            *w -= lr * g;
        }
        after_step(step, &mut current)?;
    }
    Ok(current)
}

/// Runs exactly `spec.steps` clean SGD updates from `weights`.
pub fn train_subrun(
    weights: &ModelWeights,
    dataset: &LabeledDataset,
    spec: &SubRunSpec,
    key: &RngKey,
) -> Result<ModelWeights> {
    let lr = spec.learning_rate;
    run_subrun_with_hooks(weights, dataset, spec, key, &mut |_, _, _| lr, &mut |_, _| Ok(()))
}

/// Fraction of argmax-correct predictions; ties break toward the lowest
/// class index.
pub fn evaluate_accuracy(weights: &ModelWeights, dataset: &LabeledDataset) -> Result<f64> {
    dataset.validate()?;
    let mut correct = 0usize;
    for (x, &label) in dataset.features.iter().zip(&dataset.labels) {
        if predict(weights, x)? == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Argmax class, ties toward the lowest index.
pub fn predict(weights: &ModelWeights, input: &[f64]) -> Result<usize> {
    let logits = forward(weights, input)?;
    let mut best = 0;
    for (c, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = c;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;

    fn small_arch() -> ModelArch {
        ModelArch::new(2, vec![8], 3, Activation::Tanh).unwrap()
    }

    fn key(seed: u64) -> RngKey {
        RngKey::new(seed, 1, 0, Stream::Init)
    }

    #[test]
    fn init_is_deterministic_and_key_sensitive() {
        let arch = small_arch();
        let a = init_weights(&arch, &key(5)).unwrap();
        let b = init_weights(&arch, &key(5)).unwrap();
        assert_eq!(a.values(), b.values());
        let c = init_weights(&arch, &key(6)).unwrap();
        assert!(a.values().iter().zip(c.values()).any(|(x, y)| x != y));
    }

    #[test]
    fn softmax_regression_layout() {
        let arch = ModelArch::new(7, vec![], 4, Activation::Relu).unwrap();
        assert_eq!(arch.param_count(), 7 * 4 + 4);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let w = ModelWeights::zeros(small_arch()).unwrap();
        let logits = forward(&w, &[0.3, -1.2]).unwrap();
        assert!(logits.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn single_linear_layer_matches_hand_product() {
        let arch = ModelArch::new(2, vec![], 2, Activation::Relu).unwrap();
        // W = [[1, 2], [3, 4]], b = [0.5, -0.5]
        let w = ModelWeights::from_values(arch, vec![1.0, 2.0, 3.0, 4.0, 0.5, -0.5]).unwrap();
        let logits = forward(&w, &[10.0, 100.0]).unwrap();
        assert_eq!(logits, vec![1.0 * 10.0 + 2.0 * 100.0 + 0.5, 3.0 * 10.0 + 4.0 * 100.0 - 0.5]);
    }

    #[test]
    fn softmax_is_simplex_point() {
        let probs = softmax(&[3.0, -2.0, 0.5, 9.0]);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(probs.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn forward_hidden_ranges() {
        let relu = init_weights(&ModelArch::new(2, vec![5], 2, Activation::Relu).unwrap(), &key(1)).unwrap();
        // Drive all pre-activations negative through a large negative input
        // scaled by positive weights or vice versa: use an input of zeros and
        // biases shifted negative instead.
        let mut forced = relu.clone();
        let (fan_in, fan_out) = (2, 5);
        for o in 0..fan_out {
            forced.values_mut()[fan_in * fan_out + o] = -10.0;
        }
        let h = forward_hidden(&forced, &[0.0, 0.0]).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));

        // Moderate inputs: extreme pre-activations would saturate tanh to
        // exactly +-1.0 in floating point.
        let tanh = init_weights(&ModelArch::new(2, vec![5], 2, Activation::Tanh).unwrap(), &key(2)).unwrap();
        let h = forward_hidden(&tanh, &[3.0, -2.0]).unwrap();
        assert!(h.iter().all(|&v| v > -1.0 && v < 1.0));

        let linear = init_weights(&ModelArch::new(2, vec![], 2, Activation::Relu).unwrap(), &key(3)).unwrap();
        assert!(forward_hidden(&linear, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn forward_hidden_matches_layer_by_layer() {
        let arch = ModelArch::new(3, vec![4, 5], 2, Activation::Tanh).unwrap();
        let w = init_weights(&arch, &key(7)).unwrap();
        let x = [0.3, -0.7, 1.1];

        // Independent layer-by-layer evaluation.
        let dims = arch.layer_dims();
        let mut offset = 0;
        let mut act: Vec<f64> = x.to_vec();
        for (l, &(fi, fo)) in dims.iter().enumerate() {
            let mut next = vec![0.0; fo];
            for o in 0..fo {
                let mut z = w.values()[offset + fi * fo + o];
                for i in 0..fi {
                    z += w.values()[offset + o * fi + i] * act[i];
                }
                next[o] = if l + 1 == dims.len() { z } else { z.tanh() };
            }
            offset += (fi + 1) * fo;
            if l == dims.len() - 2 {
                let got = forward_hidden(&w, &x).unwrap();
                for (a, b) in next.iter().zip(&got) {
                    assert!((a - b).abs() < 1e-15);
                }
            }
            act = next;
        }
        let logits = forward(&w, &x).unwrap();
        for (a, b) in act.iter().zip(&logits) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_logits_loss_is_ln_classes() {
        let w = ModelWeights::zeros(ModelArch::new(2, vec![], 5, Activation::Relu).unwrap()).unwrap();
        let (loss, _) = loss_and_grad(&w, &[vec![0.4, -0.2]], &[3]).unwrap();
        assert!((loss - (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_batch_leaves_loss_and_grad_unchanged() {
        let arch = small_arch();
        let w = init_weights(&arch, &key(9)).unwrap();
        let feats = vec![vec![0.1, 0.2], vec![-0.4, 0.9]];
        let labels = vec![0, 2];
        let (l1, g1) = loss_and_grad(&w, &feats, &labels).unwrap();
        let doubled: Vec<Vec<f64>> = feats.iter().chain(feats.iter()).cloned().collect();
        let dlabels: Vec<usize> = labels.iter().chain(labels.iter()).cloned().collect();
        let (l2, g2) = loss_and_grad(&w, &doubled, &dlabels).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_batches() {
        let w = ModelWeights::zeros(small_arch()).unwrap();
        assert!(loss_and_grad(&w, &[], &[]).is_err());
        assert!(loss_and_grad(&w, &[vec![0.0, 0.0]], &[7]).is_err());
        assert!(forward(&w, &[1.0, 2.0, 3.0]).is_err());
    }

    /// Central finite differences, the independent gradient oracle.
    fn finite_difference_grad(w: &ModelWeights, feats: &[Vec<f64>], labels: &[usize]) -> Vec<f64> {
        let eps = 1e-5;
        let mut grad = Vec::with_capacity(w.values().len());
        for i in 0..w.values().len() {
            let mut plus = w.clone();
            plus.values_mut()[i] += eps;
            let mut minus = w.clone();
            minus.values_mut()[i] -= eps;
            let (lp, _) = loss_and_grad(&plus, feats, labels).unwrap();
            let (lm, _) = loss_and_grad(&minus, feats, labels).unwrap();
            grad.push((lp - lm) / (2.0 * eps));
        }
        grad
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let arch = ModelArch::new(2, vec![8], 3, Activation::Tanh).unwrap();
        let mut rng = crate::rng::seeded_rng(77);
        for draw in 0..100 {
            let w = init_weights(&arch, &RngKey::new(1000 + draw, 0, 0, Stream::Init)).unwrap();
            let feats: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..2).map(|_| rng.random_range(-1.5..1.5)).collect())
                .collect();
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
            let (_, grad) = loss_and_grad(&w, &feats, &labels).unwrap();
            let numeric = finite_difference_grad(&w, &feats, &labels);
            for (a, n) in grad.iter().zip(&numeric) {
                if n.abs() > 1e-6 {
                    assert!(
                        ((a - n) / n).abs() <= 1e-4,
                        "analytic {a} vs numeric {n} (draw {draw})"
                    );
                }
            }
        }
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let arch = ModelArch::new(2, vec![6], 3, Activation::Relu).unwrap();
        let w = init_weights(&arch, &key(21)).unwrap();
        let feats = vec![vec![0.5, -0.3], vec![1.0, 0.2]];
        let targets = vec![vec![0.1, 0.0, -0.2], vec![0.4, 0.4, 0.0]];
        let (_, grad) = mse_loss_and_grad(&w, &feats, &targets).unwrap();
        let eps = 1e-5;
        for i in (0..w.values().len()).step_by(7) {
            let mut plus = w.clone();
            plus.values_mut()[i] += eps;
            let mut minus = w.clone();
            minus.values_mut()[i] -= eps;
            let (lp, _) = mse_loss_and_grad(&plus, &feats, &targets).unwrap();
            let (lm, _) = mse_loss_and_grad(&minus, &feats, &targets).unwrap();
            let numeric = (lp - lm) / (2.0 * eps);
            if numeric.abs() > 1e-6 {
                assert!(((grad[i] - numeric) / numeric).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn subrun_rejects_zero_steps_and_zero_lr_is_noop() {
        let arch = small_arch();
        let data = make_blobs(4, 3, 2, 10, 0.4).unwrap();
        let w = init_weights(&arch, &key(11)).unwrap();
        let bad = SubRunSpec {
            steps: 0,
            learning_rate: 0.1,
            batch_size: 5,
            start_step: 0,
            augment_noise_std: 0.0,
        };
        assert!(train_subrun(&w, &data, &bad, &key(11)).is_err());
        let frozen = SubRunSpec {
            steps: 1,
            learning_rate: 0.0,
            ..bad
        };
        let out = train_subrun(&w, &data, &frozen, &key(11)).unwrap();
        assert_eq!(out.values(), w.values());
    }

    #[test]
    fn subrun_is_deterministic() {
        let arch = small_arch();
        let data = make_blobs(4, 3, 2, 12, 0.4).unwrap();
        let w = init_weights(&arch, &key(13)).unwrap();
        let spec = SubRunSpec {
            steps: 9,
            learning_rate: 0.05,
            batch_size: 4,
            start_step: 0,
            augment_noise_std: 0.01,
        };
        let run = |k: &RngKey| train_subrun(&w, &data, &spec, k).unwrap();
        assert_eq!(run(&key(13)).values(), run(&key(13)).values());
        assert_ne!(run(&key(13)).values(), run(&key(14)).values());
    }

    #[test]
    fn single_full_batch_step_matches_hand_sgd() {
        let arch = small_arch();
        let data = make_blobs(8, 3, 2, 6, 0.4).unwrap();
        let w = init_weights(&arch, &key(17)).unwrap();
        let spec = SubRunSpec {
            steps: 1,
            learning_rate: 0.2,
            batch_size: data.len(),
            start_step: 0,
            augment_noise_std: 0.0,
        };
        let out = train_subrun(&w, &data, &spec, &key(17)).unwrap();
        // The whole dataset forms the single batch; the mean gradient is
        // order-independent up to rounding.
        let (_, grad) = loss_and_grad(&w, &data.features, &data.labels).unwrap();
        for ((o, w0), g) in out.values().iter().zip(w.values()).zip(&grad) {
            assert!((o - (w0 - 0.2 * g)).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_larger_than_dataset_rejected() {
        let arch = small_arch();
        let data = make_blobs(4, 3, 2, 2, 0.3).unwrap();
        let w = init_weights(&arch, &key(1)).unwrap();
        let spec = SubRunSpec {
            steps: 1,
            learning_rate: 0.1,
            batch_size: data.len() + 1,
            start_step: 0,
            augment_noise_std: 0.0,
        };
        assert!(train_subrun(&w, &data, &spec, &key(1)).is_err());
    }

    #[test]
    fn accuracy_on_single_point_and_memorizer() {
        let arch = small_arch();
        let data = make_blobs(23, 3, 2, 7, 0.15).unwrap();
        let (train, _) = crate::data::split(&data, 0.95, 3).unwrap();
        let w = init_weights(&arch, &key(29)).unwrap();
        let spec = SubRunSpec {
            steps: 400,
            learning_rate: 0.3,
            batch_size: 5,
            start_step: 0,
            augment_noise_std: 0.0,
        };
        let trained = train_subrun(&w, &train, &spec, &key(29)).unwrap();
        assert_eq!(evaluate_accuracy(&trained, &train).unwrap(), 1.0);

        let one = LabeledDataset::new(vec![train.features[0].clone()], vec![train.labels[0]], 3).unwrap();
        assert_eq!(evaluate_accuracy(&trained, &one).unwrap(), 1.0);
    }

    #[test]
    fn random_weights_near_chance_on_balanced_data() {
        // Monte-Carlo check: over fresh (data, model) draws the expected
        // accuracy of an untrained model on balanced 10-class data is 0.1.
        // Per-run accuracies are correlated within a class, so the margin is
        // wider than the plain binomial 3 sigma.
        let classes = 10;
        let runs = 40;
        let mut hits = 0.0;
        for s in 0..runs {
            let data = make_blobs(31 + s, classes, 6, 50, 0.5).unwrap();
            let arch = ModelArch::new(6, vec![8], classes, Activation::Tanh).unwrap();
            let w = init_weights(&arch, &key(100 + s)).unwrap();
            hits += evaluate_accuracy(&w, &data).unwrap();
        }
        let mean = hits / runs as f64;
        assert!((mean - 0.1).abs() < 0.05, "mean accuracy {mean} too far from chance");
    }
}
