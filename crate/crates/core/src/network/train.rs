use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ssl::{sparsity_stats, SparsityReport, SslConfig, SslRegularizer};
use crate::tensor::Tensor;

use super::{argmax_rows, softmax_cross_entropy, Gradients, Layer, NetworkModel, Shape3};

/// Labelled samples held in memory, one `C×H×W` block per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    sample_shape: Shape3,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, sample_shape: Shape3, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || inputs.len() != per * labels.len() {
            return shape_err(format!(
                "{} input values for {} samples of shape {sample_shape:?}",
                inputs.len(),
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return shape_err(format!("label {bad} out of range for {n_classes} classes"));
        }
        Ok(Self {
            inputs,
            sample_shape,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> Shape3 {
        self.sample_shape
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let per: usize = self.sample_shape.iter().product();
        &self.inputs[i * per..(i + 1) * per]
    }

    /// Stacks the listed samples into a `B×C×H×W` tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per: usize = self.sample_shape.iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let [c, h, w] = self.sample_shape;
        let t = Tensor::new(vec![indices.len(), c, h, w], data).expect("consistent batch");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let per: usize = self.sample_shape.iter().product();
        Self {
            inputs: self.inputs[..n * per].to_vec(),
            sample_shape: self.sample_shape,
            labels: self.labels[..n].to_vec(),
            n_classes: self.n_classes,
        }
    }
}

/// Mini-batch SGD hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Coefficient of the non-structured `½‖W‖²` term (weights only).
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// `(epoch, multiplier)`: from `epoch` on, the rate is
    /// `learning_rate · multiplier`. Epochs are zero-based.
    #[serde(default)]
    pub lr_schedule: Vec<(usize, f64)>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            epochs: 1,
            lr_schedule: Vec::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.lr_schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config("lr_schedule epochs must be strictly increasing".into()));
        }
        if self.lr_schedule.iter().any(|&(_, m)| !(m > 0.0)) {
            return Err(Error::Config("lr_schedule multipliers must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mult = self
            .lr_schedule
            .iter()
            .rev()
            .find(|&&(e, _)| e <= epoch)
            .map_or(1.0, |&(_, m)| m);
        self.learning_rate * mult
    }
}

/// Momentum buffers for [`SgdState::step`].
#[derive(Clone, Debug)]
pub struct SgdState {
    velocity: Gradients,
}

impl SgdState {
    pub fn new(model: &NetworkModel) -> Self {
        Self {
            velocity: Gradients::zeros_like(model),
        }
    }

    /// `v ← μ·v − lr·(g_data + λ·w + g_ssl)`, `w ← w + v`.
    ///
    /// Weight decay applies to weights, not biases. Entries covered by a
    /// layer's zero mask are held at zero.
    pub fn step(
        &mut self,
        model: &mut NetworkModel,
        grads: &Gradients,
        reg_grads: Option<&Gradients>,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) {
        for idx in model.weighted_layers() {
            let g = grads.layer(idx).expect("gradient for every weighted layer");
            let r = reg_grads.and_then(|r| r.layer(idx));
            let v = self.velocity.layer_mut(idx).expect("velocity for every weighted layer");
            let layer = model.layer_mut(idx);
            let mask = match layer {
                Layer::Conv(c) => c.zero_mask.clone(),
                Layer::Fc(f) => f.zero_mask.clone(),
                _ => None,
            };
            let w = layer.weights_mut().expect("weighted layer");
            for (i, (wi, vi)) in w.weights_mut().iter_mut().zip(v.weights.iter_mut()).enumerate() {
                if mask.as_ref().is_some_and(|m| m[i]) {
                    *vi = 0.0;
                    *wi = 0.0;
                    continue;
                }
                let total = g.weights[i] + weight_decay * *wi + r.map_or(0.0, |r| r.weights[i]);
                *vi = momentum * *vi - lr * total;
                *wi += *vi;
            }
            for (i, (bi, vi)) in w.bias_mut().iter_mut().zip(v.bias.iter_mut()).enumerate() {
                let total = g.bias[i] + r.map_or(0.0, |r| r.bias[i]);
                *vi = momentum * *vi - lr * total;
                *bi += *vi;
            }
        }
    }
}

/// Metrics recorded at the end of each epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean data loss over the epoch's mini-batches.
    pub train_loss: f64,
    pub train_error: f64,
    pub eval_loss: Option<f64>,
    pub eval_error: Option<f64>,
    /// Structured penalty `Σ λ_g·R_g` at the end of the epoch.
    pub ssl_penalty: Option<f64>,
    pub sparsity: Option<SparsityReport>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochMetrics>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

/// Mean loss and error rate of `model` over `data`.
pub fn evaluate(model: &NetworkModel, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut errors) = (0.0, 0usize);
    for chunk in order.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        let logits = model.predict(&x)?;
        let (l, _) = softmax_cross_entropy(&logits, &y)?;
        loss += l * chunk.len() as f64;
        errors += argmax_rows(&logits)
            .iter()
            .zip(&y)
            .filter(|(p, t)| p != t)
            .count();
    }
    Ok((loss / data.len() as f64, errors as f64 / data.len() as f64))
}

/// Mini-batch SGD over `train_set`, optionally with the structured sparsity
/// penalty of `ssl` added to every step.
///
/// Sample order is reshuffled each epoch from a generator seeded by
/// `cfg.seed`, so equal inputs give bit-identical trajectories.
pub fn train(
    mut model: NetworkModel,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    cfg: &TrainConfig,
    ssl: Option<&SslConfig>,
) -> Result<(NetworkModel, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if train_set.sample_shape() != model.input_shape() {
        return shape_err(format!(
            "dataset samples {:?} do not match model input {:?}",
            train_set.sample_shape(),
            model.input_shape()
        ));
    }
    let regularizer = ssl.map(|s| SslRegularizer::new(s, &model)).transpose()?;
    let mut sgd = SgdState::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut errors) = (0.0, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train_set.batch(chunk);
            let (logits, cache) = model.forward(&x)?;
            let (loss, _) = softmax_cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
            loss_sum += loss * chunk.len() as f64;
            errors += argmax_rows(&logits).iter().zip(&y).filter(|(p, t)| p != t).count();
            let grads = model.backward(&cache, &y)?;
            let reg = regularizer.as_ref().map(|r| r.gradient(&model));
            sgd.step(&mut model, &grads, reg.as_ref(), lr, cfg.momentum, cfg.weight_decay);
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let (eval_loss, eval_error) = match eval_set {
            Some(d) => {
                let (l, e) = evaluate(&model, d, 500)?;
                (Some(l), Some(e))
            }
            None => (None, None),
        };
        let metrics = EpochMetrics {
            epoch,
            lr,
            train_loss,
            train_error: errors as f64 / train_set.len() as f64,
            eval_loss,
            eval_error,
            ssl_penalty: regularizer.as_ref().map(|r| r.penalty(&model)),
            sparsity: ssl.map(|s| sparsity_stats(&model, s)).transpose()?,
        };
        info!(
            "epoch {epoch}: lr {lr:.3e} loss {:.4} train err {:.4}{}",
            metrics.train_loss,
            metrics.train_error,
            metrics
                .eval_error
                .map_or(String::new(), |e| format!(" eval err {e:.4}")),
        );
        history.epochs.push(metrics);
    }
    Ok((model, history))
}
