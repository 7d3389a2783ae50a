use crate::error::Result;
use crate::tensor::Tensor;

use super::{softmax_cross_entropy, NetworkModel};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameters whose relative error exceeded the tolerance.
    pub failures: usize,
}

/// Mean softmax cross-entropy of `model` on one batch.
pub fn batch_loss(model: &NetworkModel, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let logits = model.predict(x)?;
    softmax_cross_entropy(&logits, labels).map(|(l, _)| l)
}

/// Checks every parameter's analytic gradient against
/// `(E(w + h) − E(w − h)) / 2h`.
///
/// The relative error is `|a − f| / max(|a|, |f|, 1e-6)`; the floor keeps
/// round-off on near-zero gradients from counting as a mismatch.
pub fn gradient_check(model: &NetworkModel, x: &Tensor, labels: &[usize], h: f64, tol: f64) -> Result<GradCheck> {
    let (_, cache) = model.forward(x)?;
    let grads = model.backward(&cache, labels)?;
    let mut probe = model.clone();
    let mut out = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
        failures: 0,
    };
    for l in model.weighted_layers() {
        let w = model.weights(l).expect("weighted layer");
        let masked = model.layers()[l].zero_mask();
        for i in 0..w.param_len() {
            if masked.is_some_and(|m| i < m.len() && m[i]) {
                continue;
            }
            let base = w.param(i);
            probe.weights_mut(l).expect("weighted layer").set_param(i, base + h);
            let plus = batch_loss(&probe, x, labels)?;
            probe.weights_mut(l).expect("weighted layer").set_param(i, base - h);
            let minus = batch_loss(&probe, x, labels)?;
            probe.weights_mut(l).expect("weighted layer").set_param(i, base);
            let fd = (plus - minus) / (2.0 * h);
            let an = grads.layer(l).expect("weighted layer").get(i);
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            out.checked += 1;
            out.max_rel_err = out.max_rel_err.max(rel);
            out.failures += usize::from(rel > tol);
        }
    }
    Ok(out)
}
