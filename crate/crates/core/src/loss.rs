//! Segmentation loss: `SmoothL1(M_o, M) + lambda * Focal(M_o, M)`, both
//! averaged over pixels.

use prn_tensor::{Scalar, Tensor, Var};

use crate::error::{PrnError, Result};
use crate::nn::Ctx;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside the logarithms.
pub const PROB_EPS: f64 = 1e-6;
const SMOOTH_L1_DELTA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub gamma: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug)]
pub struct LossValue<T> {
    pub total: f64,
    pub smooth_l1: f64,
    pub focal: f64,
    /// d total / d prediction.
    pub grad: Tensor<T>,
}

/// Per-pixel smooth L1 and its derivative in `d = p - m`.
fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < SMOOTH_L1_DELTA {
        (0.5 * d * d / SMOOTH_L1_DELTA, d / SMOOTH_L1_DELTA)
    } else {
        (d.abs() - 0.5 * SMOOTH_L1_DELTA, d.signum())
    }
}

/// Per-pixel binary focal loss and its derivative in `p`.
fn focal(p: f64, m: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let inside = p > PROB_EPS && p < 1.0 - PROB_EPS;
    let q = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let (lq, l1q) = (q.ln(), (1.0 - q).ln());
    let pos = -alpha * (1.0 - q).powf(gamma) * lq;
    let neg = -(1.0 - alpha) * q.powf(gamma) * l1q;
    let value = m * pos + (1.0 - m) * neg;
    if !inside {
        return (value, 0.0);
    }
    let dpos = alpha * (gamma * (1.0 - q).powf(gamma - 1.0) * lq - (1.0 - q).powf(gamma) / q);
    let dneg = -(1.0 - alpha) * (gamma * q.powf(gamma - 1.0) * l1q - q.powf(gamma) / (1.0 - q));
    (value, m * dpos + (1.0 - m) * dneg)
}

pub fn total_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, w: LossWeights) -> Result<LossValue<T>> {
    if pred.shape() != target.shape() {
        return Err(PrnError::dim(format!("prediction {:?} vs mask {:?}", pred.shape(), target.shape())));
    }
    if pred.is_empty() {
        return Err(PrnError::dim("empty prediction"));
    }
    let n = pred.len() as f64;
    let (mut sl1, mut fl) = (0.0, 0.0);
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &m) in pred.data().iter().zip(target.data()) {
        let (p, m) = (p.as_f64(), m.as_f64());
        let (a, da) = smooth_l1(p - m);
        let (b, db) = focal(p, m, w.alpha, w.gamma);
        sl1 += a;
        fl += b;
        grad.push(T::lit((da + w.lambda * db) / n));
    }
    let (smooth_l1, focal) = (sl1 / n, fl / n);
    Ok(LossValue { total: smooth_l1 + w.lambda * focal, smooth_l1, focal, grad: Tensor::new(pred.shape(), grad) })
}

/// Records the loss of `pred` against `target` as a scalar tape node.
pub fn loss_node<T: Scalar>(ctx: &mut Ctx<'_, T>, pred: Var, target: &Tensor<T>, w: LossWeights) -> Result<(Var, LossValue<T>)> {
    let value = total_loss(ctx.tape.value(pred), target, w)?;
    let node = ctx.tape.objective(pred, T::lit(value.total), value.grad.clone());
    Ok((node, value))
}
