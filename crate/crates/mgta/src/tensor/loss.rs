//! Detection losses: penalty-reduced focal loss on probability heatmaps with
//! Gaussian-smoothed targets, and masked L1 regression.

use crate::error::{Error, Result};
use crate::tensor::ops::val;
use crate::tensor::tape::{Grads, Node, Tape, TapeOp, ValueId};
use crate::tensor::{shape_str, Tensor};

/// Probabilities below this only clamp the logarithm, never the polynomial
/// factors, so perfect predictions still score exactly zero.
const LOG_FLOOR: f64 = 1e-300;

struct GaussianFocalOp {
    probs: ValueId,
    target: Tensor,
    norm: f64,
}

impl TapeOp for GaussianFocalOp {
    fn name(&self) -> &'static str {
        "gaussian_focal_loss"
    }
    fn backward(&self, out: ValueId, nodes: &[Node], grads: &mut Grads) -> Result<()> {
        let g = grads.output(out).unwrap().data()[0];
        let p = val(nodes, self.probs).data();
        let y = self.target.data();
        let mut dp = vec![0.0; p.len()];
        for i in 0..p.len() {
            let pi = p[i];
            dp[i] = if y[i] == 1.0 {
                // d/dp [(1-p)^2 (-ln p)] = 2(1-p) ln p - (1-p)^2 / p
                2.0 * (1.0 - pi) * pi.max(LOG_FLOOR).ln() - (1.0 - pi).powi(2) / pi.max(LOG_FLOOR)
            } else {
                // d/dp [(1-y)^4 p^2 (-ln(1-p))]
                let w = (1.0 - y[i]).powi(4);
                w * (-2.0 * pi * (1.0 - pi).max(LOG_FLOOR).ln()
                    + pi * pi / (1.0 - pi).max(LOG_FLOOR))
            } * g
                / self.norm;
        }
        grads.accumulate(
            self.probs,
            Tensor::from_vec(&self.target.shape().to_vec(), dp)?,
        )
    }
}

/// Focal loss over a probability heatmap against Gaussian-smoothed targets.
///
/// Cells where the target is exactly 1 are positives and score
/// `(1-p)^2 (-ln p)`; all other cells score `(1-y)^4 p^2 (-ln(1-p))`, so the
/// Gaussian tail down-weights near-misses. The sum is divided by
/// `max(1, #positives)`. A perfect prediction (p = 1 on positives, 0
/// elsewhere) scores exactly zero.
pub fn gaussian_focal_loss(tape: &mut Tape, probs: ValueId, target: &Tensor) -> Result<ValueId> {
    if tape.value(probs).shape() != target.shape() {
        return Err(Error::shape(format!(
            "focal loss: probabilities {} vs target {}",
            shape_str(tape.value(probs).shape()),
            shape_str(target.shape())
        )));
    }
    let p = tape.value(probs).data();
    let y = target.data();
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::numeric(format!(
            "focal loss expects probabilities in [0, 1], got {bad}"
        )));
    }
    let mut npos = 0usize;
    let mut sum = 0.0;
    for i in 0..p.len() {
        if y[i] == 1.0 {
            npos += 1;
            sum += (1.0 - p[i]).powi(2) * -p[i].max(LOG_FLOOR).ln();
        } else {
            sum += (1.0 - y[i]).powi(4) * p[i] * p[i] * -(1.0 - p[i]).max(LOG_FLOOR).ln();
        }
    }
    let norm = npos.max(1) as f64;
    let out = Tensor::scalar(sum / norm).with_dtype(tape.value(probs).dtype());
    tape.push_op(
        out,
        Box::new(GaussianFocalOp {
            probs,
            target: target.clone(),
            norm,
        }),
    )
}

struct MaskedL1Op {
    pred: ValueId,
    target: Tensor,
    mask: Tensor,
    norm: f64,
}

impl TapeOp for MaskedL1Op {
    fn name(&self) -> &'static str {
        "masked_l1_loss"
    }
    fn backward(&self, out: ValueId, nodes: &[Node], grads: &mut Grads) -> Result<()> {
        let g = grads.output(out).unwrap().data()[0];
        let p = val(nodes, self.pred).data();
        let t = self.target.data();
        let m = self.mask.data();
        let dp: Vec<f64> = (0..p.len())
            .map(|i| m[i] * (p[i] - t[i]).signum() * g / self.norm)
            .collect();
        grads.accumulate(self.pred, Tensor::from_vec(&self.target.shape().to_vec(), dp)?)
    }
}

/// Masked L1 loss: `sum(mask * |pred - target|) / norm`.
///
/// The caller supplies `norm` (typically `max(1, #positive objects)`), so the
/// same normalizer can cover several regression maps. Zero residuals get a
/// zero subgradient.
pub fn masked_l1_loss(
    tape: &mut Tape,
    pred: ValueId,
    target: &Tensor,
    mask: &Tensor,
    norm: f64,
) -> Result<ValueId> {
    if tape.value(pred).shape() != target.shape() || target.shape() != mask.shape() {
        return Err(Error::shape(format!(
            "masked L1: pred {}, target {}, mask {}",
            shape_str(tape.value(pred).shape()),
            shape_str(target.shape()),
            shape_str(mask.shape())
        )));
    }
    if norm <= 0.0 {
        return Err(Error::config(format!("masked L1 norm must be positive, got {norm}")));
    }
    let p = tape.value(pred).data();
    let t = target.data();
    let m = mask.data();
    let sum: f64 = (0..p.len()).map(|i| m[i] * (p[i] - t[i]).abs()).sum();
    let out = Tensor::scalar(sum / norm).with_dtype(tape.value(pred).dtype());
    tape.push_op(
        out,
        Box::new(MaskedL1Op {
            pred,
            target: target.clone(),
            mask: mask.clone(),
            norm,
        }),
    )
}
