//! Performance losses, the size regularizer and the combined objective.

use crate::error::{PitError, Result};
use crate::layers::{Layer, LayerVars, NetVars, Network};
use crate::mask::slice_weight_vector;
use crate::tape::{Tape, Var};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Mae,
    /// Binary cross-entropy on logits; the logistic squashing happens inside
    /// the loss, so networks end in a raw linear head.
    Bce,
}

/// Mean-reduced performance loss; differentiable w.r.t. predictions.
pub fn performance_loss(tape: &mut Tape, pred: Var, target: Var, kind: LossKind) -> Result<Var> {
    match kind {
        LossKind::Mse => {
            let d = tape.sub(pred, target)?;
            let sq = tape.mul(d, d)?;
            tape.mean(sq)
        }
        LossKind::Mae => {
            let d = tape.sub(pred, target)?;
            let a = tape.abs(d)?;
            tape.mean(a)
        }
        LossKind::Bce => tape.bce_with_logits(pred, target),
    }
}

/// Regularization strength for the size term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub lambda: f64,
}

impl RegularizerConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(PitError::invalid(format!(
                "regularization strength must be non-negative, got {lambda}"
            )));
        }
        Ok(RegularizerConfig { lambda })
    }
}

/// Size cost of the current dilation selectors:
///
/// `lambda * sum_layers c_in * c_out * sum_{i=1}^{L-1} slice_weight(i) * |g_hat[i]|`
///
/// The penalty acts on the float selectors (not the binarized view), never
/// on the pinned first entry, and its gradient w.r.t. `g_hat[i]` is
/// `lambda * c_in * c_out * slice_weight(i) * sign(g_hat[i])`.
pub fn size_regularizer(
    tape: &mut Tape,
    net: &Network,
    vars: &NetVars,
    cfg: &RegularizerConfig,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (layer, lv) in net.layers.iter().zip(vars.0.iter()) {
        let Layer::PitConv(l) = layer else { continue };
        let gamma = match lv {
            LayerVars::PitConv { gamma: Some(g), .. } => *g,
            // Selectors fixed this pass (warmup, fine-tune or frozen):
            // contribute a constant so the loss value stays comparable.
            LayerVars::PitConv { gamma: None, .. } => {
                tape.constant(crate::tensor::Tensor::vector(l.gamma.g_hat().to_vec()))
            }
            _ => return Err(PitError::invalid("layer vars out of sync with layers")),
        };
        let weights = tape.constant(slice_weight_vector(l.gamma.spec()));
        let mags = tape.abs(gamma)?;
        let weighted = tape.mul(mags, weights)?;
        let s = tape.sum(weighted)?;
        let scaled = tape.scalar_mul(s, cfg.lambda * (l.c_in * l.c_out) as f64)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
    }
    total.ok_or_else(|| PitError::invalid("size regularizer needs at least one prunable layer"))
}

/// Combined objective: performance plus size cost.
pub fn total_loss(tape: &mut Tape, perf: Var, reg: Var) -> Result<Var> {
    tape.add(perf, reg)
}
