//! Composite training objective: BCE-with-logits on threshold-shifted logits
//! plus a hinge margin term, with analytic gradients for both the logits and
//! the thresholds. All reductions are means over the B x L cells, which keeps
//! the margin weight scale-stable across label-space sizes.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::threshold::standardize_logits;
use crate::util::{sigmoid, softplus};

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Hinge margin width.
    pub margin: f64,
    /// Weight of the margin term in the composite loss.
    pub margin_weight: f64,
    /// Weight applied to positive cells in the BCE term.
    pub pos_weight: f64,
    /// Standardize logits over the batch before both terms.
    pub use_standardization: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            margin_weight: 0.1,
            pos_weight: 1.0,
            use_standardization: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin < 0.0 || self.margin_weight < 0.0 {
            return Err(Error::InvalidArgument(
                "margin and margin_weight must be >= 0".into(),
            ));
        }
        if !(self.pos_weight > 0.0) {
            return Err(Error::InvalidArgument("pos_weight must be > 0".into()));
        }
        Ok(())
    }
}

/// Composite loss value, its components, and the gradients feeding the model
/// and threshold backward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub bce_component: f64,
    /// Unweighted margin mean; the total adds it scaled by `margin_weight`.
    pub margin_component: f64,
    pub d_logits: Array2<f64>,
    pub d_threshold: Array2<f64>,
}

fn check_same_shape(
    context: &'static str,
    a: &Array2<f64>,
    b: &Array2<f64>,
) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            context,
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
        ));
    }
    Ok(())
}

/// Numerically stable binary cross-entropy on already-shifted logits.
///
/// Per cell: `pos_weight * y * softplus(-x) + (1 - y) * softplus(x)`,
/// averaged over all B x L cells. Returns the mean loss and its gradient
/// with respect to the shifted logits.
pub fn bce_with_logits(
    shifted: &Array2<f64>,
    targets: &Array2<f64>,
    pos_weight: f64,
) -> Result<(f64, Array2<f64>)> {
    check_same_shape("bce_with_logits", shifted, targets)?;
    let cells = shifted.len() as f64;
    let mut total = 0.0;
    let mut grad = Array2::zeros(shifted.raw_dim());
    for ((idx, &x), &y) in shifted.indexed_iter().zip(targets.iter()) {
        if !x.is_finite() {
            return Err(Error::NonFinite {
                context: format!("bce input at {idx:?}"),
            });
        }
        let s = sigmoid(x);
        total += pos_weight * y * softplus(-x) + (1.0 - y) * softplus(x);
        grad[idx] = (pos_weight * y * (s - 1.0) + (1.0 - y) * s) / cells;
    }
    Ok((total / cells, grad))
}

/// Hinge margin loss pushing logits at least `margin` away from the
/// threshold on the correct side:
///
/// ```text
/// y = 1: max(0, theta - z + margin)
/// y = 0: max(0, z - theta + margin)
/// ```
///
/// Mean reduction; the subgradient at the kink is zero. Returns the loss and
/// gradients with respect to logits and thresholds.
pub fn margin_loss(
    logits: &Array2<f64>,
    thresholds: &Array2<f64>,
    targets: &Array2<f64>,
    margin: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_same_shape("margin_loss", logits, thresholds)?;
    check_same_shape("margin_loss", logits, targets)?;
    let cells = logits.len() as f64;
    let mut total = 0.0;
    let mut d_logits = Array2::zeros(logits.raw_dim());
    let mut d_thresholds = Array2::zeros(logits.raw_dim());
    for (idx, &z) in logits.indexed_iter() {
        let theta = thresholds[idx];
        let positive = targets[idx] > 0.5;
        let arg = if positive {
            theta - z + margin
        } else {
            z - theta + margin
        };
        if arg > 0.0 {
            total += arg;
            let sign = if positive { -1.0 } else { 1.0 };
            d_logits[idx] = sign / cells;
            d_thresholds[idx] = -sign / cells;
        }
    }
    Ok((total / cells, d_logits, d_thresholds))
}

/// Full objective: `BCE(z - theta, y) + margin_weight * Margin(z, theta, y)`.
///
/// When standardization is enabled the logits are standardized before both
/// terms; the batch mean and std act as constants, so upstream gradients are
/// scaled by `1 / (std + epsilon)` on the way back to the raw logits.
/// `std_epsilon` is only read in that mode.
pub fn composite_loss(
    logits: &Array2<f64>,
    thresholds: &Array2<f64>,
    targets: &Array2<f64>,
    config: &LossConfig,
    std_epsilon: f64,
) -> Result<LossOutput> {
    config.validate()?;
    check_same_shape("composite_loss", logits, thresholds)?;
    check_same_shape("composite_loss", logits, targets)?;

    let (effective, grad_scale) = if config.use_standardization {
        let standardized = standardize_logits(logits, std_epsilon)?;
        let scale = standardized.grad_scale();
        (standardized.values, scale)
    } else {
        (logits.clone(), 1.0)
    };

    let shifted = &effective - thresholds;
    let (bce, bce_grad) = bce_with_logits(&shifted, targets, config.pos_weight)?;
    let (margin, margin_dz, margin_dtheta) =
        margin_loss(&effective, thresholds, targets, config.margin)?;

    let total = bce + config.margin_weight * margin;
    // BCE sees z - theta, so its threshold gradient is the negated logit one.
    let d_logits = (&bce_grad + &(config.margin_weight * &margin_dz)).mapv(|g| g * grad_scale);
    let d_threshold = bce_grad.mapv(|g| -g) + config.margin_weight * &margin_dtheta;

    Ok(LossOutput {
        total,
        bce_component: bce,
        margin_component: margin,
        d_logits,
        d_threshold,
    })
}
