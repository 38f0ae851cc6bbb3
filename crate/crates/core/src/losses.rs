//! Focal loss on negatives and the IoU-driven weight derived from it.
//!
//! Negatives far (in IoU) from every known label are likelier to be
//! unannotated objects, so they get weight close to `w0`; negatives that
//! overlap known labels are up-weighted by `k * FL(iou)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, BBox};
use crate::pseudo_labeling::LabelSet;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("focal loss input {0} must lie in [0, 1)")]
    OutOfDomain(f64),
    #[error("invalid focal IoU config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FIoUConfig<T: Scalar = f64> {
    pub w0: T,
    pub k: T,
    pub alpha_t: T,
    pub gamma: T,
    /// IoU inputs are clamped to this value to keep the weight finite.
    pub iou_clamp: T,
}

impl<T: Scalar> Default for FIoUConfig<T> {
    fn default() -> Self {
        Self {
            w0: T::lit(0.5),
            k: T::lit(1.5),
            alpha_t: T::lit(0.25),
            gamma: T::lit(2.0),
            iou_clamp: T::lit(0.999),
        }
    }
}

impl<T: Scalar> FIoUConfig<T> {
    pub fn validate(&self) -> Result<(), LossError> {
        let finite = [self.w0, self.k, self.alpha_t, self.gamma, self.iou_clamp].iter().all(|v| v.is_finite());
        if !finite {
            return Err(LossError::InvalidConfig("all parameters must be finite".into()));
        }
        if self.w0 < T::zero() || self.k < T::zero() || self.gamma < T::zero() {
            return Err(LossError::InvalidConfig("w0, k and gamma must be non-negative".into()));
        }
        if !(self.alpha_t > T::zero() && self.alpha_t < T::one()) {
            return Err(LossError::InvalidConfig("alpha_t must lie in (0, 1)".into()));
        }
        if !(self.iou_clamp > T::zero() && self.iou_clamp < T::one()) {
            return Err(LossError::InvalidConfig("iou_clamp must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Upper bound of [`fiou_weight`] under this config.
    pub fn max_weight(&self) -> T {
        self.w0 + self.k * focal_term(self.iou_clamp, self)
    }
}

/// `-alpha_t * x^gamma * ln(1 - x)` without domain checks.
#[inline]
fn focal_term<T: Scalar>(x: T, cfg: &FIoUConfig<T>) -> T {
    if x == T::zero() {
        return T::zero();
    }
    -cfg.alpha_t * x.powf(cfg.gamma) * (-x).ln_1p()
}

/// Focal loss of a negative sample with foreground confidence `x`.
pub fn focal_loss_neg<T: Scalar>(x: T, cfg: &FIoUConfig<T>) -> Result<T, LossError> {
    if !(x >= T::zero() && x < T::one()) {
        return Err(LossError::OutOfDomain(x.to_f64_lossy()));
    }
    Ok(focal_term(x, cfg))
}

/// `w0 + k * FL(min(iou, iou_clamp))`. Inputs below 0 are treated as 0.
pub fn fiou_weight<T: Scalar>(iou: T, cfg: &FIoUConfig<T>) -> T {
    let x = if iou.is_nan() { T::zero() } else { iou.max(T::zero()).min(cfg.iou_clamp) };
    cfg.w0 + cfg.k * focal_term(x, cfg)
}

/// Largest IoU between `negative` and any label box, ignoring class.
pub fn max_label_iou<T: Scalar>(negative: &BBox<T>, labels: &LabelSet<T>) -> T {
    labels.boxes().map(|b| iou(negative, b)).fold(T::zero(), T::max)
}

/// Classification-loss weight for each negative sample against the union of
/// ground truth and pseudo labels.
pub fn fiou_weights<T: Scalar>(negatives: &[BBox<T>], labels: &LabelSet<T>, cfg: &FIoUConfig<T>) -> Vec<T> {
    negatives.iter().map(|n| fiou_weight(max_label_iou(n, labels), cfg)).collect()
}
