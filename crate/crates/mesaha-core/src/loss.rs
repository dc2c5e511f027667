//! Training losses: a level-set boundary loss for the segmentation head, a
//! soft dice loss for the two predicted ROI heads, and a dynamic blend that
//! shifts weight at nodule end slices.
//!
//! Every loss returns both the value and its gradient with respect to the
//! prediction maps, so network training only needs the tape for the
//! parameter chain rule.

use crate::edt::squared_edt_2d;
use crate::error::{CoreError, Result};
use crate::preproc::RoiMask2D;
use ndarray::{Array2, ArrayView2};

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Blend parameter: interior slices weight the segmentation loss by tau,
    /// end slices by 1 - tau.
    pub tau: f64,
    /// Dice smoothing constant.
    pub eps: f64,
    /// Signed-distance clamp in pixels; also the constant fill for masks with
    /// no boundary at all.
    pub dist_cap: f64,
    /// Optional auxiliary binary cross-entropy on the segmentation head.
    pub aux_bce_weight: f64,
    /// Swaps the two alpha branches (end slices get tau instead of 1 - tau).
    pub invert_alpha: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.3,
            eps: 1.0,
            dist_cap: 96.0 * std::f64::consts::SQRT_2,
            aux_bce_weight: 0.0,
            invert_alpha: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(CoreError::Validation(format!(
                "tau must be in (0,1), got {}",
                self.tau
            )));
        }
        if self.eps <= 0.0 {
            return Err(CoreError::Validation(format!(
                "dice smoothing must be > 0, got {}",
                self.eps
            )));
        }
        if self.dist_cap <= 0.0 {
            return Err(CoreError::Validation(format!(
                "distance cap must be > 0, got {}",
                self.dist_cap
            )));
        }
        if self.aux_bce_weight < 0.0 {
            return Err(CoreError::Validation(format!(
                "aux BCE weight must be >= 0, got {}",
                self.aux_bce_weight
            )));
        }
        Ok(())
    }
}

/// Per-slice training targets: the ground-truth segmentation for the slice
/// plus ideal ROI masks for both neighbors, all in the patch frame.
#[derive(Debug, Clone)]
pub struct SliceTargets {
    pub gt_seg: Array2<u8>,
    pub roi_prev: RoiMask2D,
    pub roi_next: RoiMask2D,
}

impl SliceTargets {
    /// A slice is an end slice when the nodule vanishes on either neighbor.
    pub fn is_end_slice(&self) -> bool {
        self.roi_prev.is_empty() || self.roi_next.is_empty()
    }
}

/// Signed Euclidean distance map of a binary mask, in pixel units: negative
/// inside the mask, positive outside, magnitude = distance to the nearest
/// pixel of the opposite class, clamped to `cap`. A mask with no opposite
/// class anywhere (empty or full) maps to the constant `+cap` / `-cap`.
pub fn signed_distance_map(g: &ArrayView2<u8>, cap: f64) -> Array2<f64> {
    let fg = g.mapv(|v| v == 1);
    let any_fg = fg.iter().any(|v| *v);
    let any_bg = fg.iter().any(|v| !*v);
    if !any_fg {
        return Array2::from_elem(g.raw_dim(), cap);
    }
    if !any_bg {
        return Array2::from_elem(g.raw_dim(), -cap);
    }
    let bg = fg.mapv(|v| !v);
    let dist_to_fg = squared_edt_2d(&fg, (1.0, 1.0));
    let dist_to_bg = squared_edt_2d(&bg, (1.0, 1.0));
    let mut out = Array2::zeros(g.raw_dim());
    ndarray::Zip::from(&mut out)
        .and(&fg)
        .and(&dist_to_fg)
        .and(&dist_to_bg)
        .for_each(|o, inside, dfg, dbg| {
            *o = if *inside {
                -dbg.sqrt().min(cap)
            } else {
                dfg.sqrt().min(cap)
            };
        });
    out
}

/// Level-set boundary loss: mean over the patch of `phi_G(q) * s(q)`. Linear
/// in `s`, so the gradient is the constant map `phi_G / |Omega|`.
pub fn boundary_loss(s: &ArrayView2<f64>, g: &ArrayView2<u8>, cap: f64) -> Result<(f64, Array2<f64>)> {
    if s.dim() != g.dim() {
        return Err(CoreError::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            s.dim(),
            g.dim()
        )));
    }
    let phi = signed_distance_map(g, cap);
    let n = s.len() as f64;
    let mut value = 0.0;
    for (sv, pv) in s.iter().zip(phi.iter()) {
        value += sv * pv;
    }
    value /= n;
    let grad = phi.mapv(|p| p / n);
    Ok((value, grad))
}

/// Soft dice between a probability map and a binary target:
/// `(2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)`.
fn soft_dice(p: &ArrayView2<f64>, g: &ArrayView2<u8>, eps: f64) -> (f64, Array2<f64>) {
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_g = 0.0;
    for (pv, gv) in p.iter().zip(g.iter()) {
        inter += pv * *gv as f64;
        sum_p += pv;
        sum_g += *gv as f64;
    }
    let num = 2.0 * inter + eps;
    let den = sum_p + sum_g + eps;
    let dice = num / den;
    // d(dice)/dp_i = (2*g_i*den - num) / den^2
    let grad = Array2::from_shape_fn(p.raw_dim(), |idx| {
        let gi = g[idx] as f64;
        (2.0 * gi * den - num) / (den * den)
    });
    (dice, grad)
}

/// Attention loss: `1 - (dice(next) + dice(prev)) / 2`, bounded in [0, 1].
/// Returns the value and the gradients w.r.t. the two prediction maps
/// (previous first).
pub fn roi_dice_loss(
    pred_prev: &ArrayView2<f64>,
    pred_next: &ArrayView2<f64>,
    targets: &SliceTargets,
    eps: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let gp = targets.roi_prev.pixels();
    let gn = targets.roi_next.pixels();
    if pred_prev.dim() != gp.dim() || pred_next.dim() != gn.dim() {
        return Err(CoreError::ShapeMismatch(format!(
            "ROI prediction {:?}/{:?} vs targets {:?}/{:?}",
            pred_prev.dim(),
            pred_next.dim(),
            gp.dim(),
            gn.dim()
        )));
    }
    let (dice_prev, gprev) = soft_dice(pred_prev, &gp.view(), eps);
    let (dice_next, gnext) = soft_dice(pred_next, &gn.view(), eps);
    let value = 1.0 - 0.5 * (dice_prev + dice_next);
    Ok((value, gprev.mapv(|v| -0.5 * v), gnext.mapv(|v| -0.5 * v)))
}

/// Dynamic blend weight: `1 - tau` when either ideal adjacent ROI is empty
/// (an end slice), `tau` otherwise.
pub fn alpha_for_sample(targets: &SliceTargets, config: &LossConfig) -> f64 {
    let end = targets.is_end_slice() != config.invert_alpha;
    if end {
        1.0 - config.tau
    } else {
        config.tau
    }
}

/// Value plus gradients w.r.t. the three network output maps.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub value: f64,
    pub alpha: f64,
    pub seg_loss: f64,
    pub att_loss: f64,
    pub bce_loss: f64,
    pub grad_seg: Array2<f64>,
    pub grad_prev: Array2<f64>,
    pub grad_next: Array2<f64>,
}

/// `alpha * L_seg + (1 - alpha) * L_att (+ w * BCE)` with alpha from
/// [`alpha_for_sample`].
pub fn total_loss(
    seg: &ArrayView2<f64>,
    pred_prev: &ArrayView2<f64>,
    pred_next: &ArrayView2<f64>,
    targets: &SliceTargets,
    config: &LossConfig,
) -> Result<TotalLoss> {
    let alpha = alpha_for_sample(targets, config);
    total_loss_with_alpha(seg, pred_prev, pred_next, targets, config, alpha)
}

pub fn total_loss_with_alpha(
    seg: &ArrayView2<f64>,
    pred_prev: &ArrayView2<f64>,
    pred_next: &ArrayView2<f64>,
    targets: &SliceTargets,
    config: &LossConfig,
    alpha: f64,
) -> Result<TotalLoss> {
    config.validate()?;
    let (seg_loss, seg_grad) = boundary_loss(seg, &targets.gt_seg.view(), config.dist_cap)?;
    let (att_loss, gprev, gnext) = roi_dice_loss(pred_prev, pred_next, targets, config.eps)?;

    let mut grad_seg = seg_grad.mapv(|v| alpha * v);
    let mut bce_loss = 0.0;
    if config.aux_bce_weight > 0.0 {
        let n = seg.len() as f64;
        let w = config.aux_bce_weight;
        for (idx, sv) in seg.indexed_iter() {
            let gv = targets.gt_seg[idx] as f64;
            let s = sv.clamp(1e-12, 1.0 - 1e-12);
            bce_loss -= gv * s.ln() + (1.0 - gv) * (1.0 - s).ln();
            grad_seg[idx] += w * (s - gv) / (s * (1.0 - s)) / n;
        }
        bce_loss /= n;
    }

    let att_weight = 1.0 - alpha;
    let value = alpha * seg_loss + att_weight * att_loss + config.aux_bce_weight * bce_loss;
    if !value.is_finite() {
        return Err(CoreError::NonFinite(format!(
            "total loss (seg {seg_loss}, att {att_loss}, bce {bce_loss})"
        )));
    }
    Ok(TotalLoss {
        value,
        alpha,
        seg_loss,
        att_loss,
        bce_loss,
        grad_seg,
        grad_prev: gprev.mapv(|v| att_weight * v),
        grad_next: gnext.mapv(|v| att_weight * v),
    })
}
