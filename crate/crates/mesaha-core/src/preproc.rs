//! Patch extraction and the four aligned network inputs.
//!
//! Everything here is crop-and-copy: no interpolation, no resizing. A patch
//! pixel always equals exactly one source voxel (edge replication aside,
//! which only engages when a slice is smaller than the patch).

use crate::error::{CoreError, Result};
use crate::volume::CtVolume;
use ndarray::{Array2, ArrayView2};

/// Network input side length.
pub const PATCH_SIDE: usize = 96;

/// HU window used for intensity normalization (standard lung window).
pub const HU_WINDOW: (f64, f64) = (-1000.0, 400.0);

/// Default probability threshold when binarizing predicted maps.
pub const ROI_THRESHOLD: f32 = 0.5;

/// Predicted ROI masks with fewer surviving pixels than this are treated as
/// empty; suppresses speckle-driven runaway propagation.
pub const MIN_ROI_AREA: usize = 4;

/// Axis-aligned attention rectangle on one slice, inclusive global pixel
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoiBox {
    pub slice: usize,
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl RoiBox {
    pub fn validate(&self, dims: (usize, usize, usize)) -> Result<()> {
        let (xs, ys, zs) = dims;
        if self.slice >= zs {
            return Err(CoreError::Validation(format!(
                "ROI slice {} outside volume depth {zs}",
                self.slice
            )));
        }
        if self.x_min > self.x_max || self.y_min > self.y_max {
            return Err(CoreError::Validation(format!("degenerate ROI box {self:?}")));
        }
        if self.x_max >= xs || self.y_max >= ys {
            return Err(CoreError::Validation(format!(
                "ROI box {self:?} outside {xs}x{ys} slice"
            )));
        }
        Ok(())
    }

    /// Centroid rounded down.
    pub fn center(&self) -> (usize, usize) {
        ((self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2)
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn with_slice(&self, slice: usize) -> RoiBox {
        RoiBox { slice, ..*self }
    }
}

/// Where a patch sits in the volume: global pixel coordinates of the patch's
/// (0,0) corner plus the slice it was cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchFrame {
    pub x0: usize,
    pub y0: usize,
    pub slice: usize,
    pub side: usize,
}

/// A patch-resolution binary mask whose nonzero pixels form one filled
/// rectangle (or nothing).
#[derive(Debug, Clone, PartialEq)]
pub struct RoiMask2D {
    pixels: Array2<u8>,
    frame: PatchFrame,
}

impl RoiMask2D {
    pub fn empty(frame: PatchFrame) -> RoiMask2D {
        RoiMask2D {
            pixels: Array2::zeros((frame.side, frame.side)),
            frame,
        }
    }

    /// Fills the rectangle `x_lo..=x_hi`, `y_lo..=y_hi` in patch coordinates,
    /// clipped to the patch.
    pub fn from_patch_rect(frame: PatchFrame, x_lo: i64, y_lo: i64, x_hi: i64, y_hi: i64) -> RoiMask2D {
        let side = frame.side as i64;
        let mut pixels = Array2::zeros((frame.side, frame.side));
        let x_lo = x_lo.max(0);
        let y_lo = y_lo.max(0);
        let x_hi = x_hi.min(side - 1);
        let y_hi = y_hi.min(side - 1);
        if x_lo <= x_hi && y_lo <= y_hi {
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    pixels[[y as usize, x as usize]] = 1;
                }
            }
        }
        RoiMask2D { pixels, frame }
    }

    pub fn pixels(&self) -> &Array2<u8> {
        &self.pixels
    }

    pub fn frame(&self) -> PatchFrame {
        self.frame
    }

    pub fn sum(&self) -> usize {
        self.pixels.iter().filter(|p| **p == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.sum() == 0
    }

    /// Tight bounding box of the nonzero pixels, in patch coordinates
    /// `(x_lo, y_lo, x_hi, y_hi)`.
    pub fn patch_bbox(&self) -> Option<(usize, usize, usize, usize)> {
        bbox_of(&self.pixels.view())
    }
}

fn bbox_of(mask: &ArrayView2<u8>) -> Option<(usize, usize, usize, usize)> {
    let (h, w) = mask.dim();
    let mut out: Option<(usize, usize, usize, usize)> = None;
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] != 0 {
                out = Some(match out {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
    }
    out
}

/// Rounds to nearest with ties toward the larger value, so fractional box
/// geometry always resolves toward the larger box.
fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

/// Cuts the patch window around `roi`'s centroid: origin = centroid - side/2,
/// clamped so the window stays inside the slice whenever the slice is at
/// least `side` wide. Rows/columns past a smaller slice are edge-replicated.
pub fn crop_patch(volume: &CtVolume, roi: &RoiBox) -> Result<(Array2<i16>, PatchFrame)> {
    crop_patch_sized(volume, roi, PATCH_SIDE)
}

pub fn crop_patch_sized(
    volume: &CtVolume,
    roi: &RoiBox,
    side: usize,
) -> Result<(Array2<i16>, PatchFrame)> {
    let dims = volume.dims();
    roi.validate(dims)?;
    let (xs, ys, _) = dims;
    let (cx, cy) = roi.center();
    let origin = |c: usize, extent: usize| -> usize {
        let half = side / 2;
        let lo = c.saturating_sub(half);
        if extent <= side {
            0
        } else {
            lo.min(extent - side)
        }
    };
    let frame = PatchFrame {
        x0: origin(cx, xs),
        y0: origin(cy, ys),
        slice: roi.slice,
        side,
    };
    Ok((extract_plane(volume, &frame, roi.slice), frame))
}

/// Copies the frame's window out of slice `z`, replicating edge voxels where
/// the window overhangs a slice smaller than the patch.
fn extract_plane(volume: &CtVolume, frame: &PatchFrame, z: usize) -> Array2<i16> {
    let (xs, ys, _) = volume.dims();
    let plane = volume.slice(z);
    Array2::from_shape_fn((frame.side, frame.side), |(py, px)| {
        let gx = (frame.x0 + px).min(xs - 1);
        let gy = (frame.y0 + py).min(ys - 1);
        plane[[gy, gx]]
    })
}

/// Clips to the lung HU window and maps it affinely onto [0, 1].
pub fn normalize_hu(hu: i16) -> f32 {
    let (lo, hi) = HU_WINDOW;
    let clipped = (hu as f64).clamp(lo, hi);
    ((clipped - lo) / (hi - lo)) as f32
}

pub fn normalize_patch(patch: &Array2<i16>) -> Array2<f32> {
    patch.mapv(normalize_hu)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MipDirection {
    /// Slab extends toward larger slice indices: `n ..= n+slab-1`.
    Forward,
    /// Slab extends toward smaller slice indices: `n-slab+1 ..= n`.
    Backward,
}

/// Pixelwise maximum over `slab` consecutive slices through the patch window,
/// normalized to [0, 1]. Slices past the volume ends are replaced by the
/// terminal slice, so the MIP is defined everywhere.
pub fn make_mip(
    volume: &CtVolume,
    frame: &PatchFrame,
    n: usize,
    direction: MipDirection,
    slab: usize,
) -> Result<Array2<f32>> {
    let (_, _, zs) = volume.dims();
    if n >= zs {
        return Err(CoreError::Validation(format!(
            "MIP slice {n} outside volume depth {zs}"
        )));
    }
    if slab == 0 {
        return Err(CoreError::Validation("MIP slab must be >= 1".into()));
    }
    let mut acc = Array2::from_elem((frame.side, frame.side), i16::MIN);
    for k in 0..slab {
        let z = match direction {
            MipDirection::Forward => (n + k).min(zs - 1),
            MipDirection::Backward => n.saturating_sub(k),
        };
        let plane = extract_plane(volume, frame, z);
        ndarray::Zip::from(&mut acc).and(&plane).for_each(|a, p| {
            if *p > *a {
                *a = *p;
            }
        });
    }
    Ok(acc.mapv(normalize_hu))
}

/// Rasterizes a global-coordinate box into the patch window. An empty
/// intersection yields the all-zero mask (upstream treats that as a stop
/// signal, it is not an error).
pub fn roi_box_to_mask(roi: &RoiBox, frame: &PatchFrame) -> RoiMask2D {
    RoiMask2D::from_patch_rect(
        *frame,
        roi.x_min as i64 - frame.x0 as i64,
        roi.y_min as i64 - frame.y0 as i64,
        roi.x_max as i64 - frame.x0 as i64,
        roi.y_max as i64 - frame.y0 as i64,
    )
}

/// Binarizes a predicted map at `threshold` and returns the tight global
/// bounding box of the surviving pixels, or `None` when fewer than `min_area`
/// survive. The returned box lives on the frame's slice; callers aiming at an
/// adjacent slice re-target it with [`RoiBox::with_slice`].
pub fn mask_to_roi_box(
    prob_map: &ArrayView2<f32>,
    frame: &PatchFrame,
    threshold: f32,
    min_area: usize,
    dims: (usize, usize, usize),
) -> Option<RoiBox> {
    let binary = prob_map.mapv(|p| u8::from(p >= threshold));
    let count = binary.iter().filter(|v| **v == 1).count();
    if count < min_area.max(1) {
        return None;
    }
    let (x_lo, y_lo, x_hi, y_hi) = bbox_of(&binary.view())?;
    let (xs, ys, _) = dims;
    Some(RoiBox {
        slice: frame.slice,
        x_min: (frame.x0 + x_lo).min(xs - 1),
        y_min: (frame.y0 + y_lo).min(ys - 1),
        x_max: (frame.x0 + x_hi).min(xs - 1),
        y_max: (frame.y0 + y_hi).min(ys - 1),
    })
}

/// Target ROI mask for an adjacent slice: the tight bounding box of the
/// nodule pixels grown by `margin_fraction` of the box side on each of the
/// four sides. An empty ground-truth slice produces the all-zero mask.
pub fn ideal_adjacent_roi(
    gt_patch_slice: &ArrayView2<u8>,
    margin_fraction: f64,
    frame: PatchFrame,
) -> Result<RoiMask2D> {
    if margin_fraction < 0.0 {
        return Err(CoreError::Validation(format!(
            "margin fraction {margin_fraction} must be >= 0"
        )));
    }
    let Some((x_lo, y_lo, x_hi, y_hi)) = bbox_of(gt_patch_slice) else {
        return Ok(RoiMask2D::empty(frame));
    };
    let w = (x_hi - x_lo + 1) as f64;
    let h = (y_hi - y_lo + 1) as f64;
    let mx = round_half_up(margin_fraction * w);
    let my = round_half_up(margin_fraction * h);
    Ok(RoiMask2D::from_patch_rect(
        frame,
        x_lo as i64 - mx,
        y_lo as i64 - my,
        x_hi as i64 + mx,
        y_hi as i64 + my,
    ))
}

/// Training-time input ROI: concentric with the nodule bounding box, each
/// side scaled by `sqrt(1 + enlargement)` so the area grows by the requested
/// fraction with the aspect ratio preserved.
pub fn training_input_roi(
    gt_slice: &ArrayView2<u8>,
    slice: usize,
    enlargement: f64,
) -> Result<RoiBox> {
    if enlargement < 0.0 {
        return Err(CoreError::Validation(format!(
            "enlargement {enlargement} must be >= 0"
        )));
    }
    let Some((x_lo, y_lo, x_hi, y_hi)) = bbox_of(gt_slice) else {
        return Err(CoreError::Validation(
            "training input ROI requires a nonempty nodule mask".into(),
        ));
    };
    let (h, w) = gt_slice.dim();
    let scale = (1.0 + enlargement).sqrt();
    let grow = |lo: usize, hi: usize, extent: usize| -> (usize, usize) {
        let side = (hi - lo + 1) as f64;
        let new_side = round_half_up(side * scale).max(1);
        let total_grow = new_side - (hi - lo + 1) as i64;
        let lead = total_grow / 2;
        let trail = total_grow - lead;
        let new_lo = (lo as i64 - lead).max(0) as usize;
        let new_hi = ((hi as i64 + trail).max(new_lo as i64) as usize).min(extent - 1);
        (new_lo, new_hi)
    };
    let (x_min, x_max) = grow(x_lo, x_hi, w);
    let (y_min, y_max) = grow(y_lo, y_hi, h);
    Ok(RoiBox {
        slice,
        x_min,
        y_min,
        x_max,
        y_max,
    })
}

/// The four aligned network inputs for one slice.
#[derive(Debug, Clone)]
pub struct PatchBundle {
    pub slice_patch: Array2<f32>,
    pub mip_backward: Array2<f32>,
    pub mip_forward: Array2<f32>,
    pub roi_mask: RoiMask2D,
    pub frame: PatchFrame,
}

impl PatchBundle {
    pub fn side(&self) -> usize {
        self.frame.side
    }
}

/// Crops, normalizes, builds both MIPs, and rasterizes the input ROI.
pub fn build_bundle(volume: &CtVolume, roi: &RoiBox, slab: usize) -> Result<PatchBundle> {
    let (patch, frame) = crop_patch(volume, roi)?;
    let slice_patch = normalize_patch(&patch);
    let mip_backward = make_mip(volume, &frame, roi.slice, MipDirection::Backward, slab)?;
    let mip_forward = make_mip(volume, &frame, roi.slice, MipDirection::Forward, slab)?;
    let roi_mask = roi_box_to_mask(roi, &frame);
    Ok(PatchBundle {
        slice_patch,
        mip_backward,
        mip_forward,
        roi_mask,
        frame,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn test_volume(
        dims: (usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize) -> i16,
    ) -> CtVolume {
        let (x, y, z) = dims;
        CtVolume::new(
            Array3::from_shape_fn((z, y, x), |(zz, yy, xx)| f(xx, yy, zz)),
            (1.0, 1.0, 1.0),
        )
        .unwrap()
    }

    fn centered_box(slice: usize, cx: usize, cy: usize, half: usize) -> RoiBox {
        RoiBox {
            slice,
            x_min: cx - half,
            y_min: cy - half,
            x_max: cx + half,
            y_max: cy + half,
        }
    }

    #[test]
    fn crop_centers_on_roi_centroid() {
        let vol = test_volume((200, 200, 3), |x, y, _| (x + y) as i16);
        let roi = centered_box(1, 100, 100, 5);
        let (patch, frame) = crop_patch(&vol, &roi).unwrap();
        assert_eq!((frame.x0, frame.y0), (52, 52));
        assert_eq!(patch.dim(), (96, 96));
        // Interior pixels equal exactly one source voxel.
        for py in 0..96 {
            for px in 0..96 {
                assert_eq!(patch[[py, px]], ((52 + px) + (52 + py)) as i16);
            }
        }
    }

    #[test]
    fn crop_clamps_at_slice_edge() {
        let vol = test_volume((200, 200, 1), |_, _, _| 0);
        let roi = centered_box(0, 10, 10, 2);
        let (_, frame) = crop_patch(&vol, &roi).unwrap();
        assert_eq!((frame.x0, frame.y0), (0, 0));
        // And clamps to the far edge too.
        let roi = centered_box(0, 195, 195, 2);
        let (_, frame) = crop_patch(&vol, &roi).unwrap();
        assert_eq!((frame.x0, frame.y0), (104, 104));
    }

    #[test]
    fn crop_of_exact_fit_slice_is_identity() {
        let vol = test_volume((96, 96, 1), |x, y, _| (3 * x + y) as i16);
        let roi = RoiBox { slice: 0, x_min: 4, y_min: 80, x_max: 30, y_max: 90 };
        let (patch, frame) = crop_patch(&vol, &roi).unwrap();
        assert_eq!((frame.x0, frame.y0), (0, 0));
        for y in 0..96 {
            for x in 0..96 {
                assert_eq!(patch[[y, x]], (3 * x + y) as i16);
            }
        }
    }

    #[test]
    fn crop_replicates_edges_on_small_slices() {
        let vol = test_volume((50, 40, 1), |x, y, _| (x + 100 * y) as i16);
        let roi = centered_box(0, 25, 20, 3);
        let (patch, frame) = crop_patch(&vol, &roi).unwrap();
        assert_eq!((frame.x0, frame.y0), (0, 0));
        // Past the slice, rows/cols replicate the last voxel.
        assert_eq!(patch[[39, 49]], patch[[95, 95]]);
        assert_eq!(patch[[10, 60]], patch[[10, 49]]);
    }

    #[test]
    fn crop_rejects_out_of_volume_slice() {
        let vol = test_volume((96, 96, 2), |_, _, _| 0);
        let roi = centered_box(5, 48, 48, 2);
        assert!(crop_patch(&vol, &roi).is_err());
    }

    #[test]
    fn normalize_hu_window() {
        assert_eq!(normalize_hu(-1000), 0.0);
        assert_eq!(normalize_hu(-2000), 0.0);
        assert_eq!(normalize_hu(400), 1.0);
        assert_eq!(normalize_hu(1200), 1.0);
        assert_eq!(normalize_hu(-300), 0.5);
    }

    #[test]
    fn mip_of_constant_volume_is_constant() {
        let vol = test_volume((96, 96, 5), |_, _, _| -200);
        let roi = centered_box(2, 48, 48, 4);
        let (_, frame) = crop_patch(&vol, &roi).unwrap();
        for dir in [MipDirection::Forward, MipDirection::Backward] {
            let mip = make_mip(&vol, &frame, 2, dir, 3).unwrap();
            for v in mip.iter() {
                assert_eq!(*v, normalize_hu(-200));
            }
        }
    }

    #[test]
    fn mip_takes_elementwise_max_across_slab() {
        // Values 5, 7, 3 at one location across slices 1, 2, 3.
        let vol = test_volume((96, 96, 4), |x, y, z| {
            if (x, y) == (10, 20) {
                match z {
                    1 => 5,
                    2 => 7,
                    3 => 3,
                    _ => 0,
                }
            } else {
                0
            }
        });
        let roi = centered_box(1, 48, 48, 4);
        let (_, frame) = crop_patch(&vol, &roi).unwrap();
        let mip = make_mip(&vol, &frame, 1, MipDirection::Forward, 3).unwrap();
        assert_eq!(mip[[20, 10]], normalize_hu(7));
        // Backward slab from slice 3 covers slices 1..=3 as well.
        let mip_b = make_mip(&vol, &frame, 3, MipDirection::Backward, 3).unwrap();
        assert_eq!(mip_b[[20, 10]], normalize_hu(7));
    }

    #[test]
    fn mip_replicates_terminal_slice() {
        let vol = test_volume((96, 96, 4), |x, _, z| (10 * z + x % 3) as i16);
        let roi = centered_box(3, 48, 48, 4);
        let (patch, frame) = crop_patch(&vol, &roi).unwrap();
        let mip = make_mip(&vol, &frame, 3, MipDirection::Forward, 3).unwrap();
        let expect = normalize_patch(&patch);
        assert_eq!(mip, expect);
    }

    #[test]
    fn roi_mask_rasterization() {
        let frame = PatchFrame { x0: 100, y0: 50, slice: 0, side: 96 };
        // Full-patch box.
        let full = RoiBox { slice: 0, x_min: 100, y_min: 50, x_max: 195, y_max: 145 };
        assert_eq!(roi_box_to_mask(&full, &frame).sum(), 96 * 96);
        // Entirely outside.
        let out = RoiBox { slice: 0, x_min: 0, y_min: 0, x_max: 10, y_max: 10 };
        assert!(roi_box_to_mask(&out, &frame).is_empty());
        // Box (10..19, 20..29) in patch coords: exactly 100 ones.
        let boxed = RoiBox { slice: 0, x_min: 110, y_min: 70, x_max: 119, y_max: 79 };
        let mask = roi_box_to_mask(&boxed, &frame);
        assert_eq!(mask.sum(), 100);
        assert_eq!(mask.patch_bbox(), Some((10, 20, 19, 29)));
    }

    #[test]
    fn mask_to_box_basics() {
        let frame = PatchFrame { x0: 0, y0: 0, slice: 0, side: 96 };
        let dims = (96, 96, 1);
        let zeros = Array2::<f32>::zeros((96, 96));
        assert!(mask_to_roi_box(&zeros.view(), &frame, 0.5, MIN_ROI_AREA, dims).is_none());

        let mut map = Array2::<f32>::zeros((96, 96));
        for y in 10..20 {
            for x in 20..30 {
                map[[y, x]] = 0.9;
            }
        }
        let roi = mask_to_roi_box(&map.view(), &frame, 0.5, MIN_ROI_AREA, dims).unwrap();
        assert_eq!((roi.x_min, roi.y_min, roi.x_max, roi.y_max), (20, 10, 29, 19));

        // Three isolated supra-threshold pixels stay below min_area.
        let mut sparse = Array2::<f32>::zeros((96, 96));
        sparse[[5, 5]] = 1.0;
        sparse[[50, 70]] = 1.0;
        sparse[[90, 3]] = 1.0;
        assert!(mask_to_roi_box(&sparse.view(), &frame, 0.5, MIN_ROI_AREA, dims).is_none());
    }

    #[test]
    fn ideal_roi_margins() {
        let frame = PatchFrame { x0: 0, y0: 0, slice: 0, side: 96 };
        let empty = Array2::<u8>::zeros((96, 96));
        assert!(ideal_adjacent_roi(&empty.view(), 0.2, frame).unwrap().is_empty());

        // 10x10 nodule box at (40..49, 30..39), margin 0.2 -> 2 px each side.
        let mut gt = Array2::<u8>::zeros((96, 96));
        for y in 30..40 {
            for x in 40..50 {
                gt[[y, x]] = 1;
            }
        }
        let mask = ideal_adjacent_roi(&gt.view(), 0.2, frame).unwrap();
        assert_eq!(mask.patch_bbox(), Some((38, 28, 51, 41)));
        assert_eq!(mask.sum(), 14 * 14);

        // Margin 0 keeps the tight box.
        let tight = ideal_adjacent_roi(&gt.view(), 0.0, frame).unwrap();
        assert_eq!(tight.patch_bbox(), Some((40, 30, 49, 39)));
    }

    #[test]
    fn training_roi_area_enlargement() {
        // 10x10 box, 30% area growth: side * sqrt(1.3) = 11.40 -> 11.
        let mut gt = Array2::<u8>::zeros((96, 96));
        for y in 40..50 {
            for x in 40..50 {
                gt[[y, x]] = 1;
            }
        }
        let roi = training_input_roi(&gt.view(), 0, 0.3).unwrap();
        assert_eq!(roi.width(), 11);
        assert_eq!(roi.height(), 11);
        // Contains the nodule bounding box.
        assert!(roi.x_min <= 40 && roi.x_max >= 49);
        assert!(roi.y_min <= 40 && roi.y_max >= 49);

        let tight = training_input_roi(&gt.view(), 0, 0.0).unwrap();
        assert_eq!((tight.x_min, tight.y_min, tight.x_max, tight.y_max), (40, 40, 49, 49));

        let empty = Array2::<u8>::zeros((96, 96));
        assert!(training_input_roi(&empty.view(), 0, 0.3).is_err());
    }

    #[test]
    fn training_roi_clamps_at_patch_edge() {
        let mut gt = Array2::<u8>::zeros((96, 96));
        for y in 0..10 {
            for x in 0..10 {
                gt[[y, x]] = 1;
            }
        }
        let roi = training_input_roi(&gt.view(), 0, 2.0).unwrap();
        assert_eq!((roi.x_min, roi.y_min), (0, 0));
        assert!(roi.area() < (10.0 * 10.0 * 3.0) as usize);
    }

    #[test]
    fn box_mask_box_is_identity_for_boxes() {
        let frame = PatchFrame { x0: 7, y0: 11, slice: 0, side: 96 };
        let dims = (200, 200, 1);
        let roi = RoiBox { slice: 0, x_min: 20, y_min: 30, x_max: 41, y_max: 35 };
        let mask = roi_box_to_mask(&roi, &frame);
        let prob = mask.pixels().mapv(|v| v as f32);
        let back = mask_to_roi_box(&prob.view(), &frame, 0.5, MIN_ROI_AREA, dims).unwrap();
        assert_eq!(back, roi);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn mip_monotone_under_voxel_increase(
            seed in 0u64..1000,
            bump in 1i16..500,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let vol = test_volume((96, 96, 5), |_, _, _| 0);
            let mut raw = vol.voxels().clone();
            raw.mapv_inplace(|_| rng.gen_range(-900..300));
            let vol = CtVolume::new(raw.clone(), (1.0, 1.0, 1.0)).unwrap();
            let roi = centered_box(2, 48, 48, 5);
            let (_, frame) = crop_patch(&vol, &roi).unwrap();
            let before = make_mip(&vol, &frame, 2, MipDirection::Forward, 3).unwrap();

            let z = rng.gen_range(0..5);
            let y = rng.gen_range(0..96);
            let x = rng.gen_range(0..96);
            raw[[z, y, x]] = raw[[z, y, x]].saturating_add(bump).min(4095);
            let vol2 = CtVolume::new(raw, (1.0, 1.0, 1.0)).unwrap();
            let after = make_mip(&vol2, &frame, 2, MipDirection::Forward, 3).unwrap();
            for (a, b) in after.iter().zip(before.iter()) {
                prop_assert!(a >= b);
            }
        }

        #[test]
        fn mask_to_box_contains_all_surviving_pixels(
            seed in 0u64..500,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let map = Array2::from_shape_fn((96, 96), |_| rng.gen_range(0.0f32..1.0));
            let frame = PatchFrame { x0: 13, y0: 29, slice: 0, side: 96 };
            if let Some(b) = mask_to_roi_box(&map.view(), &frame, 0.5, MIN_ROI_AREA, (256, 256, 1)) {
                for y in 0..96 {
                    for x in 0..96 {
                        if map[[y, x]] >= 0.5 {
                            let gx = 13 + x;
                            let gy = 29 + y;
                            prop_assert!(gx >= b.x_min && gx <= b.x_max);
                            prop_assert!(gy >= b.y_min && gy <= b.y_max);
                        }
                    }
                }
            }
        }
    }
}
