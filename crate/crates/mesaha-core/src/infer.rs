//! Iterative bidirectional slice propagation: from one seed ROI on one
//! slice, segment that slice, read the predicted ROI for the neighboring
//! slice, hop there, and repeat until the predicted ROI collapses, the
//! volume ends, or the iteration cap trips. Two passes (ascending then
//! descending slice index) assemble the 3D mask; the seed slice's own
//! prediction also provides the descending pass's starting ROI.

use crate::error::{CoreError, Result};
use crate::net::{Model, NetOutput};
use crate::preproc::{
    build_bundle, ideal_adjacent_roi, mask_to_roi_box, PatchBundle, PatchFrame,
    RoiBox, MIN_ROI_AREA, ROI_THRESHOLD,
};
use crate::volume::{BinaryMask3D, CtVolume};
use ndarray::{Array2, Array3};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

/// Anything that maps an input bundle to the three output maps; implemented
/// by the trained network and by the ground-truth oracle used in tests.
pub trait SliceSegmenter {
    fn predict(&self, bundle: &PatchBundle) -> Result<NetOutput>;
}

impl SliceSegmenter for Model<f32> {
    fn predict(&self, bundle: &PatchBundle) -> Result<NetOutput> {
        self.forward(bundle)
    }
}

/// Test oracle: answers with the ground truth itself. The segmentation map
/// is the ground-truth slice; the adjacent-ROI maps are ideal ROI rectangles
/// derived from the neighboring ground-truth slices, widened to at least the
/// propagation minimum area so a nonempty neighbor always propagates.
pub struct OracleModel<'a> {
    pub gt: &'a BinaryMask3D,
    pub margin: f64,
}

impl<'a> OracleModel<'a> {
    pub fn new(gt: &'a BinaryMask3D) -> Self {
        OracleModel { gt, margin: 0.2 }
    }
}

fn crop_gt_plane(gt: &BinaryMask3D, frame: &PatchFrame, z: i64) -> Array2<u8> {
    let (xs, ys, zs) = gt.dims();
    let side = frame.side;
    if z < 0 || z >= zs as i64 {
        return Array2::zeros((side, side));
    }
    let plane = gt.slice(z as usize);
    Array2::from_shape_fn((side, side), |(py, px)| {
        let gx = frame.x0 + px;
        let gy = frame.y0 + py;
        if gx < xs && gy < ys {
            plane[[gy, gx]]
        } else {
            0
        }
    })
}

fn to_prob(m: &Array2<u8>) -> Array2<f32> {
    m.mapv(|v| if v == 1 { 0.999 } else { 0.001 })
}

impl SliceSegmenter for OracleModel<'_> {
    fn predict(&self, bundle: &PatchBundle) -> Result<NetOutput> {
        let frame = bundle.frame;
        let n = frame.slice as i64;
        let seg = crop_gt_plane(self.gt, &frame, n);
        let roi_map = |z: i64| -> Result<Array2<u8>> {
            let plane = crop_gt_plane(self.gt, &frame, z);
            if plane.iter().all(|v| *v == 0) {
                return Ok(plane);
            }
            let mask = ideal_adjacent_roi(&plane.view(), self.margin, frame)?;
            let (mut x0, mut y0, mut x1, mut y1) =
                mask.patch_bbox().expect("nonempty ideal ROI");
            // Widen to the propagation minimum (2x2) so tiny terminal
            // cross-sections still signal continuation.
            let side = frame.side;
            if x1 == x0 {
                if x1 + 1 < side {
                    x1 += 1;
                } else {
                    x0 -= 1;
                }
            }
            if y1 == y0 {
                if y1 + 1 < side {
                    y1 += 1;
                } else {
                    y0 -= 1;
                }
            }
            let mut out = Array2::zeros((side, side));
            for y in y0..=y1 {
                for x in x0..=x1 {
                    out[[y, x]] = 1;
                }
            }
            Ok(out)
        };
        Ok(NetOutput {
            seg: to_prob(&seg),
            roi_prev: to_prob(&roi_map(n - 1)?),
            roi_next: to_prob(&roi_map(n + 1)?),
        })
    }
}

/// How the next slice's ROI is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RoiPolicy {
    /// Follow the network's predicted adjacent-slice ROI.
    #[default]
    Adaptive,
    /// Reuse the same rectangle on every slice; a pass ends when the
    /// segmentation itself collapses. Used for the sagittal/coronal views.
    Fixed,
}

#[derive(Debug, Clone, Copy)]
pub struct InferenceConfig {
    pub threshold: f32,
    pub min_roi_area: usize,
    pub max_iters_per_direction: usize,
    pub slab: usize,
    pub roi_policy: RoiPolicy,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            threshold: ROI_THRESHOLD,
            min_roi_area: MIN_ROI_AREA,
            max_iters_per_direction: 256,
            slab: 3,
            roi_policy: RoiPolicy::Adaptive,
        }
    }
}

/// Seed for one segmentation run: the starting slice is the box's slice.
#[derive(Debug, Clone, Copy)]
pub struct SeedSpec {
    pub roi: RoiBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// The predicted ROI fell below the minimum area.
    EmptyRoi,
    /// The walk reached past the first or last slice.
    VolumeBound,
    /// The per-direction iteration cap tripped.
    IterationCap,
}

impl StopReason {
    fn tag(&self) -> &'static str {
        match self {
            StopReason::EmptyRoi => "empty_roi",
            StopReason::VolumeBound => "volume_bound",
            StopReason::IterationCap => "iteration_cap",
        }
    }

    fn from_tag(tag: &str) -> Option<StopReason> {
        match tag {
            "empty_roi" => Some(StopReason::EmptyRoi),
            "volume_bound" => Some(StopReason::VolumeBound),
            "iteration_cap" => Some(StopReason::IterationCap),
            _ => None,
        }
    }
}

/// One trace line: either a visited slice (box, segmented pixel count) or
/// the direction's terminal probe.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub direction: i8,
    pub slice: i64,
    pub input_box: Option<(usize, usize, usize, usize)>,
    pub seg_pixels: Option<usize>,
    pub terminal: Option<StopReason>,
    pub millis: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InferenceTrace {
    pub records: Vec<TraceRecord>,
}

impl InferenceTrace {
    pub fn visits(&self, direction: i8) -> usize {
        self.records
            .iter()
            .filter(|r| r.direction == direction && r.terminal.is_none())
            .count()
    }

    /// Records for one direction including its terminal probe.
    pub fn iterations(&self, direction: i8) -> usize {
        self.records.iter().filter(|r| r.direction == direction).count()
    }

    pub fn total_millis(&self) -> f64 {
        self.records.iter().map(|r| r.millis).sum()
    }

    /// Line-delimited log, one record per iteration.
    pub fn to_log(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let dir = if r.direction >= 0 { "+1" } else { "-1" };
            let _ = write!(out, "dir={dir} slice={}", r.slice);
            if let Some((x0, y0, x1, y1)) = r.input_box {
                let _ = write!(out, " box={x0},{y0},{x1},{y1}");
            }
            if let Some(px) = r.seg_pixels {
                let _ = write!(out, " seg_px={px}");
            }
            if let Some(t) = r.terminal {
                let _ = write!(out, " terminal={}", t.tag());
            }
            let _ = writeln!(out, " ms={:.3}", r.millis);
        }
        out
    }

    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_log()).map_err(|e| CoreError::io(path, e))
    }

    pub fn parse_log(text: &str) -> Result<InferenceTrace> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut rec = TraceRecord {
                direction: 0,
                slice: 0,
                input_box: None,
                seg_pixels: None,
                terminal: None,
                millis: 0.0,
            };
            let bad = |what: &str| {
                CoreError::Format(format!("trace line {}: bad {what}: {line:?}", i + 1))
            };
            for field in line.split_whitespace() {
                let (k, v) = field.split_once('=').ok_or_else(|| bad("field"))?;
                match k {
                    "dir" => rec.direction = v.parse().map_err(|_| bad("dir"))?,
                    "slice" => rec.slice = v.parse().map_err(|_| bad("slice"))?,
                    "box" => {
                        let parts: Vec<usize> = v
                            .split(',')
                            .map(|p| p.parse().map_err(|_| bad("box")))
                            .collect::<Result<_>>()?;
                        if parts.len() != 4 {
                            return Err(bad("box"));
                        }
                        rec.input_box = Some((parts[0], parts[1], parts[2], parts[3]));
                    }
                    "seg_px" => rec.seg_pixels = Some(v.parse().map_err(|_| bad("seg_px"))?),
                    "terminal" => {
                        rec.terminal = Some(StopReason::from_tag(v).ok_or_else(|| bad("terminal"))?)
                    }
                    "ms" => rec.millis = v.parse().map_err(|_| bad("ms"))?,
                    _ => return Err(bad("key")),
                }
            }
            records.push(rec);
        }
        Ok(InferenceTrace { records })
    }

    pub fn read_log(path: impl AsRef<Path>) -> Result<InferenceTrace> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::parse_log(&text)
    }
}

#[derive(Debug, Clone)]
pub struct SegResult {
    pub mask: BinaryMask3D,
    pub trace: InferenceTrace,
}

type Rect = (usize, usize, usize, usize);

/// Walks one direction, writing binarized slice segmentations into `mask`.
/// Returns this direction's trace records and, when requested, the box the
/// first iteration predicted for the opposite direction (used to hand the
/// seed slice's backward ROI to the second pass).
#[allow(clippy::too_many_arguments)]
pub fn run_direction(
    volume: &CtVolume,
    model: &dyn SliceSegmenter,
    config: &InferenceConfig,
    mask: &mut Array3<u8>,
    start_slice: i64,
    start_rect: Option<Rect>,
    step: i8,
    capture_opposite: bool,
) -> Result<(Vec<TraceRecord>, Option<Rect>)> {
    let dims = volume.dims();
    let (xs, ys, zs) = dims;
    let mut records = Vec::new();
    let mut opposite = None;
    let mut n = start_slice;
    let mut rect = start_rect;
    let mut iters = 0usize;
    loop {
        let t0 = Instant::now();
        let Some(r) = rect else {
            records.push(TraceRecord {
                direction: step,
                slice: n,
                input_box: None,
                seg_pixels: None,
                terminal: Some(StopReason::EmptyRoi),
                millis: t0.elapsed().as_secs_f64() * 1e3,
            });
            break;
        };
        if n < 0 || n >= zs as i64 {
            records.push(TraceRecord {
                direction: step,
                slice: n,
                input_box: Some(r),
                seg_pixels: None,
                terminal: Some(StopReason::VolumeBound),
                millis: t0.elapsed().as_secs_f64() * 1e3,
            });
            break;
        }
        if iters >= config.max_iters_per_direction {
            records.push(TraceRecord {
                direction: step,
                slice: n,
                input_box: Some(r),
                seg_pixels: None,
                terminal: Some(StopReason::IterationCap),
                millis: t0.elapsed().as_secs_f64() * 1e3,
            });
            break;
        }

        let roi = RoiBox {
            slice: n as usize,
            x_min: r.0,
            y_min: r.1,
            x_max: r.2,
            y_max: r.3,
        };
        let bundle = build_bundle(volume, &roi, config.slab)?;
        let out = model.predict(&bundle)?;
        let frame = bundle.frame;

        let mut seg_px = 0usize;
        for ((py, px), v) in out.seg.indexed_iter() {
            if *v >= config.threshold {
                let gx = frame.x0 + px;
                let gy = frame.y0 + py;
                if gx < xs && gy < ys {
                    mask[[n as usize, gy, gx]] = 1;
                    seg_px += 1;
                }
            }
        }

        if capture_opposite && iters == 0 {
            let opp_map = if step > 0 { &out.roi_prev } else { &out.roi_next };
            opposite = mask_to_roi_box(
                &opp_map.view(),
                &frame,
                config.threshold,
                config.min_roi_area,
                dims,
            )
            .map(|b| (b.x_min, b.y_min, b.x_max, b.y_max));
        }

        let next_rect = match config.roi_policy {
            RoiPolicy::Adaptive => {
                let next_map = if step > 0 { &out.roi_next } else { &out.roi_prev };
                mask_to_roi_box(
                    &next_map.view(),
                    &frame,
                    config.threshold,
                    config.min_roi_area,
                    dims,
                )
                .map(|b| (b.x_min, b.y_min, b.x_max, b.y_max))
            }
            RoiPolicy::Fixed => {
                if seg_px >= config.min_roi_area {
                    Some(r)
                } else {
                    None
                }
            }
        };

        records.push(TraceRecord {
            direction: step,
            slice: n,
            input_box: Some(r),
            seg_pixels: Some(seg_px),
            terminal: None,
            millis: t0.elapsed().as_secs_f64() * 1e3,
        });

        n += step as i64;
        rect = next_rect;
        iters += 1;
    }
    Ok((records, opposite))
}

/// Full bidirectional segmentation from one seed ROI. The seed slice is
/// segmented once, in the ascending pass; the descending pass starts from
/// the backward ROI that the seed iteration predicted.
pub fn segment_nodule(
    volume: &CtVolume,
    seed: &SeedSpec,
    model: &dyn SliceSegmenter,
    config: &InferenceConfig,
) -> Result<SegResult> {
    let dims = volume.dims();
    seed.roi.validate(dims)?;
    let (xs, ys, zs) = dims;
    let mut mask = Array3::<u8>::zeros((zs, ys, xs));
    let seed_rect = (
        seed.roi.x_min,
        seed.roi.y_min,
        seed.roi.x_max,
        seed.roi.y_max,
    );

    let (forward_records, backward_seed) = run_direction(
        volume,
        model,
        config,
        &mut mask,
        seed.roi.slice as i64,
        Some(seed_rect),
        1,
        true,
    )?;
    let backward_start = match config.roi_policy {
        RoiPolicy::Adaptive => backward_seed,
        // Fixed policy reuses the seed rectangle downward as well.
        RoiPolicy::Fixed => Some(seed_rect),
    };
    let (backward_records, _) = run_direction(
        volume,
        model,
        config,
        &mut mask,
        seed.roi.slice as i64 - 1,
        backward_start,
        -1,
        false,
    )?;

    let mut records = forward_records;
    records.extend(backward_records);
    Ok(SegResult {
        mask: BinaryMask3D::new(mask, volume.spacing())?,
        trace: InferenceTrace { records },
    })
}

/// Fusion rule for multi-view masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FuseMode {
    /// Voxelwise maximum (union).
    #[default]
    Union,
    /// At least two of the three views agree.
    Majority,
}

pub fn fuse_multiview(masks: &[BinaryMask3D; 3], mode: FuseMode) -> Result<BinaryMask3D> {
    let dims = masks[0].dims();
    for m in &masks[1..] {
        if m.dims() != dims {
            return Err(CoreError::ShapeMismatch(format!(
                "multi-view masks disagree: {:?} vs {dims:?}",
                m.dims()
            )));
        }
    }
    let mut out = masks[0].voxels().clone();
    match mode {
        FuseMode::Union => {
            for m in &masks[1..] {
                ndarray::Zip::from(&mut out).and(m.voxels()).for_each(|o, v| {
                    *o = (*o).max(*v);
                });
            }
        }
        FuseMode::Majority => {
            let mut counts = masks[0].voxels().mapv(|v| v as u8);
            for m in &masks[1..] {
                counts += m.voxels();
            }
            out = counts.mapv(|c| u8::from(c >= 2));
        }
    }
    BinaryMask3D::new(out, masks[0].spacing())
}

/// Slicing axis for a segmentation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Axial,
    Sagittal,
    Coronal,
}

/// Re-slices a volume so [`segment_nodule`]'s axial walk runs along the
/// requested axis. Sagittal stacks along original x, coronal along y.
pub fn permute_volume(volume: &CtVolume, view: View) -> Result<CtVolume> {
    let (xs, ys, zs) = volume.dims();
    let (sx, sy, sz) = volume.spacing();
    let v = volume.voxels();
    match view {
        View::Axial => Ok(volume.clone()),
        View::Sagittal => {
            let out = Array3::from_shape_fn((xs, zs, ys), |(nz, ny, nx)| v[[ny, nx, nz]]);
            CtVolume::new(out, (sy, sz, sx))
        }
        View::Coronal => {
            let out = Array3::from_shape_fn((ys, zs, xs), |(nz, ny, nx)| v[[ny, nz, nx]]);
            CtVolume::new(out, (sx, sz, sy))
        }
    }
}

/// Inverse of [`permute_volume`] for masks produced in a permuted frame.
pub fn permute_mask_back(mask: &BinaryMask3D, view: View, spacing: (f64, f64, f64)) -> Result<BinaryMask3D> {
    let m = mask.voxels();
    match view {
        View::Axial => BinaryMask3D::new(m.clone(), spacing),
        View::Sagittal => {
            // Forward map sent original (x, y, z) to permuted (nz, nx, ny) =
            // (x, y, z); original [z, y, x] = permuted [x, z, y].
            let (nzs, nys, nxs) = m.dim();
            let mut out = Array3::zeros((nys, nxs, nzs));
            for z in 0..nzs {
                for y in 0..nys {
                    for x in 0..nxs {
                        if m[[z, y, x]] == 1 {
                            out[[y, x, z]] = 1;
                        }
                    }
                }
            }
            BinaryMask3D::new(out, spacing)
        }
        View::Coronal => {
            let (nzs, nys, nxs) = m.dim();
            let mut out = Array3::zeros((nys, nzs, nxs));
            for z in 0..nzs {
                for y in 0..nys {
                    for x in 0..nxs {
                        if m[[z, y, x]] == 1 {
                            out[[y, z, x]] = 1;
                        }
                    }
                }
            }
            BinaryMask3D::new(out, spacing)
        }
    }
}

/// Derives a fixed seed for a permuted view from an axial result: mid slice
/// of the permuted nodule extent and the bounding rectangle over all its
/// slices.
pub fn derive_view_seed(axial_mask: &BinaryMask3D, view: View) -> Result<Option<SeedSpec>> {
    let permuted = permute_mask_for_view(axial_mask, view)?;
    let Some((z_lo, z_hi)) = permuted.z_extent() else {
        return Ok(None);
    };
    let (xs, ys, _) = permuted.dims();
    let mut x_min = xs;
    let mut y_min = ys;
    let mut x_max = 0usize;
    let mut y_max = 0usize;
    for z in z_lo..=z_hi {
        let plane = permuted.slice(z);
        for ((y, x), v) in plane.indexed_iter() {
            if *v == 1 {
                x_min = x_min.min(x);
                y_min = y_min.min(y);
                x_max = x_max.max(x);
                y_max = y_max.max(y);
            }
        }
    }
    Ok(Some(SeedSpec {
        roi: RoiBox {
            slice: (z_lo + z_hi) / 2,
            x_min,
            y_min,
            x_max,
            y_max,
        },
    }))
}

fn permute_mask_for_view(mask: &BinaryMask3D, view: View) -> Result<BinaryMask3D> {
    let m = mask.voxels();
    let (zs, ys, xs) = m.dim();
    match view {
        View::Axial => Ok(mask.clone()),
        View::Sagittal => {
            let out = Array3::from_shape_fn((xs, zs, ys), |(nz, ny, nx)| m[[ny, nx, nz]]);
            BinaryMask3D::new(out, mask.spacing())
        }
        View::Coronal => {
            let out = Array3::from_shape_fn((ys, zs, xs), |(nz, ny, nx)| m[[ny, nz, nx]]);
            BinaryMask3D::new(out, mask.spacing())
        }
    }
}

/// Axial run plus fixed-ROI sagittal/coronal runs, fused.
pub fn segment_multiview(
    volume: &CtVolume,
    seed: &SeedSpec,
    model: &dyn SliceSegmenter,
    config: &InferenceConfig,
    fuse: FuseMode,
) -> Result<SegResult> {
    let axial = segment_nodule(volume, seed, model, config)?;
    if axial.mask.is_empty() {
        return Ok(axial);
    }
    let fixed_cfg = InferenceConfig {
        roi_policy: RoiPolicy::Fixed,
        ..*config
    };
    let mut view_masks = vec![axial.mask.clone()];
    for view in [View::Sagittal, View::Coronal] {
        let permuted = permute_volume(volume, view)?;
        match derive_view_seed(&axial.mask, view)? {
            Some(view_seed) => {
                let res = segment_nodule(&permuted, &view_seed, model, &fixed_cfg)?;
                view_masks.push(permute_mask_back(&res.mask, view, volume.spacing())?);
            }
            None => view_masks.push(BinaryMask3D::zeros(volume.dims(), volume.spacing())?),
        }
    }
    let fused = fuse_multiview(
        &[
            view_masks[0].clone(),
            view_masks[1].clone(),
            view_masks[2].clone(),
        ],
        fuse,
    )?;
    Ok(SegResult {
        mask: fused,
        trace: axial.trace,
    })
}

/// Diameter bucket edges in mm: 3-5, 5-10, 10-15, 15-20, 20-25, 25-30, >30.
pub const DEFAULT_DIAMETER_BUCKETS: [f64; 7] = [3.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0];

#[derive(Debug, Clone, PartialEq)]
pub struct TimingBucket {
    pub lo_mm: f64,
    pub hi_mm: Option<f64>,
    pub count: usize,
    pub mean_millis: f64,
}

/// Mean wall-clock per nodule, grouped by diameter bucket.
pub fn timing_report(
    nodules: &[(f64, InferenceTrace)],
    bucket_edges: &[f64],
) -> Result<Vec<TimingBucket>> {
    if nodules.is_empty() {
        return Err(CoreError::Validation("timing report needs >= 1 trace".into()));
    }
    if bucket_edges.len() < 2 {
        return Err(CoreError::Validation("need >= 2 bucket edges".into()));
    }
    let mut buckets: Vec<TimingBucket> = Vec::new();
    for w in bucket_edges.windows(2) {
        buckets.push(TimingBucket {
            lo_mm: w[0],
            hi_mm: Some(w[1]),
            count: 0,
            mean_millis: 0.0,
        });
    }
    buckets.push(TimingBucket {
        lo_mm: *bucket_edges.last().expect("nonempty edges"),
        hi_mm: None,
        count: 0,
        mean_millis: 0.0,
    });
    for (diameter, trace) in nodules {
        let idx = buckets
            .iter()
            .position(|b| {
                *diameter >= b.lo_mm && b.hi_mm.map(|hi| *diameter < hi).unwrap_or(true)
            })
            .unwrap_or(0);
        let b = &mut buckets[idx];
        b.mean_millis += trace.total_millis();
        b.count += 1;
    }
    for b in &mut buckets {
        if b.count > 0 {
            b.mean_millis /= b.count as f64;
        }
    }
    Ok(buckets)
}
