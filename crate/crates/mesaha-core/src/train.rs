//! Dataset construction from annotated volumes and the optimization loop.
//!
//! Nodule samples take one slice each: the input ROI is the nodule bounding
//! box enlarged 30% by area, the targets are the slice's ground truth plus
//! ideal adjacent-slice ROI rectangles (20% margin per side). Background
//! samples are random lung patches with no nodule anywhere in the MIP slab
//! and all-zero targets.

use crate::error::{CoreError, Result};
use crate::loss::{total_loss, LossConfig, SliceTargets, TotalLoss};
use crate::metrics::MetricReport;
use crate::net::{Model, NetInputs};
use crate::nn::{Elem, GradStore, NormMode, Params, Tape};
use crate::preproc::{
    build_bundle, crop_patch, ideal_adjacent_roi, training_input_roi,
    PatchBundle, PatchFrame, RoiBox,
};
use crate::volume::{BinaryMask3D, CtVolume};
use ndarray::{Array2, Array4, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// One annotated volume.
#[derive(Debug, Clone)]
pub struct TrainCase {
    pub id: String,
    pub volume: CtVolume,
    pub gt: BinaryMask3D,
}

#[derive(Debug, Clone, Copy)]
pub struct DatasetSpec {
    /// Requested nodule-slice samples; 0 means every available slice. When
    /// the corpus has fewer slices than requested, the pool is resampled
    /// with replacement; when it has more, a seeded subsample is taken.
    pub n_nodule: usize,
    pub n_background: usize,
    pub input_roi_enlargement: f64,
    pub target_roi_margin: f64,
    pub slab: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_nodule: 0,
            n_background: 0,
            input_roi_enlargement: 0.3,
            target_roi_margin: 0.2,
            slab: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    Nodule,
    Background,
}

#[derive(Debug, Clone)]
pub struct SampleProvenance {
    pub case_id: String,
    pub slice: usize,
    pub kind: SampleKind,
}

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub bundle: PatchBundle,
    pub targets: SliceTargets,
    pub provenance: SampleProvenance,
}

/// HU band treated as lung parenchyma when sampling background patches.
const LUNG_HU_BAND: (i16, i16) = (-950, -300);

fn crop_gt_plane(gt: &BinaryMask3D, frame: &PatchFrame, z: i64) -> Array2<u8> {
    let (xs, ys, zs) = gt.dims();
    if z < 0 || z >= zs as i64 {
        return Array2::zeros((frame.side, frame.side));
    }
    let plane = gt.slice(z as usize);
    Array2::from_shape_fn((frame.side, frame.side), |(py, px)| {
        let gx = frame.x0 + px;
        let gy = frame.y0 + py;
        if gx < xs && gy < ys {
            plane[[gy, gx]]
        } else {
            0
        }
    })
}

fn nodule_sample(case: &TrainCase, z: usize, spec: &DatasetSpec) -> Result<TrainSample> {
    let roi = training_input_roi(&case.gt.slice(z), z, spec.input_roi_enlargement)?;
    let bundle = build_bundle(&case.volume, &roi, spec.slab)?;
    let frame = bundle.frame;
    let gt_seg = crop_gt_plane(&case.gt, &frame, z as i64);
    let roi_prev = ideal_adjacent_roi(
        &crop_gt_plane(&case.gt, &frame, z as i64 - 1).view(),
        spec.target_roi_margin,
        frame,
    )?;
    let roi_next = ideal_adjacent_roi(
        &crop_gt_plane(&case.gt, &frame, z as i64 + 1).view(),
        spec.target_roi_margin,
        frame,
    )?;
    Ok(TrainSample {
        bundle,
        targets: SliceTargets {
            gt_seg,
            roi_prev,
            roi_next,
        },
        provenance: SampleProvenance {
            case_id: case.id.clone(),
            slice: z,
            kind: SampleKind::Nodule,
        },
    })
}

fn background_sample(
    cases: &[TrainCase],
    spec: &DatasetSpec,
    rng: &mut ChaCha8Rng,
) -> Result<TrainSample> {
    for _ in 0..500 {
        let case = &cases[rng.gen_range(0..cases.len())];
        let (xs, ys, zs) = case.volume.dims();
        let z = rng.gen_range(0..zs);
        let w = rng.gen_range(8..=32usize);
        let h = rng.gen_range(8..=32usize);
        let cx = rng.gen_range(0..xs);
        let cy = rng.gen_range(0..ys);
        let roi = RoiBox {
            slice: z,
            x_min: cx.saturating_sub(w / 2),
            y_min: cy.saturating_sub(h / 2),
            x_max: (cx + w / 2).min(xs - 1),
            y_max: (cy + h / 2).min(ys - 1),
        };
        let (patch, frame) = crop_patch(&case.volume, &roi)?;
        // No nodule anywhere the MIP slab can see.
        let mut clean = true;
        for dz in -(spec.slab as i64 - 1)..=(spec.slab as i64 - 1) {
            if crop_gt_plane(&case.gt, &frame, z as i64 + dz)
                .iter()
                .any(|v| *v == 1)
            {
                clean = false;
                break;
            }
        }
        if !clean {
            continue;
        }
        // Mostly lung-density content.
        let in_band = patch
            .iter()
            .filter(|v| **v >= LUNG_HU_BAND.0 && **v <= LUNG_HU_BAND.1)
            .count();
        if in_band * 2 < patch.len() {
            continue;
        }
        let bundle = build_bundle(&case.volume, &roi, spec.slab)?;
        let frame = bundle.frame;
        return Ok(TrainSample {
            bundle,
            targets: SliceTargets {
                gt_seg: Array2::zeros((frame.side, frame.side)),
                roi_prev: crate::preproc::RoiMask2D::empty(frame),
                roi_next: crate::preproc::RoiMask2D::empty(frame),
            },
            provenance: SampleProvenance {
                case_id: case.id.clone(),
                slice: z,
                kind: SampleKind::Background,
            },
        });
    }
    Err(CoreError::Validation(
        "could not find a nodule-free lung patch after 500 tries".into(),
    ))
}

/// Builds the sample list for one split. Deterministic under `spec.seed`.
pub fn build_samples(cases: &[TrainCase], spec: &DatasetSpec) -> Result<Vec<TrainSample>> {
    if cases.is_empty() {
        return Err(CoreError::Validation("no cases to sample from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pool: Vec<(usize, usize)> = Vec::new();
    for (ci, case) in cases.iter().enumerate() {
        if case.volume.dims() != case.gt.dims() {
            return Err(CoreError::ShapeMismatch(format!(
                "case {}: volume {:?} vs mask {:?}",
                case.id,
                case.volume.dims(),
                case.gt.dims()
            )));
        }
        let (_, _, zs) = case.gt.dims();
        for z in 0..zs {
            if case.gt.slice(z).iter().any(|v| *v == 1) {
                pool.push((ci, z));
            }
        }
    }
    if pool.is_empty() {
        return Err(CoreError::Validation("no nodule-bearing slices found".into()));
    }
    let selected: Vec<(usize, usize)> = if spec.n_nodule == 0 {
        pool
    } else if spec.n_nodule <= pool.len() {
        let mut shuffled = pool;
        shuffle(&mut shuffled, &mut rng);
        shuffled.truncate(spec.n_nodule);
        shuffled
    } else {
        // Resample with replacement to reach the requested count.
        let mut out = pool.clone();
        while out.len() < spec.n_nodule {
            out.push(pool[rng.gen_range(0..pool.len())]);
        }
        out
    };

    let mut samples = Vec::with_capacity(selected.len() + spec.n_background);
    for (ci, z) in selected {
        samples.push(nodule_sample(&cases[ci], z, spec)?);
    }
    for _ in 0..spec.n_background {
        samples.push(background_sample(cases, spec, &mut rng)?);
    }
    Ok(samples)
}

/// Convenience wrapper building both splits.
pub fn build_dataset(
    train_cases: &[TrainCase],
    val_cases: &[TrainCase],
    train_spec: &DatasetSpec,
    val_spec: &DatasetSpec,
) -> Result<(Vec<TrainSample>, Vec<TrainSample>)> {
    Ok((
        build_samples(train_cases, train_spec)?,
        build_samples(val_cases, val_spec)?,
    ))
}

/// Adam with bias correction.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
}

impl Adam {
    pub fn new(params: &Params<f32>, learning_rate: f64) -> Adam {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|(_, t)| ArrayD::zeros(t.data.raw_dim())).collect(),
            v: params.iter().map(|(_, t)| ArrayD::zeros(t.data.raw_dim())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut Params<f32>, grads: &GradStore<f32>) {
        self.t += 1;
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let bc1 = 1.0 - (self.beta1).powi(self.t as i32);
        let bc2 = 1.0 - (self.beta2).powi(self.t as i32);
        let lr = self.learning_rate as f32;
        let eps = self.eps as f32;
        for (id, tensor) in params.iter_mut() {
            if !tensor.trainable {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            ndarray::Zip::from(&mut tensor.data)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1 as f32;
                    let vhat = *v / bc2 as f32;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
    /// Momentum for the normalization layers' running statistics.
    pub norm_momentum: f64,
    /// Hard wall-clock budget; the loop finishes the epoch in flight and
    /// stops once exceeded.
    pub max_wall_secs: Option<f64>,
    /// Stop once validation DSC reaches this value.
    pub early_stop_val_dsc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 15,
            learning_rate: 1e-3,
            epochs: 200,
            seed: 0,
            loss: LossConfig::default(),
            norm_momentum: 0.9,
            max_wall_secs: None,
            early_stop_val_dsc: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dsc: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// The checkpoint with the best validation DSC seen.
    pub model: Model<f32>,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
    pub diverged: bool,
}

fn plane_f64<E: Elem>(v: &Array4<E>, i: usize) -> Array2<f64> {
    let side = v.dim().2;
    Array2::from_shape_fn((side, side), |(y, x)| v[[i, 0, y, x]].to_f64())
}

/// Loss (value + head gradients) for every sample of a batched forward pass.
fn batch_losses(
    tape: &Tape<f32>,
    trace: &crate::net::ForwardTrace,
    batch: &[&TrainSample],
    loss_cfg: &LossConfig,
) -> Result<Vec<TotalLoss>> {
    let seg_v = tape.value(trace.seg);
    let prev_v = tape.value(trace.roi_prev);
    let next_v = tape.value(trace.roi_next);
    batch
        .iter()
        .enumerate()
        .map(|(i, sample)| {
            total_loss(
                &plane_f64(seg_v, i).view(),
                &plane_f64(prev_v, i).view(),
                &plane_f64(next_v, i).view(),
                &sample.targets,
                loss_cfg,
            )
        })
        .collect()
}

/// Slice-level binary DSC of the segmentation head against the target.
fn sample_dsc(seg: &Array2<f64>, gt: &Array2<u8>) -> f64 {
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for (s, g) in seg.iter().zip(gt.iter()) {
        let s1 = *s >= 0.5;
        match (s1, *g == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Mean loss and mean slice DSC over a sample set, inference-mode forward.
pub fn evaluate_samples(
    model: &Model<f32>,
    samples: &[TrainSample],
    batch_size: usize,
    loss_cfg: &LossConfig,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut loss_sum = 0.0;
    let mut dsc_sum = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&TrainSample> = chunk.iter().collect();
        let bundles: Vec<&PatchBundle> = refs.iter().map(|s| &s.bundle).collect();
        let inputs = NetInputs::<f32>::from_bundles(&bundles)?;
        let mut tape = Tape::new(NormMode::Inference);
        let trace = model.forward_on_tape(&mut tape, &inputs)?;
        let losses = batch_losses(&tape, &trace, &refs, loss_cfg)?;
        let seg_v = tape.value(trace.seg);
        for (i, l) in losses.iter().enumerate() {
            loss_sum += l.value;
            dsc_sum += sample_dsc(&plane_f64(seg_v, i), &refs[i].targets.gt_seg);
        }
    }
    let n = samples.len() as f64;
    Ok((loss_sum / n, dsc_sum / n))
}

/// Mini-batch optimization of the composite loss. Keeps the checkpoint with
/// the best validation DSC; a non-finite loss aborts with the last good
/// checkpoint and the `diverged` flag set.
pub fn train(
    mut model: Model<f32>,
    train_samples: &[TrainSample],
    val_samples: &[TrainSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_samples.is_empty() {
        return Err(CoreError::Validation("empty training set".into()));
    }
    if config.batch_size == 0 {
        return Err(CoreError::Validation("batch size must be >= 1".into()));
    }
    config.loss.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&model.params, config.learning_rate);
    let mut history = Vec::new();
    let mut best = model.clone();
    let mut best_val_dsc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let momentum = config.norm_momentum as f32;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&TrainSample> = chunk.iter().map(|i| &train_samples[*i]).collect();
            let bundles: Vec<&PatchBundle> = refs.iter().map(|s| &s.bundle).collect();
            let inputs = NetInputs::<f32>::from_bundles(&bundles)?;
            let mut tape = Tape::new(NormMode::Train);
            let trace = model.forward_on_tape(&mut tape, &inputs)?;
            let losses = match batch_losses(&tape, &trace, &refs, &config.loss) {
                Ok(l) => l,
                Err(CoreError::NonFinite(what)) => {
                    return Ok(TrainOutcome {
                        model: best,
                        history,
                        best_epoch,
                        best_val_dsc: best_val_dsc.max(0.0),
                        diverged: true,
                    })
                    .map(|mut o| {
                        o.history.push(EpochStats {
                            epoch,
                            train_loss: f64::NAN,
                            val_loss: f64::NAN,
                            val_dsc: f64::NAN,
                        });
                        let _ = what;
                        o
                    });
                }
                Err(e) => return Err(e),
            };
            let n = refs.len();
            let side = refs[0].bundle.side();
            let mut seed_seg = Array4::<f32>::zeros((n, 1, side, side));
            let mut seed_prev = Array4::<f32>::zeros((n, 1, side, side));
            let mut seed_next = Array4::<f32>::zeros((n, 1, side, side));
            let scale = 1.0 / n as f64;
            let mut batch_loss = 0.0;
            for (i, l) in losses.iter().enumerate() {
                batch_loss += l.value * scale;
                for y in 0..side {
                    for x in 0..side {
                        seed_seg[[i, 0, y, x]] = (l.grad_seg[[y, x]] * scale) as f32;
                        seed_prev[[i, 0, y, x]] = (l.grad_prev[[y, x]] * scale) as f32;
                        seed_next[[i, 0, y, x]] = (l.grad_next[[y, x]] * scale) as f32;
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Ok(TrainOutcome {
                    model: best,
                    history,
                    best_epoch,
                    best_val_dsc: best_val_dsc.max(0.0),
                    diverged: true,
                });
            }
            let grads = tape.backward(
                &model.params,
                vec![
                    (trace.seg, seed_seg),
                    (trace.roi_prev, seed_prev),
                    (trace.roi_next, seed_next),
                ],
            );
            adam.step(&mut model.params, &grads);
            let mut tape = tape;
            for up in tape.take_stat_updates() {
                let mean = up.mean;
                let var = up.var;
                let rm = model.params.get_mut(up.run_mean);
                ndarray::Zip::from(rm)
                    .and(&mean.view().into_dyn())
                    .for_each(|r, m| {
                        *r = momentum * *r + (1.0 - momentum) * m;
                    });
                let rv = model.params.get_mut(up.run_var);
                ndarray::Zip::from(rv)
                    .and(&var.view().into_dyn())
                    .for_each(|r, v| {
                        *r = momentum * *r + (1.0 - momentum) * v;
                    });
            }
            epoch_loss += batch_loss;
            batches += 1;
        }
        epoch_loss /= batches.max(1) as f64;

        let (val_loss, val_dsc) = if val_samples.is_empty() {
            (epoch_loss, f64::NAN)
        } else {
            evaluate_samples(&model, val_samples, config.batch_size, &config.loss)?
        };
        history.push(EpochStats {
            epoch,
            train_loss: epoch_loss,
            val_loss,
            val_dsc,
        });
        // Prefer validation DSC; fall back to train loss when no val set.
        let score = if val_samples.is_empty() { -epoch_loss } else { val_dsc };
        if score > best_val_dsc {
            best_val_dsc = score;
            best = model.clone();
            best_epoch = epoch;
        }
        if let Some(target) = config.early_stop_val_dsc {
            if !val_samples.is_empty() && val_dsc >= target {
                break;
            }
        }
        if let Some(budget) = config.max_wall_secs {
            if start.elapsed().as_secs_f64() > budget {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
        best_val_dsc,
        diverged: false,
    })
}

/// Seed ROI for evaluating one nodule: the enlarged bounding box on the
/// middle slice of its extent.
pub fn default_eval_seed(gt: &BinaryMask3D, enlargement: f64) -> Result<crate::infer::SeedSpec> {
    let (z_lo, z_hi) = gt
        .z_extent()
        .ok_or_else(|| CoreError::Validation("empty ground truth has no seed".into()))?;
    let mid = (z_lo + z_hi) / 2;
    let roi = training_input_roi(&gt.slice(mid), mid, enlargement)?;
    Ok(crate::infer::SeedSpec { roi })
}

/// Runs the full segmentation pipeline on each case and scores it against
/// the ground truth.
pub fn evaluate_checkpoint(
    model: &Model<f32>,
    cases: &[TrainCase],
    infer_config: &crate::infer::InferenceConfig,
) -> Result<Vec<(String, MetricReport, crate::infer::InferenceTrace)>> {
    let mut out = Vec::with_capacity(cases.len());
    for case in cases {
        let seed = default_eval_seed(&case.gt, 0.3)?;
        let result = crate::infer::segment_nodule(&case.volume, &seed, model, infer_config)?;
        let report = crate::metrics::compute_report(
            &result.mask,
            &case.gt,
            crate::metrics::DistanceMode::Surface,
        )?;
        out.push((case.id.clone(), report, result.trace));
    }
    Ok(out)
}

/// History CSV: `epoch,train_loss,val_loss,val_dsc` rows.
pub fn history_to_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_dsc\n");
    for h in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            h.epoch, h.train_loss, h.val_loss, h.val_dsc
        ));
    }
    out
}

pub fn history_from_csv(text: &str) -> Result<Vec<EpochStats>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(CoreError::Format(format!(
                "history line {}: expected 4 fields, got {}",
                i + 1,
                f.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| CoreError::Format(format!("history line {}: bad number {s:?}", i + 1)))
        };
        out.push(EpochStats {
            epoch: f[0]
                .parse()
                .map_err(|_| CoreError::Format(format!("history line {}: bad epoch", i + 1)))?,
            train_loss: num(f[1])?,
            val_loss: num(f[2])?,
            val_dsc: num(f[3])?,
        });
    }
    Ok(out)
}


#[cfg(test)]
mod bench_probe {
    use super::*;
    use crate::net::{ArchConfig, AttentionCombine, Model};

    #[test]
    #[ignore]
    fn probe_batch_step_time() {
        for base in [4usize, 6, 8] {
            let cfg = ArchConfig {
                base_channels: base,
                levels: 4,
                patch_side: 96,
                attention: AttentionCombine::Multiplicative,
            };
            let model = Model::<f32>::init(cfg, 1).unwrap();
            let case = tests_probe_case();
            let spec = DatasetSpec { n_nodule: 15, seed: 1, ..DatasetSpec::default() };
            let samples = build_samples(&[case], &spec).unwrap();
            let tcfg = TrainConfig {
                batch_size: 15,
                epochs: 2,
                loss: LossConfig::default(),
                ..TrainConfig::default()
            };
            let t0 = std::time::Instant::now();
            let _ = train(model, &samples, &[], &tcfg).unwrap();
            println!(
                "base {base}: {:.2} s per epoch (one 15-sample batch)",
                t0.elapsed().as_secs_f64() / 2.0
            );
        }
    }

    fn tests_probe_case() -> TrainCase {
        use crate::phantom::{generate_phantom, NoduleSpec, PhantomSpec};
        let spec = PhantomSpec {
            dims: (96, 96, 32),
            nodules: vec![NoduleSpec {
                center_vox: (48.0, 48.0, 16.0),
                semi_axes_mm: (8.0, 7.0, 6.0),
                hu: 10.0,
                edge_sigma_mm: 1.0,
                lobulation: 0.0,
            }],
            seed: 3,
            ..PhantomSpec::default()
        };
        let (volume, masks, _) = generate_phantom(&spec).unwrap();
        TrainCase { id: "probe".into(), volume, gt: masks.into_iter().next().unwrap() }
    }
}
