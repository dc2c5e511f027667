//! Synthetic CT phantoms: ellipsoidal (optionally lobulated) nodules over a
//! noisy lung-density background with vessel-like distractors, plus simulated
//! multi-rater annotations. Deterministic under seed at byte level.

use crate::edt::squared_edt_3d;
use crate::error::{CoreError, Result};
use crate::volume::{BinaryMask3D, CtVolume, NoduleRecord, RaterAnnotationSet};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct NoduleSpec {
    /// Ellipsoid center in voxel coordinates (x, y, z).
    pub center_vox: (f64, f64, f64),
    /// Semi-axes in mm along x, y, z.
    pub semi_axes_mm: (f64, f64, f64),
    /// Plateau intensity of the nodule.
    pub hu: f64,
    /// Width of the sigmoid intensity ramp at the boundary, in mm.
    pub edge_sigma_mm: f64,
    /// Relative radial perturbation amplitude (0 = exact ellipsoid).
    pub lobulation: f64,
}

#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub dims: (usize, usize, usize),
    pub spacing: (f64, f64, f64),
    pub lung_hu_mean: f64,
    pub lung_hu_sigma: f64,
    pub vessel_count: usize,
    pub vessel_radius_mm: f64,
    pub vessel_hu: f64,
    pub nodules: Vec<NoduleSpec>,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: (96, 96, 40),
            spacing: (1.0, 1.0, 1.0),
            lung_hu_mean: -850.0,
            lung_hu_sigma: 30.0,
            vessel_count: 3,
            vessel_radius_mm: 1.2,
            vessel_hu: -30.0,
            nodules: Vec::new(),
            seed: 0,
        }
    }
}

/// Margin (voxels) the nodule support must keep from the volume faces.
const LUNG_FIELD_MARGIN: f64 = 2.0;

/// Past this many sigmas the edge ramp is clamped to an exact plateau, so
/// noise-free phantoms are exactly piecewise constant away from boundaries.
const EDGE_CUTOFF_SIGMAS: f64 = 4.0;

struct NoduleGeometry<'a> {
    spec: &'a NoduleSpec,
    center_mm: (f64, f64, f64),
}

impl NoduleGeometry<'_> {
    /// Normalized radius (1.0 on the unperturbed surface) and the local
    /// surface scale for the lobulated boundary at this voxel.
    fn radius_at(&self, pos_mm: (f64, f64, f64)) -> (f64, f64, f64) {
        let dx = pos_mm.0 - self.center_mm.0;
        let dy = pos_mm.1 - self.center_mm.1;
        let dz = pos_mm.2 - self.center_mm.2;
        let (a, b, c) = self.spec.semi_axes_mm;
        let rho = ((dx / a).powi(2) + (dy / b).powi(2) + (dz / c).powi(2)).sqrt();
        let dist = (dx * dx + dy * dy + dz * dz).sqrt();
        let surface_scale = if dist > 1e-9 && self.spec.lobulation > 0.0 {
            let theta = dy.atan2(dx);
            let phi = (dz / dist).clamp(-1.0, 1.0).acos();
            1.0 + self.spec.lobulation * (3.0 * theta).sin() * (2.0 * phi).sin()
        } else {
            1.0
        };
        (rho, surface_scale, dist)
    }

    fn inside(&self, pos_mm: (f64, f64, f64)) -> bool {
        let (rho, scale, _) = self.radius_at(pos_mm);
        rho <= scale
    }

    /// Approximate signed distance (mm) to the lobulated surface, negative
    /// inside: the radial gap scaled back to physical units along the ray.
    fn signed_distance(&self, pos_mm: (f64, f64, f64)) -> f64 {
        let (rho, scale, dist) = self.radius_at(pos_mm);
        if rho <= 1e-9 {
            let (a, b, c) = self.spec.semi_axes_mm;
            return -a.min(b).min(c);
        }
        dist * (rho - scale) / rho
    }
}

fn validate_nodule(spec: &PhantomSpec, n: &NoduleSpec) -> Result<()> {
    let (a, b, c) = n.semi_axes_mm;
    if !(a > 0.0 && b > 0.0 && c > 0.0) {
        return Err(CoreError::Validation(format!(
            "semi-axes must be positive, got {:?}",
            n.semi_axes_mm
        )));
    }
    let (sx, sy, sz) = spec.spacing;
    let (xs, ys, zs) = spec.dims;
    // Support reach: surface (with lobulation) plus the finite edge ramp.
    let lob = 1.0 + n.lobulation;
    let reach = (
        a * lob + EDGE_CUTOFF_SIGMAS * n.edge_sigma_mm,
        b * lob + EDGE_CUTOFF_SIGMAS * n.edge_sigma_mm,
        c * lob + EDGE_CUTOFF_SIGMAS * n.edge_sigma_mm,
    );
    let lo = (
        n.center_vox.0 * sx - reach.0,
        n.center_vox.1 * sy - reach.1,
        n.center_vox.2 * sz - reach.2,
    );
    let hi = (
        n.center_vox.0 * sx + reach.0,
        n.center_vox.1 * sy + reach.1,
        n.center_vox.2 * sz + reach.2,
    );
    let min_ok = lo.0 >= LUNG_FIELD_MARGIN * sx
        && lo.1 >= LUNG_FIELD_MARGIN * sy
        && lo.2 >= LUNG_FIELD_MARGIN * sz;
    let max_ok = hi.0 <= ((xs - 1) as f64 - LUNG_FIELD_MARGIN) * sx
        && hi.1 <= ((ys - 1) as f64 - LUNG_FIELD_MARGIN) * sy
        && hi.2 <= ((zs - 1) as f64 - LUNG_FIELD_MARGIN) * sz;
    if !(min_ok && max_ok) {
        return Err(CoreError::Validation(format!(
            "nodule at {:?} with reach {reach:?} extends outside the lung field",
            n.center_vox
        )));
    }
    Ok(())
}

/// Builds the HU volume, one ground-truth mask per nodule, and a
/// characteristics record per nodule. Pure function of the spec (the spec's
/// seed drives all randomness).
pub fn generate_phantom(
    spec: &PhantomSpec,
) -> Result<(CtVolume, Vec<BinaryMask3D>, Vec<NoduleRecord>)> {
    let (xs, ys, zs) = spec.dims;
    let (sx, sy, sz) = spec.spacing;
    for n in &spec.nodules {
        validate_nodule(spec, n)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Background lung texture.
    let mut field = Array3::<f64>::zeros((zs, ys, xs));
    for v in field.iter_mut() {
        let noise: f64 = if spec.lung_hu_sigma > 0.0 {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                * spec.lung_hu_sigma
        } else {
            0.0
        };
        *v = spec.lung_hu_mean + noise;
    }

    let geoms: Vec<NoduleGeometry> = spec
        .nodules
        .iter()
        .map(|n| NoduleGeometry {
            spec: n,
            center_mm: (n.center_vox.0 * sx, n.center_vox.1 * sy, n.center_vox.2 * sz),
        })
        .collect();

    // Vessel-like distractors: random lines at soft-tissue density, kept
    // clear of every nodule's edge ramp.
    for _ in 0..spec.vessel_count {
        let p0 = (
            rng.gen_range(0.0..xs as f64) * sx,
            rng.gen_range(0.0..ys as f64) * sy,
            rng.gen_range(0.0..zs as f64) * sz,
        );
        let dir = loop {
            let d = (
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0f64),
            );
            let norm = (d.0 * d.0 + d.1 * d.1 + d.2 * d.2).sqrt();
            if norm > 1e-3 {
                break (d.0 / norm, d.1 / norm, d.2 / norm);
            }
        };
        for z in 0..zs {
            for y in 0..ys {
                for x in 0..xs {
                    let q = (x as f64 * sx, y as f64 * sy, z as f64 * sz);
                    let r = (q.0 - p0.0, q.1 - p0.1, q.2 - p0.2);
                    let cross = (
                        r.1 * dir.2 - r.2 * dir.1,
                        r.2 * dir.0 - r.0 * dir.2,
                        r.0 * dir.1 - r.1 * dir.0,
                    );
                    let d_line =
                        (cross.0 * cross.0 + cross.1 * cross.1 + cross.2 * cross.2).sqrt();
                    if d_line > spec.vessel_radius_mm {
                        continue;
                    }
                    let clear = geoms.iter().all(|g| {
                        g.signed_distance(q)
                            > EDGE_CUTOFF_SIGMAS * g.spec.edge_sigma_mm
                    });
                    if clear {
                        field[[z, y, x]] = spec.vessel_hu;
                    }
                }
            }
        }
    }

    // Nodules: hard mask from the lobulated ellipsoid, soft intensity ramp.
    let mut masks = Vec::with_capacity(spec.nodules.len());
    for g in &geoms {
        let mut mask = Array3::<u8>::zeros((zs, ys, xs));
        for z in 0..zs {
            for y in 0..ys {
                for x in 0..xs {
                    let q = (x as f64 * sx, y as f64 * sy, z as f64 * sz);
                    let d = g.signed_distance(q);
                    let sigma = g.spec.edge_sigma_mm.max(1e-6);
                    if d <= -EDGE_CUTOFF_SIGMAS * sigma {
                        field[[z, y, x]] = g.spec.hu;
                    } else if d < EDGE_CUTOFF_SIGMAS * sigma {
                        let w = 1.0 / (1.0 + (d / sigma).exp());
                        let base = field[[z, y, x]];
                        field[[z, y, x]] = base + (g.spec.hu - base) * w;
                    }
                    if g.inside(q) {
                        mask[[z, y, x]] = 1;
                    }
                }
            }
        }
        masks.push(BinaryMask3D::new(mask, spec.spacing)?);
    }

    let voxels = field.mapv(|v| v.round().clamp(-4096.0, 4095.0) as i16);
    let volume = CtVolume::new(voxels, spec.spacing)?;

    // Characteristic scores: sphericity derives from the axis ratio, the
    // rest are seeded ordinals.
    let mut records = Vec::with_capacity(spec.nodules.len());
    for n in &spec.nodules {
        let (a, b, c) = n.semi_axes_mm;
        let max_axis = a.max(b).max(c);
        let min_axis = a.min(b).min(c);
        let sphericity = (1.0 + 4.0 * min_axis / max_axis).round().clamp(1.0, 5.0) as u8;
        let rec = NoduleRecord {
            subtlety: rng.gen_range(1..=5),
            internal_structure: 1,
            calcification: rng.gen_range(2..=6),
            sphericity,
            margin: rng.gen_range(1..=5),
            lobulation: (1.0 + n.lobulation * 20.0).round().clamp(1.0, 5.0) as u8,
            spiculation: rng.gen_range(1..=5),
            texture: rng.gen_range(1..=5),
            malignancy: rng.gen_range(1..=5),
            diameter_mm: 2.0 * max_axis,
        };
        rec.validate()?;
        records.push(rec);
    }
    Ok((volume, masks, records))
}

/// Simulates `count` raters by thresholding the ground truth's signed
/// distance field at a smooth random offset bounded by `jitter_mm`, which
/// dilates or erodes the boundary locally. Jitter 0 reproduces the ground
/// truth exactly.
pub fn simulate_raters(
    gt: &BinaryMask3D,
    jitter_mm: f64,
    count: usize,
    seed: u64,
) -> Result<RaterAnnotationSet> {
    if gt.is_empty() {
        return Err(CoreError::Validation(
            "cannot simulate raters for an empty ground truth".into(),
        ));
    }
    if count == 0 {
        return Err(CoreError::Validation("rater count must be >= 1".into()));
    }
    let (xs, ys, zs) = gt.dims();
    let spacing = gt.spacing();
    let fg = gt.voxels().mapv(|v| v == 1);
    let bg = fg.mapv(|v| !v);
    let d_fg = squared_edt_3d(&fg, spacing);
    let d_bg = squared_edt_3d(&bg, spacing);
    // Signed distance in mm: negative inside.
    let phi = ndarray::Zip::from(&fg)
        .and(&d_fg)
        .and(&d_bg)
        .map_collect(|inside, dfg, dbg| {
            if *inside {
                -dbg.sqrt()
            } else {
                dfg.sqrt()
            }
        });

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::with_capacity(count);
    let mut masks = Vec::with_capacity(count);
    for r in 0..count {
        // Smooth offset field: average of three random plane waves scaled to
        // at most jitter_mm.
        let waves: Vec<([f64; 3], f64)> = (0..3)
            .map(|_| {
                let wavelength = rng.gen_range(8.0..25.0);
                let k = 2.0 * std::f64::consts::PI / wavelength;
                let dir = (
                    rng.gen_range(-1.0..1.0f64),
                    rng.gen_range(-1.0..1.0f64),
                    rng.gen_range(-1.0..1.0f64),
                );
                let norm = (dir.0 * dir.0 + dir.1 * dir.1 + dir.2 * dir.2)
                    .sqrt()
                    .max(1e-6);
                (
                    [k * dir.0 / norm, k * dir.1 / norm, k * dir.2 / norm],
                    rng.gen_range(0.0..2.0 * std::f64::consts::PI),
                )
            })
            .collect();
        let mut mask = Array3::<u8>::zeros((zs, ys, xs));
        for z in 0..zs {
            for y in 0..ys {
                for x in 0..xs {
                    let q = [
                        x as f64 * spacing.0,
                        y as f64 * spacing.1,
                        z as f64 * spacing.2,
                    ];
                    let mut s = 0.0;
                    for (k, phase) in &waves {
                        s += (k[0] * q[0] + k[1] * q[1] + k[2] * q[2] + phase).cos();
                    }
                    let offset = jitter_mm * s / 3.0;
                    if phi[[z, y, x]] <= offset {
                        mask[[z, y, x]] = 1;
                    }
                }
            }
        }
        ids.push(format!("R{}", r + 1));
        masks.push(BinaryMask3D::new(mask, spacing)?);
    }
    RaterAnnotationSet::new(ids, masks)
}

/// Sampling ranges for corpus generation.
#[derive(Debug, Clone)]
pub struct CorpusRanges {
    pub dims: (usize, usize, usize),
    pub spacing: (f64, f64, f64),
    pub diameter_mean_mm: f64,
    pub diameter_sd_mm: f64,
    pub diameter_range_mm: (f64, f64),
    pub nodule_hu_range: (f64, f64),
    pub lung_hu_mean: f64,
    pub lung_hu_sigma: f64,
    pub vessel_count: usize,
    pub lobulation_max: f64,
    pub edge_sigma_mm: f64,
}

impl Default for CorpusRanges {
    fn default() -> Self {
        CorpusRanges {
            dims: (96, 96, 40),
            spacing: (1.0, 1.0, 1.0),
            diameter_mean_mm: 9.54,
            diameter_sd_mm: 4.92,
            diameter_range_mm: (3.0, 30.0),
            nodule_hu_range: (-100.0, 80.0),
            lung_hu_mean: -850.0,
            lung_hu_sigma: 30.0,
            vessel_count: 3,
            lobulation_max: 0.12,
            edge_sigma_mm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: String,
    pub seed: u64,
    pub record: NoduleRecord,
    pub volume_file: String,
    pub gt_file: String,
}

#[derive(Debug, Clone, Default)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn for_split<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "id\tsplit\tseed\tdiameter_mm\tsubtlety\tinternal_structure\tcalcification\t\
             sphericity\tmargin\tlobulation\tspiculation\ttexture\tmalignancy\tvolume\tgt\n",
        );
        for e in &self.entries {
            let r = &e.record;
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.id,
                e.split,
                e.seed,
                r.diameter_mm,
                r.subtlety,
                r.internal_structure,
                r.calcification,
                r.sphericity,
                r.margin,
                r.lobulation,
                r.spiculation,
                r.texture,
                r.malignancy,
                e.volume_file,
                e.gt_file
            );
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| CoreError::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<CorpusManifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 15 {
                return Err(CoreError::Format(format!(
                    "{}: line {} has {} fields, expected 15",
                    path.display(),
                    i + 1,
                    f.len()
                )));
            }
            let parse_u8 = |s: &str| -> Result<u8> {
                s.parse()
                    .map_err(|_| CoreError::Format(format!("{}: bad score {s:?}", path.display())))
            };
            let record = NoduleRecord {
                diameter_mm: f[3].parse().map_err(|_| {
                    CoreError::Format(format!("{}: bad diameter {:?}", path.display(), f[3]))
                })?,
                subtlety: parse_u8(f[4])?,
                internal_structure: parse_u8(f[5])?,
                calcification: parse_u8(f[6])?,
                sphericity: parse_u8(f[7])?,
                margin: parse_u8(f[8])?,
                lobulation: parse_u8(f[9])?,
                spiculation: parse_u8(f[10])?,
                texture: parse_u8(f[11])?,
                malignancy: parse_u8(f[12])?,
            };
            entries.push(ManifestEntry {
                id: f[0].to_string(),
                split: f[1].to_string(),
                seed: f[2].parse().map_err(|_| {
                    CoreError::Format(format!("{}: bad seed {:?}", path.display(), f[2]))
                })?,
                record,
                volume_file: f[13].to_string(),
                gt_file: f[14].to_string(),
            });
        }
        Ok(CorpusManifest { entries })
    }
}

/// Draws one phantom spec (single nodule) from the ranges.
pub fn sample_phantom_spec(ranges: &CorpusRanges, seed: u64) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = ranges.diameter_range_mm;
    let diameter = loop {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        let d = ranges.diameter_mean_mm + ranges.diameter_sd_mm * z;
        if (lo..=hi).contains(&d) {
            break d;
        }
    };
    let a = diameter / 2.0;
    let b = a * rng.gen_range(0.65..1.0);
    let c = a * rng.gen_range(0.65..1.0);
    let lob = rng.gen_range(0.0..ranges.lobulation_max);
    let (sx, sy, sz) = ranges.spacing;
    let (xs, ys, zs) = ranges.dims;
    let reach = |axis: f64, sp: f64| (axis * (1.0 + lob) + EDGE_CUTOFF_SIGMAS * ranges.edge_sigma_mm) / sp + LUNG_FIELD_MARGIN + 1.0;
    let cx = rng.gen_range(reach(a, sx)..(xs as f64 - 1.0 - reach(a, sx)));
    let cy = rng.gen_range(reach(b, sy)..(ys as f64 - 1.0 - reach(b, sy)));
    let cz = rng.gen_range(reach(c, sz)..(zs as f64 - 1.0 - reach(c, sz)));
    PhantomSpec {
        dims: ranges.dims,
        spacing: ranges.spacing,
        lung_hu_mean: ranges.lung_hu_mean,
        lung_hu_sigma: ranges.lung_hu_sigma,
        vessel_count: ranges.vessel_count,
        vessel_radius_mm: 1.2,
        vessel_hu: -30.0,
        nodules: vec![NoduleSpec {
            center_vox: (cx, cy, cz),
            semi_axes_mm: (a, b, c),
            hu: rng.gen_range(ranges.nodule_hu_range.0..ranges.nodule_hu_range.1),
            edge_sigma_mm: ranges.edge_sigma_mm,
            lobulation: lob,
        }],
        seed: seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1),
    }
}

/// Generates disjoint train/val/test splits under `out_dir` (one volume, one
/// ground-truth mask per phantom) plus `manifest.tsv`.
pub fn generate_corpus(
    out_dir: impl AsRef<Path>,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    ranges: &CorpusRanges,
    seed: u64,
) -> Result<CorpusManifest> {
    let out_dir = out_dir.as_ref();
    let mut manifest = CorpusManifest::default();
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    for (split, count) in [("train", n_train), ("val", n_val), ("test", n_test)] {
        let dir = out_dir.join(split);
        std::fs::create_dir_all(&dir).map_err(|e| CoreError::io(&dir, e))?;
        for i in 0..count {
            let phantom_seed: u64 = master.gen();
            let spec = sample_phantom_spec(ranges, phantom_seed);
            let (volume, masks, records) = generate_phantom(&spec)?;
            let id = format!("{split}_{i:03}");
            let volume_file: PathBuf = [split, &format!("{id}.nvol")].iter().collect();
            let gt_file: PathBuf = [split, &format!("{id}_gt.nvol")].iter().collect();
            volume.write(out_dir.join(&volume_file))?;
            masks[0].write(out_dir.join(&gt_file))?;
            manifest.entries.push(ManifestEntry {
                id,
                split: split.to_string(),
                seed: phantom_seed,
                record: records[0],
                volume_file: volume_file.to_string_lossy().into_owned(),
                gt_file: gt_file.to_string_lossy().into_owned(),
            });
        }
    }
    manifest.write(out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
