//! Volumes, 3D masks, rater annotation sets, and consensus ground truth.
//!
//! On-disk format "NVOL1": a 9-line UTF-8 text header — magic `NVOL1`, the
//! three dims `X Y Z` (one per line), the three spacings `sx sy sz` in mm (one
//! per line), a dtype tag (`i16` for volumes, `u8` for masks), and a final
//! blank line — followed by raw little-endian voxels in x-fastest, z-slowest
//! order. Round trips are bit-exact.

use crate::error::{CoreError, Result};
use ndarray::{Array2, Array3, ArrayView2};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const HU_MIN: i16 = -4096;
pub const HU_MAX: i16 = 4095;

const MAGIC: &str = "NVOL1";

/// A CT scan: dense signed 16-bit Hounsfield units plus physical voxel
/// spacing. Voxels are stored `[z, y, x]` so an axial slice is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    voxels: Array3<i16>,
    spacing: (f64, f64, f64),
}

impl CtVolume {
    pub fn new(voxels: Array3<i16>, spacing: (f64, f64, f64)) -> Result<Self> {
        validate_spacing(spacing)?;
        validate_dims(voxels.dim())?;
        if let Some(v) = voxels.iter().find(|v| **v < HU_MIN || **v > HU_MAX) {
            return Err(CoreError::Validation(format!(
                "HU value {v} outside [{HU_MIN}, {HU_MAX}]"
            )));
        }
        Ok(CtVolume { voxels, spacing })
    }

    /// Dims as `(X, Y, Z)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let (z, y, x) = self.voxels.dim();
        (x, y, z)
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn voxels(&self) -> &Array3<i16> {
        &self.voxels
    }

    /// Axial slice `[y, x]` at height `z`.
    pub fn slice(&self, z: usize) -> ArrayView2<'_, i16> {
        self.voxels.index_axis(ndarray::Axis(0), z)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<CtVolume> {
        let path = path.as_ref();
        let (dims, spacing, dtype, payload) = read_nvol(path)?;
        if dtype != "i16" {
            return Err(CoreError::Format(format!(
                "{}: expected dtype i16, found {dtype}",
                path.display()
            )));
        }
        let (x, y, z) = dims;
        let expect = x * y * z * 2;
        if payload.len() != expect {
            return Err(CoreError::Format(format!(
                "{}: payload is {} bytes, header implies {expect}",
                path.display(),
                payload.len()
            )));
        }
        let mut voxels = Array3::zeros((z, y, x));
        let flat = voxels.as_slice_mut().expect("owned array is contiguous");
        for (i, chunk) in payload.chunks_exact(2).enumerate() {
            flat[i] = i16::from_le_bytes([chunk[0], chunk[1]]);
        }
        CtVolume::new(voxels, spacing)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = open_writer(path)?;
        write_header(&mut w, path, self.dims(), self.spacing, "i16")?;
        let flat = self.voxels.as_slice().expect("owned array is contiguous");
        let mut bytes = Vec::with_capacity(flat.len() * 2);
        for v in flat {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes).map_err(|e| CoreError::io(path, e))?;
        w.flush().map_err(|e| CoreError::io(path, e))
    }
}

/// A {0,1} mask aligned with a companion volume.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask3D {
    voxels: Array3<u8>,
    spacing: (f64, f64, f64),
}

impl BinaryMask3D {
    pub fn new(voxels: Array3<u8>, spacing: (f64, f64, f64)) -> Result<Self> {
        validate_spacing(spacing)?;
        validate_dims(voxels.dim())?;
        if let Some(v) = voxels.iter().find(|v| **v > 1) {
            return Err(CoreError::Validation(format!(
                "mask voxel value {v} is not in {{0,1}}"
            )));
        }
        Ok(BinaryMask3D { voxels, spacing })
    }

    pub fn zeros(dims: (usize, usize, usize), spacing: (f64, f64, f64)) -> Result<Self> {
        let (x, y, z) = dims;
        BinaryMask3D::new(Array3::zeros((z, y, x)), spacing)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let (z, y, x) = self.voxels.dim();
        (x, y, z)
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn voxels(&self) -> &Array3<u8> {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut Array3<u8> {
        &mut self.voxels
    }

    pub fn slice(&self, z: usize) -> ArrayView2<'_, u8> {
        self.voxels.index_axis(ndarray::Axis(0), z)
    }

    pub fn count_ones(&self) -> usize {
        self.voxels.iter().filter(|v| **v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.iter().all(|v| *v == 0)
    }

    /// Inclusive `(z_lo, z_hi)` range of slices containing foreground.
    pub fn z_extent(&self) -> Option<(usize, usize)> {
        let (_, _, zn) = self.dims();
        let mut lo = None;
        let mut hi = None;
        for z in 0..zn {
            if self.slice(z).iter().any(|v| *v == 1) {
                if lo.is_none() {
                    lo = Some(z);
                }
                hi = Some(z);
            }
        }
        lo.zip(hi)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<BinaryMask3D> {
        let path = path.as_ref();
        let (dims, spacing, dtype, payload) = read_nvol(path)?;
        if dtype != "u8" {
            return Err(CoreError::Format(format!(
                "{}: expected dtype u8, found {dtype}",
                path.display()
            )));
        }
        let (x, y, z) = dims;
        if payload.len() != x * y * z {
            return Err(CoreError::Format(format!(
                "{}: payload is {} bytes, header implies {}",
                path.display(),
                payload.len(),
                x * y * z
            )));
        }
        let voxels = Array3::from_shape_vec((z, y, x), payload)
            .expect("shape checked against payload length");
        BinaryMask3D::new(voxels, spacing)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = open_writer(path)?;
        write_header(&mut w, path, self.dims(), self.spacing, "u8")?;
        w.write_all(self.voxels.as_slice().expect("contiguous"))
            .map_err(|e| CoreError::io(path, e))?;
        w.flush().map_err(|e| CoreError::io(path, e))
    }
}

fn validate_spacing(spacing: (f64, f64, f64)) -> Result<()> {
    let (sx, sy, sz) = spacing;
    for s in [sx, sy, sz] {
        if !(s.is_finite() && s > 0.0) {
            return Err(CoreError::Validation(format!(
                "spacing must be positive and finite, got {s}"
            )));
        }
    }
    Ok(())
}

fn validate_dims(dim: (usize, usize, usize)) -> Result<()> {
    let (z, y, x) = dim;
    if x == 0 || y == 0 || z == 0 {
        return Err(CoreError::Validation(format!(
            "dims must all be >= 1, got ({x}, {y}, {z})"
        )));
    }
    Ok(())
}

fn open_writer(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CoreError::io(path, e))
}

fn write_header<W: Write>(
    w: &mut W,
    path: &Path,
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    dtype: &str,
) -> Result<()> {
    let (x, y, z) = dims;
    let (sx, sy, sz) = spacing;
    // f64 Display is the shortest representation that parses back exactly,
    // which is what keeps header round trips bit-exact.
    write!(w, "{MAGIC}\n{x}\n{y}\n{z}\n{sx}\n{sy}\n{sz}\n{dtype}\n\n")
        .map_err(|e| CoreError::io(path, e))
}

type NvolHeader = ((usize, usize, usize), (f64, f64, f64), String, Vec<u8>);

fn read_nvol(path: &Path) -> Result<NvolHeader> {
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut lines = Vec::with_capacity(9);
    for i in 0..9 {
        let mut line = String::new();
        let n = r
            .read_line(&mut line)
            .map_err(|e| CoreError::io(path, e))?;
        if n == 0 {
            return Err(CoreError::Format(format!(
                "{}: truncated header (line {})",
                path.display(),
                i + 1
            )));
        }
        if !line.ends_with('\n') {
            return Err(CoreError::Format(format!(
                "{}: header line {} missing newline",
                path.display(),
                i + 1
            )));
        }
        line.pop();
        lines.push(line);
    }
    if lines[0] != MAGIC {
        return Err(CoreError::Format(format!(
            "{}: bad magic {:?}",
            path.display(),
            lines[0]
        )));
    }
    if !lines[8].is_empty() {
        return Err(CoreError::Format(format!(
            "{}: header line 9 must be blank",
            path.display()
        )));
    }
    let dim = |s: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| CoreError::Format(format!("{}: bad dim {s:?}", path.display())))
    };
    let sp = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| CoreError::Format(format!("{}: bad spacing {s:?}", path.display())))
    };
    let dims = (dim(&lines[1])?, dim(&lines[2])?, dim(&lines[3])?);
    let spacing = (sp(&lines[4])?, sp(&lines[5])?, sp(&lines[6])?);
    let dtype = lines[7].clone();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)
        .map_err(|e| CoreError::io(path, e))?;
    Ok((dims, spacing, dtype, payload))
}

/// Per-rater masks for one nodule, all on the same grid.
#[derive(Debug, Clone)]
pub struct RaterAnnotationSet {
    pub rater_ids: Vec<String>,
    pub masks: Vec<BinaryMask3D>,
}

impl RaterAnnotationSet {
    pub fn new(rater_ids: Vec<String>, masks: Vec<BinaryMask3D>) -> Result<Self> {
        if masks.is_empty() {
            return Err(CoreError::Validation("annotation set needs >= 1 rater".into()));
        }
        if rater_ids.len() != masks.len() {
            return Err(CoreError::Validation(format!(
                "{} rater ids for {} masks",
                rater_ids.len(),
                masks.len()
            )));
        }
        for id in &rater_ids {
            if id.is_empty() || id.chars().any(|c| c.is_whitespace()) {
                return Err(CoreError::Validation(format!(
                    "rater id {id:?} must be non-empty and whitespace-free"
                )));
            }
        }
        let d0 = masks[0].dims();
        let s0 = masks[0].spacing();
        for m in &masks[1..] {
            if m.dims() != d0 || m.spacing() != s0 {
                return Err(CoreError::ShapeMismatch(format!(
                    "rater masks disagree: {:?} vs {:?}",
                    m.dims(),
                    d0
                )));
            }
        }
        Ok(RaterAnnotationSet { rater_ids, masks })
    }

    /// Writes one mask file per rater plus a manifest (`<stem>.raters`) whose
    /// lines are `rater_id filename`, filenames relative to the manifest.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<std::path::PathBuf> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(format!("{stem}.raters"));
        let mut manifest = String::new();
        for (id, mask) in self.rater_ids.iter().zip(&self.masks) {
            let name = format!("{stem}_{id}.nvol");
            mask.write(dir.join(&name))?;
            manifest.push_str(&format!("{id} {name}\n"));
        }
        std::fs::write(&manifest_path, manifest).map_err(|e| CoreError::io(&manifest_path, e))?;
        Ok(manifest_path)
    }

    pub fn read(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let text = std::fs::read_to_string(manifest_path)
            .map_err(|e| CoreError::io(manifest_path, e))?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let mut ids = Vec::new();
        let mut masks = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(2, ' ');
            let (id, name) = match (parts.next(), parts.next()) {
                (Some(id), Some(name)) => (id, name),
                _ => {
                    return Err(CoreError::Format(format!(
                        "{}: line {} is not `id filename`",
                        manifest_path.display(),
                        lineno + 1
                    )))
                }
            };
            ids.push(id.to_string());
            masks.push(BinaryMask3D::read(dir.join(name))?);
        }
        RaterAnnotationSet::new(ids, masks)
    }
}

/// Voxelwise consensus over rater masks: a voxel is foreground iff at least
/// `ceil(fraction * raters)` raters marked it. With four raters and fraction
/// 0.5 the threshold is 2.
pub fn consensus_ground_truth(
    annotations: &RaterAnnotationSet,
    fraction: f64,
) -> Result<BinaryMask3D> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CoreError::Validation(format!(
            "consensus fraction must be in (0, 1], got {fraction}"
        )));
    }
    let n = annotations.masks.len();
    let threshold = (fraction * n as f64).ceil() as usize;
    let threshold = threshold.max(1);
    let dims = annotations.masks[0].voxels().dim();
    let mut counts = Array3::<u8>::zeros(dims);
    for m in &annotations.masks {
        counts += m.voxels();
    }
    let out = counts.mapv(|c| u8::from(c as usize >= threshold));
    BinaryMask3D::new(out, annotations.masks[0].spacing())
}

/// Per-nodule characteristic scores and diameter. Scores are ordinal 1-5
/// except calcification which spans 2-6.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoduleRecord {
    pub subtlety: u8,
    pub internal_structure: u8,
    pub calcification: u8,
    pub sphericity: u8,
    pub margin: u8,
    pub lobulation: u8,
    pub spiculation: u8,
    pub texture: u8,
    pub malignancy: u8,
    pub diameter_mm: f64,
}

impl NoduleRecord {
    pub fn validate(&self) -> Result<()> {
        let in_range = |name: &str, v: u8, lo: u8, hi: u8| -> Result<()> {
            if v < lo || v > hi {
                return Err(CoreError::Validation(format!(
                    "{name} score {v} outside [{lo}, {hi}]"
                )));
            }
            Ok(())
        };
        in_range("subtlety", self.subtlety, 1, 5)?;
        in_range("internal_structure", self.internal_structure, 1, 5)?;
        in_range("calcification", self.calcification, 2, 6)?;
        in_range("sphericity", self.sphericity, 1, 5)?;
        in_range("margin", self.margin, 1, 5)?;
        in_range("lobulation", self.lobulation, 1, 5)?;
        in_range("spiculation", self.spiculation, 1, 5)?;
        in_range("texture", self.texture, 1, 5)?;
        in_range("malignancy", self.malignancy, 1, 5)?;
        if !(self.diameter_mm.is_finite() && self.diameter_mm > 0.0) {
            return Err(CoreError::Validation(format!(
                "diameter {} must be positive",
                self.diameter_mm
            )));
        }
        Ok(())
    }

    pub fn score(&self, characteristic: crate::metrics::Characteristic) -> u8 {
        use crate::metrics::Characteristic::*;
        match characteristic {
            Subtlety => self.subtlety,
            InternalStructure => self.internal_structure,
            Calcification => self.calcification,
            Sphericity => self.sphericity,
            Margin => self.margin,
            Lobulation => self.lobulation,
            Spiculation => self.spiculation,
            Texture => self.texture,
            Malignancy => self.malignancy,
        }
    }
}

/// Stacks lexicographically ordered 16-bit grayscale PNG slices into a volume.
/// Pixel values are taken verbatim as HU, so they must not exceed [`HU_MAX`].
pub fn import_slice_stack(dir: impl AsRef<Path>, spacing: (f64, f64, f64)) -> Result<CtVolume> {
    let dir = dir.as_ref();
    let mut names: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| CoreError::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.path())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CoreError::Validation(format!(
            "{}: no slice files found",
            dir.display()
        )));
    }
    let mut slices: Vec<Array2<i16>> = Vec::with_capacity(names.len());
    let mut dims = None;
    for path in &names {
        let img = image::open(path)
            .map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))?;
        let gray = match img {
            image::DynamicImage::ImageLuma16(g) => g,
            other => {
                return Err(CoreError::Format(format!(
                    "{}: expected 16-bit grayscale, found {:?}",
                    path.display(),
                    other.color()
                )))
            }
        };
        let (w, h) = gray.dimensions();
        let this = (w as usize, h as usize);
        match dims {
            None => dims = Some(this),
            Some(d) if d != this => {
                return Err(CoreError::ShapeMismatch(format!(
                    "{}: slice is {}x{} but stack is {}x{}",
                    path.display(),
                    this.0,
                    this.1,
                    d.0,
                    d.1
                )))
            }
            _ => {}
        }
        let mut plane = Array2::zeros((h as usize, w as usize));
        for (x, y, p) in gray.enumerate_pixels() {
            let v = p.0[0];
            if v > HU_MAX as u16 {
                return Err(CoreError::Validation(format!(
                    "{}: pixel value {v} exceeds HU max {HU_MAX}",
                    path.display()
                )));
            }
            plane[[y as usize, x as usize]] = v as i16;
        }
        slices.push(plane);
    }
    let (w, h) = dims.expect("at least one slice");
    let mut voxels = Array3::zeros((slices.len(), h, w));
    for (z, plane) in slices.into_iter().enumerate() {
        voxels.index_axis_mut(ndarray::Axis(0), z).assign(&plane);
    }
    CtVolume::new(voxels, spacing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn vol_from_fn(
        dims: (usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize) -> i16,
    ) -> CtVolume {
        let (x, y, z) = dims;
        let voxels = Array3::from_shape_fn((z, y, x), |(zz, yy, xx)| f(xx, yy, zz));
        CtVolume::new(voxels, (1.0, 1.0, 1.0)).unwrap()
    }

    fn mask_from_fn(
        dims: (usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize) -> u8,
    ) -> BinaryMask3D {
        let (x, y, z) = dims;
        let voxels = Array3::from_shape_fn((z, y, x), |(zz, yy, xx)| f(xx, yy, zz));
        BinaryMask3D::new(voxels, (1.0, 1.0, 1.0)).unwrap()
    }

    #[test]
    fn zero_volume_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("zero.nvol");
        let v = vol_from_fn((4, 4, 4), |_, _, _| 0);
        v.write(&path).unwrap();
        let back = CtVolume::read(&path).unwrap();
        assert_eq!(back.dims(), (4, 4, 4));
        assert!(back.voxels().iter().all(|h| *h == 0));
        assert_eq!(back, v);
    }

    #[test]
    fn volume_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ramp.nvol");
        let v = CtVolume::new(
            Array3::from_shape_fn((3, 5, 4), |(z, y, x)| (x as i16) - 37 * (y as i16) + (z as i16) * 211),
            (0.7, 0.82, 2.5),
        )
        .unwrap();
        v.write(&path).unwrap();
        let back = CtVolume::read(&path).unwrap();
        assert_eq!(back, v);
        // Writing again produces the same bytes.
        let path2 = dir.path().join("ramp2.nvol");
        back.write(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn payload_size_mismatch_is_an_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("short.nvol");
        // Header says 4x4x4 but carries only 63 voxels.
        let mut bytes = b"NVOL1\n4\n4\n4\n1\n1\n1\ni16\n\n".to_vec();
        bytes.extend(std::iter::repeat(0u8).take(63 * 2));
        std::fs::write(&path, bytes).unwrap();
        let err = CtVolume::read(&path).unwrap_err();
        assert!(matches!(err, CoreError::Format(_)), "{err}");
    }

    #[test]
    fn nonpositive_spacing_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.nvol");
        let mut bytes = b"NVOL1\n1\n1\n1\n0\n1\n1\ni16\n\n".to_vec();
        bytes.extend_from_slice(&0i16.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(CtVolume::read(&path).is_err());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let v = vol_from_fn((1, 1, 1), |_, _, _| 0);
        let err = v.write("/nonexistent-dir/x.nvol").unwrap_err();
        assert!(matches!(err, CoreError::Io { .. }));
    }

    #[test]
    fn mask_round_trip_and_validation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ones.nvol");
        let m = mask_from_fn((3, 2, 2), |_, _, _| 1);
        m.write(&path).unwrap();
        assert_eq!(BinaryMask3D::read(&path).unwrap(), m);

        // Payload value 2 fails {0,1} validation.
        let bad = dir.path().join("two.nvol");
        let mut bytes = b"NVOL1\n1\n1\n1\n1\n1\n1\nu8\n\n".to_vec();
        bytes.push(2);
        std::fs::write(&bad, bytes).unwrap();
        assert!(matches!(
            BinaryMask3D::read(&bad).unwrap_err(),
            CoreError::Validation(_)
        ));
    }

    #[test]
    fn consensus_unanimous_and_degenerate() {
        let m = mask_from_fn((4, 4, 2), |x, y, _| u8::from(x < 2 && y < 3));
        let set = RaterAnnotationSet::new(
            vec!["R1".into(), "R2".into(), "R3".into(), "R4".into()],
            vec![m.clone(), m.clone(), m.clone(), m.clone()],
        )
        .unwrap();
        assert_eq!(consensus_ground_truth(&set, 0.5).unwrap(), m);

        let solo = RaterAnnotationSet::new(vec!["R1".into()], vec![m.clone()]).unwrap();
        assert_eq!(consensus_ground_truth(&solo, 0.5).unwrap(), m);
    }

    #[test]
    fn consensus_matches_majority_oracle_on_all_rater_patterns() {
        // One voxel, four raters, all 16 patterns: consensus at 0.5 must equal
        // the (count >= 2) majority rule.
        for pattern in 0u8..16 {
            let masks: Vec<_> = (0..4)
                .map(|r| mask_from_fn((1, 1, 1), |_, _, _| (pattern >> r) & 1))
                .collect();
            let set = RaterAnnotationSet::new(
                (0..4).map(|r| format!("R{r}")).collect(),
                masks,
            )
            .unwrap();
            let got = consensus_ground_truth(&set, 0.5).unwrap().voxels()[[0, 0, 0]];
            let expect = u8::from(pattern.count_ones() >= 2);
            assert_eq!(got, expect, "pattern {pattern:04b}");
        }
    }

    #[test]
    fn consensus_fraction_endpoints_are_and_or() {
        let masks: Vec<_> = (0..3)
            .map(|r| mask_from_fn((2, 2, 1), |x, y, _| u8::from((x + y + r) % 2 == 0)))
            .collect();
        let set =
            RaterAnnotationSet::new((0..3).map(|r| format!("R{r}")).collect(), masks.clone())
                .unwrap();
        let and = consensus_ground_truth(&set, 1.0).unwrap();
        let or = consensus_ground_truth(&set, 1.0 / 3.0).unwrap();
        for idx in [[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1]] {
            let bits: Vec<u8> = masks.iter().map(|m| m.voxels()[idx]).collect();
            assert_eq!(and.voxels()[idx], bits.iter().copied().min().unwrap());
            assert_eq!(or.voxels()[idx], bits.iter().copied().max().unwrap());
        }
    }

    #[test]
    fn consensus_rejects_bad_fraction_and_mismatched_dims() {
        let m = mask_from_fn((2, 2, 1), |_, _, _| 1);
        let set = RaterAnnotationSet::new(vec!["a".into()], vec![m.clone()]).unwrap();
        assert!(consensus_ground_truth(&set, 0.0).is_err());
        assert!(consensus_ground_truth(&set, 1.5).is_err());
        let other = mask_from_fn((3, 2, 1), |_, _, _| 1);
        assert!(RaterAnnotationSet::new(vec!["a".into(), "b".into()], vec![m, other]).is_err());
    }

    #[test]
    fn annotation_set_round_trip() {
        let dir = tempdir().unwrap();
        let masks: Vec<_> = (0..2)
            .map(|r| mask_from_fn((3, 3, 2), |x, _, _| u8::from(x as u8 >= r)))
            .collect();
        let set = RaterAnnotationSet::new(vec!["R1".into(), "R2".into()], masks).unwrap();
        let manifest = set.write(dir.path(), "nod0").unwrap();
        let back = RaterAnnotationSet::read(&manifest).unwrap();
        assert_eq!(back.rater_ids, set.rater_ids);
        assert_eq!(back.masks, set.masks);
    }

    #[test]
    fn consensus_monotone_under_superset_rater() {
        let mut rng_state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            rng_state
        };
        for _ in 0..20 {
            let masks: Vec<_> = (0..3)
                .map(|_| mask_from_fn((4, 4, 2), |_, _, _| (next() & 1) as u8))
                .collect();
            let set = RaterAnnotationSet::new(
                (0..3).map(|r| format!("R{r}")).collect(),
                masks.clone(),
            )
            .unwrap();
            let consensus = consensus_ground_truth(&set, 0.5).unwrap();
            // Add a rater marking a superset of the consensus.
            let superset = BinaryMask3D::new(
                consensus
                    .voxels()
                    .mapv(|v| v.max((next() & 1) as u8)),
                consensus.spacing(),
            )
            .unwrap();
            let mut masks4 = masks;
            masks4.push(superset);
            let set4 = RaterAnnotationSet::new(
                (0..4).map(|r| format!("R{r}")).collect(),
                masks4,
            )
            .unwrap();
            let consensus4 = consensus_ground_truth(&set4, 0.5).unwrap();
            for (before, after) in consensus.voxels().iter().zip(consensus4.voxels().iter()) {
                assert!(after >= before, "consensus voxel lost by adding a superset rater");
            }
        }
    }

    #[test]
    fn nodule_record_ranges() {
        let mut rec = NoduleRecord {
            subtlety: 3,
            internal_structure: 1,
            calcification: 6,
            sphericity: 4,
            margin: 4,
            lobulation: 2,
            spiculation: 1,
            texture: 5,
            malignancy: 3,
            diameter_mm: 9.5,
        };
        rec.validate().unwrap();
        rec.calcification = 1;
        assert!(rec.validate().is_err());
    }

    #[test]
    fn slice_stack_import() {
        let dir = tempdir().unwrap();
        // Three 4x3 ramp slices; voxel (x,y,z) must equal the source pixel.
        for z in 0..3u32 {
            let img = image::ImageBuffer::from_fn(4, 3, |x, y| {
                image::Luma([(100 * z + 10 * y + x) as u16])
            });
            img.save(dir.path().join(format!("slice_{z:03}.png"))).unwrap();
        }
        let vol = import_slice_stack(dir.path(), (1.0, 1.0, 2.0)).unwrap();
        assert_eq!(vol.dims(), (4, 3, 3));
        for z in 0..3 {
            for y in 0..3 {
                for x in 0..4 {
                    assert_eq!(
                        vol.voxels()[[z, y, x]],
                        (100 * z + 10 * y + x) as i16
                    );
                }
            }
        }
    }

    #[test]
    fn slice_stack_dim_mismatch_and_empty_dir() {
        let dir = tempdir().unwrap();
        assert!(import_slice_stack(dir.path(), (1.0, 1.0, 1.0)).is_err());
        image::ImageBuffer::from_fn(4, 3, |_, _| image::Luma([0u16]))
            .save(dir.path().join("a.png"))
            .unwrap();
        image::ImageBuffer::from_fn(5, 3, |_, _| image::Luma([0u16]))
            .save(dir.path().join("b.png"))
            .unwrap();
        assert!(matches!(
            import_slice_stack(dir.path(), (1.0, 1.0, 1.0)).unwrap_err(),
            CoreError::ShapeMismatch(_)
        ));
    }

    #[test]
    fn one_slice_stack() {
        let dir = tempdir().unwrap();
        image::ImageBuffer::from_fn(2, 2, |x, y| image::Luma([(x + y) as u16]))
            .save(dir.path().join("only.png"))
            .unwrap();
        let vol = import_slice_stack(dir.path(), (1.0, 1.0, 1.0)).unwrap();
        assert_eq!(vol.dims(), (2, 2, 1));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn volume_io_round_trips_exactly(
            xs in 1usize..5, ys in 1usize..5, zs in 1usize..4,
            fill in -4096i16..=4095,
            sx in 0.1f64..3.0, sz in 0.1f64..5.0,
        ) {
            let dir = tempdir().unwrap();
            let path = dir.path().join("v.nvol");
            let v = CtVolume::new(
                Array3::from_shape_fn((zs, ys, xs), |(z, y, x)| {
                    fill.wrapping_add((x + 2 * y + 3 * z) as i16).clamp(HU_MIN, HU_MAX)
                }),
                (sx, 1.0, sz),
            ).unwrap();
            v.write(&path).unwrap();
            prop_assert_eq!(CtVolume::read(&path).unwrap(), v);
        }
    }
}
