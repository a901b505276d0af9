//! CT volume container, lung windowing, dataset normalisation and the
//! 3-slice sequences fed to the segmentation network.
//!
//! On disk a volume is a JSON header plus a raw little-endian payload that sits
//! next to it with the `.raw` extension:
//!
//! ```json
//! {"dims":[S,R,C],"spacing_mm":[a,r,c],"dtype":"int16-le","scan_id":"..."}
//! ```
//!
//! Label grids (lobe and lesion masks) use the same header with `"dtype":"uint8"`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops;

pub const HU_MIN: i16 = -2048;
pub const HU_MAX: i16 = 4096;

pub const DTYPE_INT16: &str = "int16-le";
pub const DTYPE_UINT8: &str = "uint8";

/// A CT scan in Hounsfield units, indexed `[slice, row, col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CTVolume {
    voxels: Array3<i16>,
    spacing_mm: [f64; 3],
    pub scan_id: String,
    pub source_meta: BTreeMap<String, String>,
}

impl CTVolume {
    /// Builds a volume, clamping voxels into `[HU_MIN, HU_MAX]`.
    pub fn new(mut voxels: Array3<i16>, spacing_mm: [f64; 3], scan_id: impl Into<String>) -> Result<Self> {
        if voxels.len_of(Axis(0)) == 0 || voxels.len_of(Axis(1)) == 0 || voxels.len_of(Axis(2)) == 0 {
            return Err(Error::invalid("volume must have at least one slice, row and column"));
        }
        if spacing_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid(format!("spacing must be strictly positive, got {spacing_mm:?}")));
        }
        voxels.mapv_inplace(|v| v.clamp(HU_MIN, HU_MAX));
        Ok(Self {
            voxels,
            spacing_mm,
            scan_id: scan_id.into(),
            source_meta: BTreeMap::new(),
        })
    }

    pub fn voxels(&self) -> &Array3<i16> {
        &self.voxels
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    /// `(slices, rows, cols)`
    pub fn dims(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }

    pub fn num_slices(&self) -> usize {
        self.voxels.len_of(Axis(0))
    }

    /// Mutable access for callers that need to edit voxels in place; values are re-clamped on write-out.
    pub fn voxels_mut(&mut self) -> &mut Array3<i16> {
        &mut self.voxels
    }
}

/// JSON header shared by volumes and label grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: String,
    pub scan_id: String,
}

impl VolumeHeader {
    fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    fn validate(&self, expected_dtype: &str) -> Result<()> {
        if self.dtype != expected_dtype {
            return Err(Error::Header(format!(
                "unsupported dtype {:?}, expected {:?}",
                self.dtype, expected_dtype
            )));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Header(format!("dims must be positive, got {:?}", self.dims)));
        }
        if self.spacing_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Header(format!(
                "spacing must be strictly positive, got {:?}",
                self.spacing_mm
            )));
        }
        Ok(())
    }
}

/// Path of the raw payload that accompanies a header file.
pub fn payload_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("raw")
}

fn read_header(path: &Path) -> Result<VolumeHeader> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Header(format!("{}: {e}", path.display())))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Decodes a volume from an already-parsed header and its raw payload.
pub fn volume_from_parts(header: &VolumeHeader, payload: &[u8]) -> Result<CTVolume> {
    header.validate(DTYPE_INT16)?;
    let expected = header.voxel_count() * 2;
    if payload.len() != expected {
        return Err(Error::DimensionMismatch(format!(
            "header declares {:?} ({} bytes) but payload holds {} bytes",
            header.dims,
            expected,
            payload.len()
        )));
    }
    let data: Vec<i16> = payload
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]))
        .collect();
    let [s, r, c] = header.dims;
    let voxels = Array3::from_shape_vec((s, r, c), data)
        .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    CTVolume::new(voxels, header.spacing_mm, header.scan_id.clone())
}

/// Encodes a volume into its header and raw payload.
pub fn volume_to_parts(volume: &CTVolume) -> (VolumeHeader, Vec<u8>) {
    let (s, r, c) = volume.dims();
    let header = VolumeHeader {
        dims: [s, r, c],
        spacing_mm: volume.spacing_mm,
        dtype: DTYPE_INT16.to_string(),
        scan_id: volume.scan_id.clone(),
    };
    let mut payload = Vec::with_capacity(volume.voxels.len() * 2);
    for v in volume.voxels.iter() {
        payload.extend_from_slice(&v.clamp(&HU_MIN, &HU_MAX).to_le_bytes());
    }
    (header, payload)
}

/// Loads a volume from its header path; the payload is read from the sibling `.raw` file.
pub fn load_volume(path: impl AsRef<Path>) -> Result<CTVolume> {
    let path = path.as_ref();
    let header = read_header(path)?;
    header.validate(DTYPE_INT16)?;
    let raw = payload_path(path);
    let payload = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    volume_from_parts(&header, &payload)
}

pub fn write_volume(volume: &CTVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (header, payload) = volume_to_parts(volume);
    write_atomic(&payload_path(path), &payload)?;
    write_atomic(path, serde_json::to_string(&header)?.as_bytes())
}

/// Writes a `uint8` label grid with the volume header convention.
pub fn write_label_grid(
    grid: &Array3<u8>,
    spacing_mm: [f64; 3],
    scan_id: &str,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let (s, r, c) = grid.dim();
    let header = VolumeHeader {
        dims: [s, r, c],
        spacing_mm,
        dtype: DTYPE_UINT8.to_string(),
        scan_id: scan_id.to_string(),
    };
    let payload: Vec<u8> = grid.iter().copied().collect();
    write_atomic(&payload_path(path), &payload)?;
    write_atomic(path, serde_json::to_string(&header)?.as_bytes())
}

pub fn load_label_grid(path: impl AsRef<Path>) -> Result<(Array3<u8>, VolumeHeader)> {
    let path = path.as_ref();
    let header = read_header(path)?;
    header.validate(DTYPE_UINT8)?;
    let raw = payload_path(path);
    let payload = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    if payload.len() != header.voxel_count() {
        return Err(Error::DimensionMismatch(format!(
            "header declares {:?} but payload holds {} bytes",
            header.dims,
            payload.len()
        )));
    }
    let [s, r, c] = header.dims;
    let grid = Array3::from_shape_vec((s, r, c), payload)
        .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    Ok((grid, header))
}

/// Intensity window in Hounsfield units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub width: f64,
    pub level: f64,
}

impl Default for WindowSpec {
    /// Lung window.
    fn default() -> Self {
        Self {
            width: 1500.0,
            level: -700.0,
        }
    }
}

impl WindowSpec {
    pub fn new(width: f64, level: f64) -> Result<Self> {
        let spec = Self { width, level };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width.is_finite() && self.width > 0.0) || !self.level.is_finite() {
            return Err(Error::invalid(format!("window width must be > 0, got {}", self.width)));
        }
        Ok(())
    }

    #[inline]
    pub fn map(&self, hu: f64) -> f32 {
        let lower = self.level - self.width / 2.0;
        ((hu - lower) / self.width).clamp(0.0, 1.0) as f32
    }
}

/// Maps every voxel into `[0, 1]` through the window.
pub fn apply_window(volume: &CTVolume, window: &WindowSpec) -> Result<Array3<f32>> {
    window.validate()?;
    Ok(volume.voxels.mapv(|v| window.map(v as f64)))
}

/// Dataset-level intensity statistics (population standard deviation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn identity() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }

    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Array2<f32>>) -> Result<Self> {
        let (mut n, mut sum, mut sum_sq) = (0usize, 0.0f64, 0.0f64);
        let images: Vec<_> = images.into_iter().collect();
        for img in &images {
            for &v in img.iter() {
                n += 1;
                sum += v as f64;
            }
        }
        if n == 0 {
            return Err(Error::invalid("cannot compute statistics of an empty collection"));
        }
        let mean = sum / n as f64;
        for img in &images {
            for &v in img.iter() {
                let d = v as f64 - mean;
                sum_sq += d * d;
            }
        }
        let std = (sum_sq / n as f64).sqrt();
        if !(std > 0.0) {
            return Err(Error::invalid("collection has zero variance; supply statistics explicitly"));
        }
        Ok(Self { mean, std })
    }

    #[inline]
    pub fn apply(&self, v: f32) -> f32 {
        ((v as f64 - self.mean) / self.std) as f32
    }
}

/// Standardises a slice collection. With `stats = None` the statistics are
/// measured on `images` itself and returned alongside the result.
pub fn normalize_dataset(
    images: &[Array2<f32>],
    stats: Option<NormStats>,
) -> Result<(Vec<Array2<f32>>, NormStats)> {
    if images.is_empty() {
        return Err(Error::invalid("cannot normalise an empty collection"));
    }
    let stats = match stats {
        Some(s) if s.std > 0.0 && s.std.is_finite() && s.mean.is_finite() => s,
        Some(s) => return Err(Error::invalid(format!("supplied std must be > 0, got {}", s.std))),
        None => NormStats::from_images(images)?,
    };
    let out = images.iter().map(|img| img.mapv(|v| stats.apply(v))).collect();
    Ok((out, stats))
}

/// Splits a windowed volume into slices resized to `size`×`size` (bilinear).
pub fn resized_slices(windowed: &Array3<f32>, size: usize) -> Vec<Array2<f32>> {
    windowed
        .axis_iter(Axis(0))
        .map(|s| imageops::resize_bilinear(&s.to_owned(), size, size))
        .collect()
}

/// Three consecutive preprocessed slices centred on `center_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceTriplet {
    pub images: [Array2<f32>; 3],
    pub center_index: usize,
}

/// One triplet per slice `(i-1, i, i+1)`, replicating the boundary slices at both ends.
pub fn make_triplets(slices: &[Array2<f32>]) -> Result<Vec<SliceTriplet>> {
    let n = slices.len();
    if n == 0 {
        return Err(Error::invalid("cannot build triplets from an empty volume"));
    }
    let dim = slices[0].dim();
    if let Some(bad) = slices.iter().position(|s| s.dim() != dim) {
        return Err(Error::Shape(format!(
            "slice {bad} has dims {:?}, expected {:?}",
            slices[bad].dim(),
            dim
        )));
    }
    Ok((0..n)
        .map(|i| SliceTriplet {
            images: [
                slices[i.saturating_sub(1)].clone(),
                slices[i].clone(),
                slices[(i + 1).min(n - 1)].clone(),
            ],
            center_index: i,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lung() -> WindowSpec {
        WindowSpec::default()
    }

    #[test]
    fn zeros_roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let vol = CTVolume::new(Array3::zeros((2, 2, 2)), [1.0, 1.0, 1.0], "zeros").unwrap();
        let path = dir.path().join("v.json");
        write_volume(&vol, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.voxels().len(), 8);
        assert!(back.voxels().iter().all(|&v| v == 0));
        assert_eq!(back, vol);
    }

    #[test]
    fn short_payload_is_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.json");
        let header = VolumeHeader {
            dims: [10, 2, 2],
            spacing_mm: [1.0, 1.0, 1.0],
            dtype: DTYPE_INT16.into(),
            scan_id: "short".into(),
        };
        fs::write(&path, serde_json::to_string(&header).unwrap()).unwrap();
        fs::write(payload_path(&path), vec![0u8; 9 * 4 * 2]).unwrap();
        assert!(matches!(load_volume(&path), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn wrong_dtype_and_garbage_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.json");
        fs::write(
            &path,
            r#"{"dims":[1,1,1],"spacing_mm":[1,1,1],"dtype":"float32","scan_id":"x"}"#,
        )
        .unwrap();
        fs::write(payload_path(&path), [0u8; 4]).unwrap();
        assert!(matches!(load_volume(&path), Err(Error::Header(_))));
        fs::write(&path, "{not json").unwrap();
        assert!(matches!(load_volume(&path), Err(Error::Header(_))));
        assert!(matches!(
            load_volume(dir.path().join("missing.json")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn load_clamps_out_of_range_hu() {
        let header = VolumeHeader {
            dims: [1, 1, 2],
            spacing_mm: [1.0, 1.0, 1.0],
            dtype: DTYPE_INT16.into(),
            scan_id: "x".into(),
        };
        let mut payload = Vec::new();
        payload.extend_from_slice(&(-3000i16).to_le_bytes());
        payload.extend_from_slice(&(5000i16).to_le_bytes());
        let v = volume_from_parts(&header, &payload).unwrap();
        assert_eq!(v.voxels()[[0, 0, 0]], HU_MIN);
        assert_eq!(v.voxels()[[0, 0, 1]], HU_MAX);
    }

    #[test]
    fn non_positive_spacing_rejected() {
        assert!(CTVolume::new(Array3::zeros((1, 1, 1)), [0.0, 1.0, 1.0], "x").is_err());
        assert!(CTVolume::new(Array3::zeros((0, 1, 1)), [1.0, 1.0, 1.0], "x").is_err());
    }

    #[test]
    fn window_examples() {
        let w = lung();
        assert_eq!(w.map(-700.0), 0.5);
        assert_eq!(w.map(-1450.0), 0.0);
        assert_eq!(w.map(50.0), 1.0);
        assert_eq!(w.map(-325.0), 0.75);
        assert!(WindowSpec::new(0.0, -700.0).is_err());
        assert!(WindowSpec::new(-5.0, -700.0).is_err());
    }

    #[test]
    fn normalize_examples() {
        let c = vec![Array2::from_elem((2, 2), 0.3f32)];
        let (out, _) = normalize_dataset(&c, Some(NormStats::identity())).unwrap();
        assert_eq!(out, c);
        assert!(normalize_dataset(&c, None).is_err());

        let pair = vec![Array2::from_shape_vec((1, 2), vec![0.0f32, 2.0]).unwrap()];
        let (out, stats) = normalize_dataset(&pair, None).unwrap();
        assert_eq!(stats, NormStats { mean: 1.0, std: 1.0 });
        assert_eq!(out[0].as_slice().unwrap(), &[-1.0, 1.0]);
        assert!(normalize_dataset(&[], None).is_err());
    }

    #[test]
    fn triplet_enumeration() {
        let slices: Vec<_> = (0..5).map(|i| Array2::from_elem((2, 2), i as f32)).collect();
        let t = make_triplets(&slices).unwrap();
        assert_eq!(t.len(), 5);
        let ids = |tr: &SliceTriplet| tr.images.iter().map(|m| m[[0, 0]] as usize).collect::<Vec<_>>();
        // brute-force enumeration of (i-1, i, i+1) with clamping
        for (i, tr) in t.iter().enumerate() {
            let expect: Vec<usize> = [i as isize - 1, i as isize, i as isize + 1]
                .iter()
                .map(|&j| j.clamp(0, 4) as usize)
                .collect();
            assert_eq!(ids(tr), expect);
            assert_eq!(tr.center_index, i);
        }
        assert_eq!(ids(&t[0]), vec![0, 0, 1]);
        assert_eq!(ids(&t[4]), vec![3, 4, 4]);

        let one = make_triplets(&slices[..1]).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(ids(&one[0]), vec![0, 0, 0]);

        let three = make_triplets(&slices[..3]).unwrap();
        assert_eq!(ids(&three[1]), vec![0, 1, 2]);
        assert!(make_triplets(&[]).is_err());
    }

    proptest! {
        #[test]
        fn window_is_bounded_and_monotone(a in -2048i16..=4096, b in -2048i16..=4096,
                                          width in 1.0f64..4000.0, level in -1500.0f64..500.0) {
            let w = WindowSpec::new(width, level).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (ml, mh) = (w.map(lo as f64), w.map(hi as f64));
            prop_assert!((0.0..=1.0).contains(&ml) && (0.0..=1.0).contains(&mh));
            prop_assert!(ml <= mh);
        }

        #[test]
        fn normalized_collection_is_standard(vals in proptest::collection::vec(-5.0f32..5.0, 4..64)) {
            let n = vals.len();
            let img = Array2::from_shape_vec((1, n), vals).unwrap();
            prop_assume!(NormStats::from_images([&img]).is_ok());
            let (out, _) = normalize_dataset(std::slice::from_ref(&img), None).unwrap();
            let m = out[0].iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let s = (out[0].iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            prop_assert!(m.abs() < 1e-6);
            prop_assert!((s - 1.0).abs() < 1e-6);
        }

        #[test]
        fn disk_roundtrip_is_identity(s in 1usize..4, r in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
            let dir = tempfile::tempdir().unwrap();
            let mut x = seed;
            let vox = Array3::from_shape_fn((s, r, c), |_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((x >> 33) % 6145) as i16 - 2048
            });
            let vol = CTVolume::new(vox, [0.625, 0.7, 0.7], "rt").unwrap();
            let path = dir.path().join("rt.json");
            write_volume(&vol, &path).unwrap();
            prop_assert_eq!(load_volume(&path).unwrap(), vol);
        }
    }
}
