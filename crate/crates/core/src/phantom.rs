//! Seeded synthetic chest-CT phantoms with lobe labels and injected lesions.
//!
//! Geometry: an elliptic body cylinder at soft-tissue density holding two lung
//! ellipsoids. The right lung (image left) is cut into lobes 1-3 and the left
//! lung into lobes 4-5 by oblique in-plane boundaries. Lesions are discrete
//! balls placed wholly inside a single lobe.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LesionCategory, Verdict};
use crate::volume_io::{self, CTVolume};

pub const HU_AIR: f64 = -1000.0;
pub const HU_BODY: f64 = 40.0;
pub const HU_LUNG: f64 = -800.0;
pub const HU_GROUND_GLASS: f64 = -500.0;
pub const HU_CONSOLIDATION: f64 = 30.0;
pub const HU_CRAZY_PAVING_LINE: f64 = -200.0;
/// Reticular line spacing for crazy paving, in voxels.
pub const CRAZY_PAVING_PITCH: usize = 4;

pub const MIN_DIM: usize = 16;
pub const NUM_LOBES: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionKind {
    GroundGlass,
    Consolidation,
    CrazyPaving,
}

impl LesionKind {
    pub const ALL: [LesionKind; 3] = [
        LesionKind::GroundGlass,
        LesionKind::Consolidation,
        LesionKind::CrazyPaving,
    ];

    pub fn category(self) -> LesionCategory {
        match self {
            LesionKind::GroundGlass => LesionCategory::GroundGlass,
            LesionKind::Consolidation => LesionCategory::Consolidation,
            LesionKind::CrazyPaving => LesionCategory::CrazyPaving,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionPlacement {
    pub kind: LesionKind,
    /// Target lobe, 1..=5.
    pub lobe: u8,
    pub radius: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// `(slices, rows, cols)`
    pub dims: [usize; 3],
    pub lesion_plan: Vec<LesionPlacement>,
    pub seed: u64,
    pub noise_std: f64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < MIN_DIM) {
            return Err(Error::invalid(format!("phantom dims must all be >= {MIN_DIM}, got {:?}", self.dims)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("noise_std must be a finite value >= 0"));
        }
        for l in &self.lesion_plan {
            if !(1..=NUM_LOBES).contains(&l.lobe) {
                return Err(Error::invalid(format!("lobe index {} outside 1..=5", l.lobe)));
            }
            if l.radius == 0 {
                return Err(Error::invalid("lesion radius must be >= 1"));
            }
        }
        Ok(())
    }
}

/// Ground truth accompanying a generated phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomTruth {
    pub volume: CTVolume,
    /// 0 = outside lungs, 1..=5 lobes.
    pub lobe_mask: Array3<u8>,
    pub slice_labels: Vec<LesionCategory>,
    /// 1 inside any lesion.
    pub lesion_mask: Array3<u8>,
    /// Per-voxel lesion kind as [`LesionCategory::grid_code`].
    pub lesion_kinds: Array3<u8>,
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Normalised offsets `(dz, dr, dc)` in units of the radii.
    fn local(&self, z: usize, r: usize, c: usize) -> [f64; 3] {
        [
            (z as f64 - self.center[0]) / self.radii[0],
            (r as f64 - self.center[1]) / self.radii[1],
            (c as f64 - self.center[2]) / self.radii[2],
        ]
    }
}

struct Geometry {
    body: Ellipsoid,
    right: Ellipsoid,
    left: Ellipsoid,
}

impl Geometry {
    fn sample(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Self {
        let [s, r, c] = dims.map(|d| d as f64);
        let mut jitter = |base: f64, frac: f64| base * (1.0 + rng.random_range(-frac..=frac));
        let body = Ellipsoid {
            center: [s / 2.0, r / 2.0, c / 2.0],
            radii: [f64::INFINITY, jitter(0.44 * r, 0.03), jitter(0.47 * c, 0.03)],
        };
        let z0 = jitter(s / 2.0 - 0.5, 0.03);
        let row0 = jitter(0.48 * r, 0.03);
        let offset = jitter(0.21 * c, 0.05);
        let rz = jitter(0.46 * s, 0.04);
        let rr = jitter(0.31 * r, 0.04);
        let rc = jitter(0.165 * c, 0.04);
        let right = Ellipsoid {
            center: [z0, row0, c / 2.0 - 0.5 - offset],
            radii: [rz, rr, rc],
        };
        let left = Ellipsoid {
            center: [z0, row0, c / 2.0 - 0.5 + offset],
            radii: [rz, jitter(rr, 0.03), jitter(rc, 0.03)],
        };
        Self { body, right, left }
    }

    fn inside(e: &Ellipsoid, z: usize, r: usize, c: usize) -> Option<[f64; 3]> {
        let p = e.local(z, r, c);
        let d = if e.radii[0].is_infinite() {
            p[1] * p[1] + p[2] * p[2]
        } else {
            p.iter().map(|v| v * v).sum()
        };
        (d <= 1.0).then_some(p)
    }

    /// Lobe label for a voxel, 0 when outside both lungs.
    fn lobe(&self, z: usize, r: usize, c: usize) -> u8 {
        if let Some([_, u, w]) = Self::inside(&self.right, z, r, c) {
            // w > 0 is medial for the right lung
            let t = u + 0.3 * w;
            return if t < -0.3 {
                1
            } else if t < 0.3 {
                2
            } else {
                3
            };
        }
        if let Some([_, u, w]) = Self::inside(&self.left, z, r, c) {
            let t = u - 0.3 * w;
            return if t < 0.0 { 4 } else { 5 };
        }
        0
    }
}

/// Integer offsets of a discrete ball: `dz² + dr² + dc² <= radius²`.
pub fn ball_offsets(radius: usize) -> Vec<[isize; 3]> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dr in -r..=r {
            for dc in -r..=r {
                if dz * dz + dr * dr + dc * dc <= r * r {
                    out.push([dz, dr, dc]);
                }
            }
        }
    }
    out
}

fn place_lesion(
    lobe_mask: &Array3<u8>,
    lesion: &LesionPlacement,
    rng: &mut ChaCha8Rng,
) -> Result<[usize; 3]> {
    let (s, rows, cols) = lobe_mask.dim();
    let ball = ball_offsets(lesion.radius);
    let rad = lesion.radius;
    let mut candidates: Vec<[usize; 3]> = lobe_mask
        .indexed_iter()
        .filter(|((z, r, c), &l)| {
            l == lesion.lobe
                && *z >= rad
                && *r >= rad
                && *c >= rad
                && z + rad < s
                && r + rad < rows
                && c + rad < cols
        })
        .map(|((z, r, c), _)| [z, r, c])
        .collect();
    candidates.shuffle(rng);
    candidates
        .into_iter()
        .find(|&[z, r, c]| {
            ball.iter().all(|[dz, dr, dc]| {
                let p = [
                    (z as isize + dz) as usize,
                    (r as isize + dr) as usize,
                    (c as isize + dc) as usize,
                ];
                lobe_mask[p] == lesion.lobe
            })
        })
        .ok_or_else(|| {
            Error::invalid(format!(
                "cannot place a radius-{} lesion inside lobe {}",
                lesion.radius, lesion.lobe
            ))
        })
}

/// Synthesises a phantom. Identical specs give bit-identical output.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<PhantomTruth> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [s, r, c] = spec.dims;
    let geo = Geometry::sample(spec.dims, &mut rng);

    let lobe_mask = Array3::from_shape_fn((s, r, c), |(z, y, x)| geo.lobe(z, y, x));
    let mut lesion_kinds = Array3::<u8>::zeros((s, r, c));
    for lesion in &spec.lesion_plan {
        let [z, y, x] = place_lesion(&lobe_mask, lesion, &mut rng)?;
        let code = lesion.kind.category().grid_code();
        let prec = lesion.kind.category().precedence();
        for [dz, dr, dc] in ball_offsets(lesion.radius) {
            let p = [
                (z as isize + dz) as usize,
                (y as isize + dr) as usize,
                (x as isize + dc) as usize,
            ];
            let existing = LesionCategory::from_grid_code(lesion_kinds[p]).unwrap_or(LesionCategory::Negative);
            if prec > existing.precedence() {
                lesion_kinds[p] = code;
            }
        }
    }

    let mut hu = Array3::from_shape_fn((s, r, c), |(z, y, x)| {
        match LesionCategory::from_grid_code(lesion_kinds[[z, y, x]]) {
            Some(LesionCategory::GroundGlass) => return HU_GROUND_GLASS,
            Some(LesionCategory::Consolidation) => return HU_CONSOLIDATION,
            Some(LesionCategory::CrazyPaving) => {
                return if y % CRAZY_PAVING_PITCH == 0 || x % CRAZY_PAVING_PITCH == 0 {
                    HU_CRAZY_PAVING_LINE
                } else {
                    HU_GROUND_GLASS
                };
            }
            _ => {}
        }
        if lobe_mask[[z, y, x]] > 0 {
            HU_LUNG
        } else if Geometry::inside(&geo.body, z, y, x).is_some() {
            HU_BODY
        } else {
            HU_AIR
        }
    });
    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
        hu.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    let voxels = hu.mapv(|v| v.round().clamp(volume_io::HU_MIN as f64, volume_io::HU_MAX as f64) as i16);
    let volume = CTVolume::new(voxels, [1.0, 0.7, 0.7], format!("phantom-{}", spec.seed))?;

    let lesion_mask = lesion_kinds.mapv(|k| u8::from(k > 0));
    let slice_labels = slice_labels_from_kinds(&lesion_kinds);
    Ok(PhantomTruth {
        volume,
        lobe_mask,
        slice_labels,
        lesion_mask,
        lesion_kinds,
    })
}

/// Per-slice label: the dominant lesion kind present in the slice.
pub fn slice_labels_from_kinds(kinds: &Array3<u8>) -> Vec<LesionCategory> {
    kinds
        .axis_iter(Axis(0))
        .map(|sl| LesionCategory::dominant(sl.iter().copied().filter(|&k| k > 0)))
        .collect()
}

/// Parameters for a phantom dataset on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_scans: usize,
    /// Fraction of scans that carry lesions.
    pub mix: f64,
    pub seed: u64,
    pub dims: [usize; 3],
    pub noise_std: f64,
    pub radius_range: (usize, usize),
    pub max_lesions: usize,
}

impl DatasetSpec {
    pub fn new(n_scans: usize, mix: f64, seed: u64) -> Self {
        Self {
            n_scans,
            mix,
            seed,
            dims: [24, 64, 64],
            noise_std: 15.0,
            radius_range: (3, 5),
            max_lesions: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub scan_id: String,
    pub volume: String,
    pub lobe_mask: String,
    pub lesion_mask: String,
    pub lesion_kinds: String,
    pub slice_labels: String,
    pub label: Verdict,
    pub lesions: Vec<LesionPlacement>,
}

/// Index of a phantom dataset; file paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn path_of(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_volume(&self, entry: &ManifestEntry) -> Result<CTVolume> {
        volume_io::load_volume(self.path_of(&entry.volume))
    }

    /// Reloads the full ground truth of one entry.
    pub fn load_truth(&self, entry: &ManifestEntry) -> Result<PhantomTruth> {
        let volume = self.load_volume(entry)?;
        let (lobe_mask, _) = volume_io::load_label_grid(self.path_of(&entry.lobe_mask))?;
        let (lesion_mask, _) = volume_io::load_label_grid(self.path_of(&entry.lesion_mask))?;
        let (lesion_kinds, _) = volume_io::load_label_grid(self.path_of(&entry.lesion_kinds))?;
        let p = self.path_of(&entry.slice_labels);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let slice_labels = serde_json::from_str(&text)?;
        Ok(PhantomTruth {
            volume,
            lobe_mask,
            slice_labels,
            lesion_mask,
            lesion_kinds,
        })
    }
}

/// Writes `n_scans` phantoms plus truth sidecars and a manifest into `out_dir`.
/// Exactly `round(mix * n_scans)` scans carry lesions.
pub fn emit_phantom_dataset(out_dir: impl AsRef<Path>, spec: &DatasetSpec) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    if spec.n_scans < 2 {
        return Err(Error::invalid("a dataset needs at least 2 scans"));
    }
    if !(0.0..=1.0).contains(&spec.mix) {
        return Err(Error::invalid(format!("mix must lie in [0, 1], got {}", spec.mix)));
    }
    let (rmin, rmax) = spec.radius_range;
    if rmin == 0 || rmin > rmax || spec.max_lesions == 0 {
        return Err(Error::invalid("invalid lesion radius range or lesion count"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_pos = (spec.mix * spec.n_scans as f64).round() as usize;
    let mut order: Vec<usize> = (0..spec.n_scans).collect();
    order.shuffle(&mut rng);
    let mut positive = vec![false; spec.n_scans];
    for &i in &order[..n_pos] {
        positive[i] = true;
    }

    let mut entries = Vec::with_capacity(spec.n_scans);
    for (i, &is_pos) in positive.iter().enumerate() {
        let scan_seed: u64 = rng.random();
        let mut plan = Vec::new();
        if is_pos {
            for _ in 0..rng.random_range(1..=spec.max_lesions) {
                plan.push(LesionPlacement {
                    kind: LesionKind::ALL[rng.random_range(0..3)],
                    lobe: rng.random_range(1..=NUM_LOBES),
                    radius: rng.random_range(rmin..=rmax),
                });
            }
        }
        let truth = generate_with_fallback(spec, scan_seed, &mut plan)?;
        let scan_id = format!("scan_{i:03}");
        let mut volume = truth.volume.clone();
        volume.scan_id = scan_id.clone();
        let spacing = volume.spacing_mm();
        let file = |suffix: &str| format!("{scan_id}{suffix}");
        volume_io::write_volume(&volume, out_dir.join(file(".json")))?;
        volume_io::write_label_grid(&truth.lobe_mask, spacing, &scan_id, out_dir.join(file("_lobes.json")))?;
        volume_io::write_label_grid(&truth.lesion_mask, spacing, &scan_id, out_dir.join(file("_lesions.json")))?;
        volume_io::write_label_grid(&truth.lesion_kinds, spacing, &scan_id, out_dir.join(file("_kinds.json")))?;
        let labels_path = out_dir.join(file("_slice_labels.json"));
        fs::write(&labels_path, serde_json::to_string(&truth.slice_labels)?)
            .map_err(|e| Error::io(&labels_path, e))?;
        entries.push(ManifestEntry {
            scan_id: scan_id.clone(),
            volume: file(".json"),
            lobe_mask: file("_lobes.json"),
            lesion_mask: file("_lesions.json"),
            lesion_kinds: file("_kinds.json"),
            slice_labels: file("_slice_labels.json"),
            label: Verdict::from_flag(is_pos),
            lesions: plan,
        });
    }
    let manifest = Manifest {
        spec: spec.clone(),
        entries,
        root: out_dir.to_path_buf(),
    };
    let mpath = out_dir.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// Retries lesion placement on other lobes, then with smaller radii, when a lobe is too small.
fn generate_with_fallback(spec: &DatasetSpec, seed: u64, plan: &mut [LesionPlacement]) -> Result<PhantomTruth> {
    let base = PhantomSpec {
        dims: spec.dims,
        lesion_plan: plan.to_vec(),
        seed,
        noise_std: spec.noise_std,
    };
    if let Ok(t) = generate_phantom(&base) {
        return Ok(t);
    }
    let probe = |lesion: LesionPlacement| {
        generate_phantom(&PhantomSpec {
            lesion_plan: vec![lesion],
            noise_std: 0.0,
            ..base.clone()
        })
        .is_ok()
    };
    for lesion in plan.iter_mut() {
        if probe(*lesion) {
            continue;
        }
        let start = lesion.lobe;
        let fixed = (spec.radius_range.0..=lesion.radius).rev().find_map(|radius| {
            (0..NUM_LOBES)
                .map(|k| (start - 1 + k) % NUM_LOBES + 1)
                .map(|lobe| LesionPlacement { lobe, radius, ..*lesion })
                .find(|&cand| probe(cand))
        });
        *lesion = fixed.ok_or_else(|| {
            Error::invalid(format!("no lobe can host a radius-{} lesion at dims {:?}", lesion.radius, spec.dims))
        })?;
    }
    generate_phantom(&PhantomSpec {
        lesion_plan: plan.to_vec(),
        ..base
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(plan: Vec<LesionPlacement>) -> PhantomSpec {
        PhantomSpec {
            dims: [32, 64, 64],
            lesion_plan: plan,
            seed: 7,
            noise_std: 10.0,
        }
    }

    #[test]
    fn empty_plan_is_negative() {
        let t = generate_phantom(&spec(vec![])).unwrap();
        assert!(t.slice_labels.iter().all(|&l| l == LesionCategory::Negative));
        assert!(t.lesion_mask.iter().all(|&v| v == 0));
    }

    #[test]
    fn seeded_determinism() {
        let plan = vec![LesionPlacement { kind: LesionKind::CrazyPaving, lobe: 3, radius: 3 }];
        let a = generate_phantom(&spec(plan.clone())).unwrap();
        let b = generate_phantom(&spec(plan)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn consolidation_ball_voxel_count_matches_enumeration() {
        let mut s = spec(vec![LesionPlacement { kind: LesionKind::Consolidation, lobe: 2, radius: 5 }]);
        s.dims = [40, 96, 96];
        let t = generate_phantom(&s).unwrap();
        // enumeration oracle: integer points with x²+y²+z² <= 25
        let mut expected = 0;
        for x in -5i32..=5 {
            for y in -5i32..=5 {
                for z in -5i32..=5 {
                    if x * x + y * y + z * z <= 25 {
                        expected += 1;
                    }
                }
            }
        }
        assert_eq!(expected, 515);
        let count = t.lesion_mask.iter().filter(|&&v| v == 1).count();
        assert_eq!(count, expected);
        assert!(t
            .lesion_mask
            .indexed_iter()
            .filter(|(_, &v)| v == 1)
            .all(|(p, _)| t.lobe_mask[p] == 2));
    }

    #[test]
    fn lobes_partition_lungs() {
        let t = generate_phantom(&spec(vec![])).unwrap();
        for l in 1..=5u8 {
            assert!(t.lobe_mask.iter().any(|&v| v == l), "lobe {l} missing");
        }
        assert!(t.lobe_mask.iter().all(|&v| v <= 5));
    }

    #[test]
    fn impossible_placement_errors() {
        let s = PhantomSpec {
            dims: [16, 16, 16],
            lesion_plan: vec![LesionPlacement { kind: LesionKind::GroundGlass, lobe: 2, radius: 7 }],
            seed: 1,
            noise_std: 0.0,
        };
        assert!(generate_phantom(&s).is_err());
        let bad = PhantomSpec { dims: [8, 64, 64], ..spec(vec![]) };
        assert!(generate_phantom(&bad).is_err());
    }

    #[test]
    fn density_ordering_per_kind() {
        for seed in 0..4 {
            let plan = vec![
                LesionPlacement { kind: LesionKind::Consolidation, lobe: 3, radius: 3 },
                LesionPlacement { kind: LesionKind::GroundGlass, lobe: 5, radius: 3 },
            ];
            let t = generate_phantom(&PhantomSpec { seed, ..spec(plan) }).unwrap();
            let mean = |code: u8, lung_only: bool| {
                let vals: Vec<f64> = t
                    .volume
                    .voxels()
                    .indexed_iter()
                    .filter(|(p, _)| {
                        if lung_only {
                            t.lobe_mask[*p] > 0 && t.lesion_kinds[*p] == 0
                        } else {
                            t.lesion_kinds[*p] == code
                        }
                    })
                    .map(|(_, &v)| v as f64)
                    .collect();
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            let cons = mean(LesionCategory::Consolidation.grid_code(), false);
            let gg = mean(LesionCategory::GroundGlass.grid_code(), false);
            let healthy = mean(0, true);
            assert!(cons > gg && gg > healthy, "seed {seed}: {cons} {gg} {healthy}");
        }
    }

    #[test]
    fn slice_labels_match_mask_intersection() {
        let plan = vec![
            LesionPlacement { kind: LesionKind::GroundGlass, lobe: 1, radius: 3 },
            LesionPlacement { kind: LesionKind::CrazyPaving, lobe: 4, radius: 4 },
        ];
        let t = generate_phantom(&spec(plan)).unwrap();
        for (z, label) in t.slice_labels.iter().enumerate() {
            let hit = t.lesion_mask.index_axis(Axis(0), z).iter().any(|&v| v == 1);
            assert_eq!(hit, *label != LesionCategory::Negative);
        }
        assert_eq!(slice_labels_from_kinds(&t.lesion_kinds), t.slice_labels);
    }

    #[test]
    fn dataset_counts_and_determinism() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let mut ds = DatasetSpec::new(4, 0.5, 11);
        ds.dims = [16, 48, 48];
        ds.radius_range = (2, 3);
        let m1 = emit_phantom_dataset(d1.path(), &ds).unwrap();
        let m2 = emit_phantom_dataset(d2.path(), &ds).unwrap();
        assert_eq!(m1.entries, m2.entries);
        assert_eq!(m1.entries.iter().filter(|e| e.label.is_positive()).count(), 2);
        let reread = Manifest::load(d1.path()).unwrap();
        let truth = reread.load_truth(&reread.entries[0]).unwrap();
        assert_eq!(truth.volume.scan_id, "scan_000");
        for e in &reread.entries {
            let t = reread.load_truth(e).unwrap();
            assert_eq!(e.label.is_positive(), t.lesion_mask.iter().any(|&v| v == 1));
        }

        let mut none = ds.clone();
        none.mix = 0.0;
        let m = emit_phantom_dataset(tempfile::tempdir().unwrap().path(), &none).unwrap();
        assert!(m.entries.iter().all(|e| !e.label.is_positive()));

        let mut ten = DatasetSpec::new(10, 0.5, 3);
        ten.dims = [16, 48, 48];
        ten.radius_range = (2, 3);
        let m = emit_phantom_dataset(tempfile::tempdir().unwrap().path(), &ten).unwrap();
        assert_eq!(m.entries.iter().filter(|e| e.label.is_positive()).count(), 5);
        assert!(emit_phantom_dataset(d1.path(), &DatasetSpec::new(1, 0.5, 1)).is_err());
        assert!(emit_phantom_dataset(d1.path(), &DatasetSpec::new(4, 1.5, 1)).is_err());
    }
}
