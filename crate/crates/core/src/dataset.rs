//! Training and evaluation samples assembled from labelled phantom scans.

use ndarray::{s, Array2, Axis};

use crate::clf_model::Classifier;
use crate::error::{Error, Result};
use crate::imageops;
use crate::labels::LesionCategory;
use crate::phantom::{Manifest, PhantomTruth};
use crate::seg_model::{extract_lobe_crops, LobeCrop, SegMask};
use crate::trainer::{ClassSample, SegSample};
use crate::volume_io::{apply_window, NormStats, WindowSpec};

/// A scan with its ground truth and the windowed slices derived from it.
pub struct LabelledScan {
    pub truth: PhantomTruth,
    pub scan_id: String,
    /// Windowed slices at native resolution, values in [0, 1].
    pub windowed: Vec<Array2<f32>>,
}

impl LabelledScan {
    pub fn new(truth: PhantomTruth, scan_id: &str, window: &WindowSpec) -> Result<Self> {
        let w = apply_window(&truth.volume, window)?;
        Ok(Self {
            windowed: w.axis_iter(Axis(0)).map(|s| s.to_owned()).collect(),
            scan_id: scan_id.to_string(),
            truth,
        })
    }

    pub fn num_slices(&self) -> usize {
        self.windowed.len()
    }

    pub fn lobe_labels(&self, i: usize) -> Array2<u8> {
        self.truth.lobe_mask.index_axis(Axis(0), i).to_owned()
    }

    pub fn truth_mask(&self, i: usize) -> Result<SegMask> {
        SegMask::new(self.lobe_labels(i))
    }

    pub fn slice_positive(&self, i: usize) -> bool {
        self.truth.slice_labels[i] != LesionCategory::Negative
    }

    pub fn is_positive(&self) -> bool {
        self.truth.slice_labels.iter().any(|l| *l != LesionCategory::Negative)
    }
}

pub fn load_scans(manifest: &Manifest, ids: &[&str], window: &WindowSpec) -> Result<Vec<LabelledScan>> {
    ids.iter()
        .map(|id| {
            let entry = manifest
                .entries
                .iter()
                .find(|e| e.scan_id == *id)
                .ok_or_else(|| Error::NotFound(format!("scan {id} in manifest")))?;
            LabelledScan::new(manifest.load_truth(entry)?, id, window)
        })
        .collect()
}

/// Intensity statistics of resized windowed slices (segmentation input).
pub fn slice_norm(scans: &[LabelledScan], size: usize) -> Result<NormStats> {
    let resized: Vec<Array2<f32>> = scans
        .iter()
        .flat_map(|s| s.windowed.iter().map(|w| imageops::resize_bilinear(w, size, size)))
        .collect();
    NormStats::from_images(&resized)
}

/// Intensity statistics over lung pixels only (classifier input).
pub fn lung_norm(scans: &[LabelledScan]) -> Result<NormStats> {
    let lung: Vec<f32> = scans
        .iter()
        .flat_map(|s| {
            s.windowed.iter().enumerate().flat_map(move |(i, w)| {
                w.iter()
                    .zip(s.truth.lobe_mask.index_axis(Axis(0), i))
                    .filter(|(_, &l)| l > 0)
                    .map(|(v, _)| *v)
                    .collect::<Vec<_>>()
            })
        })
        .collect();
    let n = lung.len();
    let one = Array2::from_shape_vec((1, n), lung).map_err(|e| Error::Shape(e.to_string()))?;
    NormStats::from_images([&one])
}

/// One triplet per slice, resized to `size` and standardized with `norm`.
pub fn seg_samples(scans: &[LabelledScan], norm: &NormStats, size: usize) -> Vec<SegSample> {
    let mut out = Vec::new();
    for scan in scans {
        let imgs: Vec<Array2<f32>> = scan
            .windowed
            .iter()
            .map(|w| imageops::resize_bilinear(w, size, size).mapv(|v| norm.apply(v)))
            .collect();
        let labels: Vec<Array2<u8>> = (0..scan.num_slices())
            .map(|i| imageops::resize_nearest(&scan.lobe_labels(i), size, size))
            .collect();
        let n = imgs.len();
        for i in 0..n {
            let idx = [i.saturating_sub(1), i, (i + 1).min(n - 1)];
            out.push(SegSample {
                images: idx.map(|j| imgs[j].clone()),
                labels: idx.map(|j| labels[j].clone()),
                scan_id: scan.scan_id.clone(),
                center_index: i,
            });
        }
    }
    out
}

/// Masked detector inputs for every slice, with lung masks from ground truth.
pub fn detection_samples(scans: &[LabelledScan], model: &Classifier) -> Result<Vec<ClassSample>> {
    let lungs: Vec<Vec<Array2<bool>>> = scans
        .iter()
        .map(|s| (0..s.num_slices()).map(|i| s.lobe_labels(i).mapv(|l| l > 0)).collect())
        .collect();
    detection_samples_with(scans, &lungs, model)
}

/// Masked detector inputs using the given per-slice lung masks (one list per scan).
pub fn detection_samples_with(
    scans: &[LabelledScan],
    lungs: &[Vec<Array2<bool>>],
    model: &Classifier,
) -> Result<Vec<ClassSample>> {
    if lungs.len() != scans.len() {
        return Err(Error::Shape(format!("{} mask sets for {} scans", lungs.len(), scans.len())));
    }
    let mut out = Vec::new();
    for (scan, masks) in scans.iter().zip(lungs) {
        if masks.len() != scan.num_slices() {
            return Err(Error::Shape(format!("{}: {} masks for {} slices", scan.scan_id, masks.len(), scan.num_slices())));
        }
        for (i, lung) in masks.iter().enumerate() {
            out.push(ClassSample {
                image: model.prepare_slice(&scan.windowed[i], lung)?,
                label: usize::from(scan.slice_positive(i)),
                weight: 1.0,
                scan_id: scan.scan_id.clone(),
                slice_index: i,
            });
        }
    }
    Ok(out)
}

/// Dominant lesion category inside a crop's lobe pixels.
pub fn crop_label(scan: &LabelledScan, crop: &LobeCrop) -> LesionCategory {
    let [r0, c0, h, w] = crop.bbox;
    let kinds = scan.truth.lesion_kinds.index_axis(Axis(0), crop.slice_index);
    let window = kinds.slice(s![r0..r0 + h, c0..c0 + w]);
    LesionCategory::dominant(
        window
            .iter()
            .zip(crop.mask.iter())
            .filter(|(&k, &m)| m && k > 0)
            .map(|(&k, _)| k),
    )
}

/// Ground-truth lobe crops of every lesion-bearing slice with their labels.
pub fn labelled_crops(scans: &[LabelledScan]) -> Result<Vec<(LobeCrop, LesionCategory)>> {
    let mut out = Vec::new();
    for scan in scans {
        for i in (0..scan.num_slices()).filter(|&i| scan.slice_positive(i)) {
            for crop in extract_lobe_crops(&scan.windowed[i], &scan.truth_mask(i)?, &scan.scan_id, i)? {
                let label = crop_label(scan, &crop);
                out.push((crop, label));
            }
        }
    }
    Ok(out)
}

pub fn crop_samples(crops: &[(LobeCrop, LesionCategory)], model: &Classifier) -> Result<Vec<ClassSample>> {
    crops
        .iter()
        .map(|(crop, label)| {
            Ok(ClassSample {
                image: model.prepare_crop(crop)?,
                label: label.index(),
                weight: 1.0,
                scan_id: crop.scan_id.clone(),
                slice_index: crop.slice_index,
            })
        })
        .collect()
}
