//! Inference chain: segment, mask, score slices, vote, categorize lobes of
//! flagged slices and explain them.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::clf_model::{self, Classifier, LesionPrediction};
use crate::error::{Error, Result, Stage};
use crate::explainer::{self, SaliencyMap, VarGradConfig};
use crate::imageops;
use crate::labels::{LesionCategory, Verdict};
use crate::seg_model::{extract_lobe_crops, segment_volume, LobeCrop, SegMask, SegModel};
use crate::volume_io::{apply_window, CTVolume, WindowSpec};

pub const SLICE_THRESHOLD: f64 = 0.5;
pub const VOTING_THRESHOLD: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceDecision {
    pub slice_index: usize,
    pub p_positive: f64,
    pub positive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanVerdict {
    pub scan_id: String,
    pub decision: Verdict,
    pub positive_fraction: f64,
    pub threshold: f64,
    pub slice_threshold: f64,
    pub per_slice: Vec<SliceDecision>,
    pub lung_slice_fraction: f64,
}

impl ScanVerdict {
    pub fn flagged(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_slice.iter().filter(|d| d.positive).map(|d| d.slice_index)
    }
}

/// Scan decision from per-slice flags: positive iff `flagged / total >= threshold`.
pub fn vote_flags(flags: &[bool], threshold: f64) -> Result<(Verdict, f64)> {
    if flags.is_empty() {
        return Err(Error::invalid("cannot vote over zero slices"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("voting threshold must lie in (0, 1), got {threshold}")));
    }
    let fraction = flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64;
    Ok((Verdict::from_flag(fraction >= threshold), fraction))
}

/// Flags slices with `p >= slice_threshold`, then votes.
pub fn vote(scan_id: &str, scores: &[f64], slice_threshold: f64, threshold: f64, lung_slice_fraction: f64) -> Result<ScanVerdict> {
    let per_slice: Vec<SliceDecision> = scores
        .iter()
        .enumerate()
        .map(|(i, &p)| SliceDecision {
            slice_index: i,
            p_positive: p,
            positive: p >= slice_threshold,
        })
        .collect();
    let flags: Vec<bool> = per_slice.iter().map(|d| d.positive).collect();
    let (decision, positive_fraction) = vote_flags(&flags, threshold)?;
    Ok(ScanVerdict {
        scan_id: scan_id.to_string(),
        decision,
        positive_fraction,
        threshold,
        slice_threshold,
        per_slice,
        lung_slice_fraction,
    })
}

pub trait Segmenter {
    fn segment(&self, volume: &CTVolume) -> Result<Vec<SegMask>>;
    fn version(&self) -> u32;
}

impl Segmenter for SegModel {
    fn segment(&self, volume: &CTVolume) -> Result<Vec<SegMask>> {
        segment_volume(self, volume)
    }

    fn version(&self) -> u32 {
        self.version
    }
}

pub trait SliceDetector {
    /// Model input for one windowed slice and its lung mask.
    fn prepare(&self, windowed: &Array2<f32>, lung: &Array2<bool>) -> Result<Array2<f32>>;
    fn score(&self, prepared: &[&Array2<f32>]) -> Result<Vec<f64>>;
    /// Saliency for the positive class at model input resolution.
    fn saliency(&self, prepared: &Array2<f32>, config: &VarGradConfig) -> Result<SaliencyMap>;
    fn version(&self) -> u32;
}

impl SliceDetector for Classifier {
    fn prepare(&self, windowed: &Array2<f32>, lung: &Array2<bool>) -> Result<Array2<f32>> {
        self.prepare_slice(windowed, lung)
    }

    fn score(&self, prepared: &[&Array2<f32>]) -> Result<Vec<f64>> {
        clf_model::classify_batch(self, prepared)
    }

    fn saliency(&self, prepared: &Array2<f32>, config: &VarGradConfig) -> Result<SaliencyMap> {
        explainer::vargrad(self, prepared, 1, None, config)
    }

    fn version(&self) -> u32 {
        self.version
    }
}

pub trait CropCategorizer {
    fn categorize(&self, crop: &LobeCrop) -> Result<LesionPrediction>;
    fn version(&self) -> u32;
}

impl CropCategorizer for Classifier {
    fn categorize(&self, crop: &LobeCrop) -> Result<LesionPrediction> {
        clf_model::categorize_crop(self, crop)
    }

    fn version(&self) -> u32 {
        self.version
    }
}

/// Receives saliency maps (resized to the slice) and returns a reference to the stored artifact.
pub trait SaliencySink {
    fn store(&mut self, slice_index: usize, map: &SaliencyMap, windowed: &Array2<f32>) -> Result<String>;
}

/// Writes `slice_{n}.png` overlays with JSON sidecars under a directory; references are relative to `base`.
pub struct DirectorySink {
    pub base: PathBuf,
    pub subdir: String,
}

impl DirectorySink {
    pub fn path_of(&self, reference: &str) -> PathBuf {
        self.base.join(reference)
    }
}

pub fn saliency_file_name(slice_index: usize) -> String {
    format!("slice_{slice_index}.png")
}

impl SaliencySink for DirectorySink {
    fn store(&mut self, slice_index: usize, map: &SaliencyMap, windowed: &Array2<f32>) -> Result<String> {
        let dir = self.base.join(&self.subdir);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let reference = format!("{}/{}", self.subdir, saliency_file_name(slice_index));
        explainer::export_saliency(map, windowed, &self.base.join(&reference))?;
        Ok(reference)
    }
}

/// Keeps maps in memory; references are `memory:{slice}`.
#[derive(Default)]
pub struct MemorySink {
    pub maps: Vec<(usize, SaliencyMap)>,
}

impl SaliencySink for MemorySink {
    fn store(&mut self, slice_index: usize, map: &SaliencyMap, _windowed: &Array2<f32>) -> Result<String> {
        self.maps.push((slice_index, map.clone()));
        Ok(format!("memory:{slice_index}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub window: WindowSpec,
    pub slice_threshold: f64,
    pub voting_threshold: f64,
    /// `None` skips saliency computation.
    pub explain: Option<VarGradConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window: WindowSpec::default(),
            slice_threshold: SLICE_THRESHOLD,
            voting_threshold: VOTING_THRESHOLD,
            explain: Some(VarGradConfig::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionFinding {
    pub slice_index: usize,
    pub lobe_index: u8,
    pub prediction: LesionPrediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyRef {
    pub slice_index: usize,
    pub path: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelVersions {
    pub segmenter: u32,
    pub detector: u32,
    pub categorizer: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub revision: u32,
    pub verdict: ScanVerdict,
    /// One entry per categorized lobe of each flagged slice.
    pub findings: Vec<LesionFinding>,
    pub saliency: Vec<SaliencyRef>,
    pub model_versions: ModelVersions,
    pub vargrad: Option<VarGradConfig>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

impl ScanReport {
    /// The report without revision and timestamps, for determinism comparisons.
    pub fn body(&self) -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            for k in ["revision", "started_at", "finished_at"] {
                obj.remove(k);
            }
        }
        Ok(v)
    }

    /// Findings whose predicted category is a lesion.
    pub fn lesions(&self) -> impl Iterator<Item = &LesionFinding> {
        self.findings
            .iter()
            .filter(|f| f.prediction.label != LesionCategory::Negative)
    }

    /// Findings only on flagged slices; saliency only for flagged slices.
    pub fn check_invariants(&self) -> Result<()> {
        let flagged: Vec<usize> = self.verdict.flagged().collect();
        if let Some(f) = self.findings.iter().find(|f| !flagged.contains(&f.slice_index)) {
            return Err(Error::invalid(format!("finding on unflagged slice {}", f.slice_index)));
        }
        if let Some(s) = self.saliency.iter().find(|s| !flagged.contains(&s.slice_index)) {
            return Err(Error::invalid(format!("saliency for unflagged slice {}", s.slice_index)));
        }
        if !self.verdict.decision.is_positive() && !(self.findings.is_empty() && self.saliency.is_empty()) {
            return Err(Error::invalid("negative verdict with findings or saliency"));
        }
        Ok(())
    }
}

pub struct Models<'a> {
    pub segmenter: &'a dyn Segmenter,
    pub detector: &'a dyn SliceDetector,
    pub categorizer: &'a dyn CropCategorizer,
}

/// Everything computed for one scan; `report.revision` is 0 until persisted.
pub struct PipelineRun {
    pub report: ScanReport,
    pub masks: Vec<SegMask>,
}

const DETECT_BATCH: usize = 8;

pub fn run_pipeline(volume: &CTVolume, models: &Models, config: &PipelineConfig, sink: &mut dyn SaliencySink) -> Result<PipelineRun> {
    let started_at = Utc::now();
    let n = volume.num_slices();
    let (_, rows, cols) = volume.dims();

    let masks = models.segmenter.segment(volume).map_err(Error::at(Stage::Segmentation))?;
    if masks.len() != n || masks.iter().any(|m| m.labels.dim() != (rows, cols)) {
        return Err(Error::at(Stage::Segmentation)(Error::Shape(format!(
            "segmenter returned {} masks for {n} slices of {rows}x{cols}",
            masks.len()
        ))));
    }

    let detect = || -> Result<(Vec<Array2<f32>>, Vec<Array2<f32>>, Vec<f64>)> {
        let slices: Vec<Array2<f32>> = apply_window(volume, &config.window)?
            .axis_iter(Axis(0))
            .map(|s| s.to_owned())
            .collect();
        let prepared = slices
            .iter()
            .zip(&masks)
            .map(|(s, m)| models.detector.prepare(s, &m.lung()))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Array2<f32>> = prepared.iter().collect();
        let mut scores = Vec::with_capacity(n);
        for chunk in refs.chunks(DETECT_BATCH) {
            scores.extend(models.detector.score(chunk)?);
        }
        if scores.len() != n || scores.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Shape("detector returned invalid scores".into()));
        }
        // Slices without lung carry no evidence.
        for (p, m) in scores.iter_mut().zip(&masks) {
            if !m.has_lung() {
                *p = 0.0;
            }
        }
        Ok((slices, prepared, scores))
    };
    let (slices, prepared, scores) = detect().map_err(Error::at(Stage::Detection))?;
    let lung_slices = masks.iter().filter(|m| m.has_lung()).count();
    let verdict = vote(
        &volume.scan_id,
        &scores,
        config.slice_threshold,
        config.voting_threshold,
        lung_slices as f64 / n as f64,
    )
    .map_err(Error::at(Stage::Detection))?;

    let mut findings = Vec::new();
    let mut saliency = Vec::new();
    if verdict.decision.is_positive() {
        let flagged: Vec<usize> = verdict.flagged().collect();
        for &i in &flagged {
            let crops = extract_lobe_crops(&slices[i], &masks[i], &volume.scan_id, i).map_err(Error::at(Stage::Categorization))?;
            for crop in &crops {
                let prediction = models.categorizer.categorize(crop).map_err(Error::at(Stage::Categorization))?;
                findings.push(LesionFinding {
                    slice_index: i,
                    lobe_index: crop.lobe_index,
                    prediction,
                });
            }
        }
        if let Some(cfg) = &config.explain {
            for &i in &flagged {
                let mut explain = || -> Result<String> {
                    let mut map = models.detector.saliency(&prepared[i], cfg)?;
                    if map.values.dim() != (rows, cols) {
                        map.values = imageops::resize_bilinear(&map.values, rows, cols).mapv(|v| v.max(0.0));
                    }
                    sink.store(i, &map, &slices[i])
                };
                let path = explain().map_err(Error::at(Stage::Explanation))?;
                saliency.push(SaliencyRef { slice_index: i, path });
            }
        }
    }

    let report = ScanReport {
        revision: 0,
        verdict,
        findings,
        saliency,
        model_versions: ModelVersions {
            segmenter: models.segmenter.version(),
            detector: models.detector.version(),
            categorizer: models.categorizer.version(),
        },
        vargrad: config.explain,
        started_at,
        finished_at: Utc::now(),
    };
    Ok(PipelineRun { report, masks })
}

/// Loads the three checkpoints of a model directory (`seg`, `det`, `cat` `.safetensors`).
pub struct ModelSet {
    pub segmenter: SegModel,
    pub detector: Classifier,
    pub categorizer: Classifier,
}

pub const SEG_CHECKPOINT: &str = "seg.safetensors";
pub const DET_CHECKPOINT: &str = "det.safetensors";
pub const CAT_CHECKPOINT: &str = "cat.safetensors";

impl ModelSet {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            segmenter: SegModel::load(&dir.join(SEG_CHECKPOINT))?,
            detector: Classifier::load(&dir.join(DET_CHECKPOINT))?,
            categorizer: Classifier::load(&dir.join(CAT_CHECKPOINT))?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.segmenter.save(&dir.join(SEG_CHECKPOINT))?;
        self.detector.save(&dir.join(DET_CHECKPOINT))?;
        self.categorizer.save(&dir.join(CAT_CHECKPOINT))
    }

    pub fn models(&self) -> Models<'_> {
        Models {
            segmenter: &self.segmenter,
            detector: &self.detector,
            categorizer: &self.categorizer,
        }
    }
}

/// Test doubles for the pipeline stages.
#[doc(hidden)]
pub mod stubs {
    use super::*;

    /// Returns fixed masks.
    pub struct FixedSegmenter(pub Vec<SegMask>);

    impl Segmenter for FixedSegmenter {
        fn segment(&self, volume: &CTVolume) -> Result<Vec<SegMask>> {
            if self.0.len() != volume.num_slices() {
                return Err(Error::Shape("fixed masks do not match the volume".into()));
            }
            Ok(self.0.clone())
        }

        fn version(&self) -> u32 {
            0
        }
    }

    /// Scores every slice with the same probability.
    pub struct ConstantDetector(pub f64);

    impl SliceDetector for ConstantDetector {
        fn prepare(&self, windowed: &Array2<f32>, lung: &Array2<bool>) -> Result<Array2<f32>> {
            let mut x = windowed.clone();
            ndarray::Zip::from(&mut x).and(lung).for_each(|v, &m| {
                if !m {
                    *v = 0.0
                }
            });
            Ok(x)
        }

        fn score(&self, prepared: &[&Array2<f32>]) -> Result<Vec<f64>> {
            Ok(vec![self.0; prepared.len()])
        }

        fn saliency(&self, prepared: &Array2<f32>, _config: &VarGradConfig) -> Result<SaliencyMap> {
            Ok(SaliencyMap {
                values: prepared.mapv(|v| v.max(0.0)),
                target_category: 1,
                layer_name: "input".into(),
                vargrad: None,
            })
        }

        fn version(&self) -> u32 {
            0
        }
    }

    pub struct ConstantCategorizer(pub LesionCategory);

    impl CropCategorizer for ConstantCategorizer {
        fn categorize(&self, crop: &LobeCrop) -> Result<LesionPrediction> {
            let mut probs = [0.0; 4];
            probs[self.0.index()] = 1.0;
            Ok(LesionPrediction::from_probs(probs, crop))
        }

        fn version(&self) -> u32 {
            0
        }
    }

    pub struct FailingCategorizer;

    impl CropCategorizer for FailingCategorizer {
        fn categorize(&self, _crop: &LobeCrop) -> Result<LesionPrediction> {
            Err(Error::invalid("categorizer unavailable"))
        }

        fn version(&self) -> u32 {
            0
        }
    }
}
