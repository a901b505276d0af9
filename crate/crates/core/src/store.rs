//! File-backed persistence for scans, reports, saliency artifacts and
//! radiologist feedback.
//!
//! Layout under the root:
//!
//! ```text
//! scans/{id}/scan.json            ScanRecord
//! scans/{id}/volume.json|.raw     submitted volume
//! scans/{id}/lobes.json|.raw      lobe masks from the last run
//! scans/{id}/report.json          ScanReport
//! scans/{id}/saliency/slice_{n}.png (+ .json)
//! feedback/{id:08}.json           one immutable record per file
//! consumed/{id:08}                consumption markers
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use base64::Engine;
use chrono::{DateTime, Utc};
use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage};
use crate::explainer;
use crate::labels::{LesionCategory, Verdict};
use crate::pipeline::{run_pipeline, DirectorySink, Models, PipelineConfig, ScanReport};
use crate::seg_model::SegMask;
use crate::trainer::ClassSample;
use crate::volume_io::{self, apply_window, CTVolume, VolumeHeader, WindowSpec};

/// A volume in a single JSON document: the usual header plus the base64 payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PortableVolume {
    pub header: VolumeHeader,
    pub payload: String,
}

impl PortableVolume {
    pub fn encode(volume: &CTVolume) -> Self {
        let (header, payload) = volume_io::volume_to_parts(volume);
        Self {
            header,
            payload: base64::engine::general_purpose::STANDARD.encode(payload),
        }
    }

    pub fn decode(&self) -> Result<CTVolume> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.payload)
            .map_err(|e| Error::Header(format!("payload is not base64: {e}")))?;
        volume_io::volume_from_parts(&self.header, &bytes)
    }

    pub fn parse(body: &[u8]) -> Result<CTVolume> {
        let p: PortableVolume = serde_json::from_slice(body).map_err(|e| Error::Header(e.to_string()))?;
        p.decode()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanStatus {
    Pending,
    Processing,
    Processed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub scan_id: String,
    /// Identifier carried by the uploaded volume.
    pub source_id: String,
    pub status: ScanStatus,
    pub revision: u32,
    pub dims: [usize; 3],
    pub submitted_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub error: Option<String>,
    pub failed_stage: Option<Stage>,
}

/// Row of the scan list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSummary {
    pub scan_id: String,
    pub status: ScanStatus,
    pub revision: u32,
    pub num_slices: usize,
    pub verdict: Option<Verdict>,
    pub positive_fraction: Option<f64>,
    pub feedback_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackScope {
    Scan,
    Slice,
}

/// Feedback as submitted; the store assigns id, timestamp and consumption state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackInput {
    pub scan_id: String,
    pub scope: FeedbackScope,
    #[serde(default)]
    pub slice_index: Option<usize>,
    pub corrected_label: String,
    #[serde(default = "default_author")]
    pub author_role: String,
}

fn default_author() -> String {
    "radiologist".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub id: u64,
    pub scan_id: String,
    pub scope: FeedbackScope,
    pub slice_index: Option<usize>,
    pub corrected_label: String,
    pub author_role: String,
    pub timestamp: DateTime<Utc>,
    pub consumed: bool,
}

/// Label a feedback record implies for a slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrectedLabel {
    Verdict(Verdict),
    Category(LesionCategory),
}

impl CorrectedLabel {
    /// Scan scope accepts `positive`/`negative`; slice scope also accepts lesion category names.
    pub fn parse(scope: FeedbackScope, label: &str) -> Result<Self> {
        let verdict = match label {
            "positive" => Some(Verdict::Positive),
            "negative" => Some(Verdict::Negative),
            _ => None,
        };
        match (scope, verdict) {
            (_, Some(v)) => Ok(Self::Verdict(v)),
            (FeedbackScope::Slice, None) => LesionCategory::ALL
                .into_iter()
                .find(|c| c.name() == label)
                .map(Self::Category)
                .ok_or_else(|| Error::invalid(format!("unknown slice label {label:?}"))),
            (FeedbackScope::Scan, None) => Err(Error::invalid(format!("scan label must be positive or negative, got {label:?}"))),
        }
    }

    pub fn is_positive(self) -> bool {
        match self {
            Self::Verdict(v) => v.is_positive(),
            Self::Category(c) => c != LesionCategory::Negative,
        }
    }
}

impl FeedbackInput {
    pub fn validate(&self) -> Result<CorrectedLabel> {
        match (self.scope, self.slice_index) {
            (FeedbackScope::Slice, None) => return Err(Error::invalid("slice feedback needs slice_index")),
            (FeedbackScope::Scan, Some(_)) => return Err(Error::invalid("scan feedback must not carry slice_index")),
            _ => {}
        }
        CorrectedLabel::parse(self.scope, &self.corrected_label)
    }
}

pub struct FileStore {
    root: PathBuf,
    scan_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    submit_lock: Mutex<()>,
    feedback_lock: Mutex<()>,
}

const RECORD: &str = "scan.json";
const VOLUME: &str = "volume.json";
const LOBES: &str = "lobes.json";
const REPORT: &str = "report.json";
const SALIENCY: &str = "saliency";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl FileStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["scans", "feedback", "consumed"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(Self {
            root,
            scan_locks: Mutex::new(HashMap::new()),
            submit_lock: Mutex::new(()),
            feedback_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn scan_dir(&self, id: &str) -> PathBuf {
        self.root.join("scans").join(id)
    }

    fn scan_lock(&self, id: &str) -> Arc<Mutex<()>> {
        lock(&self.scan_locks).entry(id.to_string()).or_default().clone()
    }

    fn checked_dir(&self, id: &str) -> Result<PathBuf> {
        let valid = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        let dir = self.scan_dir(id);
        if !valid || !dir.join(RECORD).is_file() {
            return Err(Error::NotFound(format!("scan {id}")));
        }
        Ok(dir)
    }

    /// Persists a volume under a fresh id with status pending.
    pub fn submit(&self, volume: &CTVolume) -> Result<ScanRecord> {
        let _guard = lock(&self.submit_lock);
        let next = self.scan_ids()?.len() + 1;
        let scan_id = (next..)
            .map(|n| format!("scan-{n:06}"))
            .find(|id| !self.scan_dir(id).exists())
            .expect("unbounded id range");
        let dir = self.scan_dir(&scan_id);
        let mut stored = volume.clone();
        stored.scan_id = scan_id.clone();
        volume_io::write_volume(&stored, dir.join(VOLUME))?;
        let now = Utc::now();
        let (s, r, c) = volume.dims();
        let record = ScanRecord {
            scan_id,
            source_id: volume.scan_id.clone(),
            status: ScanStatus::Pending,
            revision: 0,
            dims: [s, r, c],
            submitted_at: now,
            updated_at: now,
            error: None,
            failed_stage: None,
        };
        write_json(&dir.join(RECORD), &record)?;
        Ok(record)
    }

    pub fn scan_ids(&self) -> Result<Vec<String>> {
        let dir = self.root.join("scans");
        let mut ids: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join(RECORD).is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn record(&self, id: &str) -> Result<ScanRecord> {
        read_json(&self.checked_dir(id)?.join(RECORD))
    }

    pub fn volume(&self, id: &str) -> Result<CTVolume> {
        volume_io::load_volume(self.checked_dir(id)?.join(VOLUME))
    }

    /// `None` while the scan has not been processed successfully.
    pub fn report(&self, id: &str) -> Result<Option<ScanReport>> {
        let path = self.checked_dir(id)?.join(REPORT);
        if !path.is_file() {
            return Ok(None);
        }
        read_json(&path).map(Some)
    }

    pub fn masks(&self, id: &str) -> Result<Option<Vec<SegMask>>> {
        let path = self.checked_dir(id)?.join(LOBES);
        if !path.is_file() {
            return Ok(None);
        }
        let (grid, _) = volume_io::load_label_grid(&path)?;
        grid.axis_iter(Axis(0))
            .map(|s| SegMask::new(s.to_owned()))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    pub fn list(&self) -> Result<Vec<ScanSummary>> {
        let feedback = self.feedback(None, false)?;
        self.scan_ids()?
            .into_iter()
            .map(|id| {
                let record = self.record(&id)?;
                let report = self.report(&id)?;
                Ok(ScanSummary {
                    feedback_count: feedback.iter().filter(|f| f.scan_id == id).count(),
                    scan_id: id,
                    status: record.status,
                    revision: record.revision,
                    num_slices: record.dims[0],
                    verdict: report.as_ref().map(|r| r.verdict.decision),
                    positive_fraction: report.as_ref().map(|r| r.verdict.positive_fraction),
                })
            })
            .collect()
    }

    /// Runs the pipeline and stores its outputs, bumping the revision. Writes to
    /// one scan are serialized; a failure leaves the previous report in place.
    pub fn process(&self, id: &str, models: &Models, config: &PipelineConfig) -> Result<ScanReport> {
        let dir = self.checked_dir(id)?;
        let scan_lock = self.scan_lock(id);
        let _guard = lock(&scan_lock);
        let mut record = self.record(id)?;
        let volume = self.volume(id)?;
        record.status = ScanStatus::Processing;
        write_json(&dir.join(RECORD), &record)?;

        let staging = dir.join("saliency.tmp");
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        let mut sink = DirectorySink {
            base: self.root.clone(),
            subdir: format!("scans/{id}/saliency.tmp"),
        };
        let outcome = run_pipeline(&volume, models, config, &mut sink);
        record.updated_at = Utc::now();
        let run = match outcome {
            Ok(run) => run,
            Err(e) => {
                record.status = ScanStatus::Failed;
                record.error = Some(e.to_string());
                record.failed_stage = e.stage();
                write_json(&dir.join(RECORD), &record)?;
                return Err(e);
            }
        };

        let (s, r, c) = volume.dims();
        let mut grid = Array3::<u8>::zeros((s, r, c));
        for (i, m) in run.masks.iter().enumerate() {
            grid.index_axis_mut(Axis(0), i).assign(&m.labels);
        }
        volume_io::write_label_grid(&grid, volume.spacing_mm(), id, dir.join(LOBES))?;

        let final_dir = dir.join(SALIENCY);
        if final_dir.exists() {
            fs::remove_dir_all(&final_dir).map_err(|e| Error::io(&final_dir, e))?;
        }
        if staging.exists() {
            fs::rename(&staging, &final_dir).map_err(|e| Error::io(&final_dir, e))?;
        }
        let mut report = run.report;
        for s in &mut report.saliency {
            s.path = format!("scans/{id}/{SALIENCY}/{}", crate::pipeline::saliency_file_name(s.slice_index));
        }
        report.revision = record.revision + 1;
        write_json(&dir.join(REPORT), &report)?;
        record.revision = report.revision;
        record.status = ScanStatus::Processed;
        record.error = None;
        record.failed_stage = None;
        write_json(&dir.join(RECORD), &record)?;
        Ok(report)
    }

    /// Every saliency reference of the stored report resolves to a file.
    pub fn check_integrity(&self, id: &str) -> Result<()> {
        let Some(report) = self.report(id)? else {
            return Ok(());
        };
        report.check_invariants()?;
        for s in &report.saliency {
            let p = self.root.join(&s.path);
            if !p.is_file() {
                return Err(Error::NotFound(format!("saliency artifact {}", p.display())));
            }
        }
        Ok(())
    }

    fn slice_of(&self, id: &str, n: usize) -> Result<(CTVolume, usize)> {
        let volume = self.volume(id)?;
        if n >= volume.num_slices() {
            return Err(Error::NotFound(format!("slice {n} of scan {id}")));
        }
        Ok((volume, n))
    }

    /// Windowed grayscale PNG of one slice.
    pub fn slice_png(&self, id: &str, n: usize, window: &WindowSpec) -> Result<Vec<u8>> {
        let (volume, n) = self.slice_of(id, n)?;
        let windowed = apply_window(&volume, window)?.index_axis(Axis(0), n).to_owned();
        explainer::encode_png(&explainer::grayscale(&windowed))
    }

    /// Stored saliency overlay; not found for slices that were not flagged.
    pub fn saliency_png(&self, id: &str, n: usize) -> Result<Vec<u8>> {
        self.slice_of(id, n)?;
        let report = self
            .report(id)?
            .ok_or_else(|| Error::NotFound(format!("report for scan {id}")))?;
        let entry = report
            .saliency
            .iter()
            .find(|s| s.slice_index == n)
            .ok_or_else(|| Error::NotFound(format!("saliency for slice {n} of scan {id}")))?;
        let p = self.root.join(&entry.path);
        fs::read(&p).map_err(|e| Error::io(&p, e))
    }

    /// Appends a record; ids strictly increase and stored records are never rewritten.
    pub fn record_feedback(&self, input: &FeedbackInput) -> Result<FeedbackRecord> {
        input.validate()?;
        let record = self.record(&input.scan_id)?;
        if let Some(n) = input.slice_index {
            if n >= record.dims[0] {
                return Err(Error::NotFound(format!("slice {n} of scan {}", input.scan_id)));
            }
        }
        let _guard = lock(&self.feedback_lock);
        let id = self.feedback_ids()?.last().map_or(1, |l| l + 1);
        let stored = FeedbackRecord {
            id,
            scan_id: input.scan_id.clone(),
            scope: input.scope,
            slice_index: input.slice_index,
            corrected_label: input.corrected_label.clone(),
            author_role: input.author_role.clone(),
            timestamp: Utc::now(),
            consumed: false,
        };
        let path = self.root.join("feedback").join(format!("{id:08}.json"));
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&stored)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(stored)
    }

    fn feedback_ids(&self) -> Result<Vec<u64>> {
        let dir = self.root.join("feedback");
        let mut ids: Vec<u64> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_suffix(".json")?.parse().ok()
            })
            .collect();
        ids.sort_unstable();
        Ok(ids)
    }

    /// Feedback in id order, optionally for one scan and only unconsumed records.
    pub fn feedback(&self, scan_id: Option<&str>, unconsumed_only: bool) -> Result<Vec<FeedbackRecord>> {
        let mut out = Vec::new();
        for id in self.feedback_ids()? {
            let mut r: FeedbackRecord = read_json(&self.root.join("feedback").join(format!("{id:08}.json")))?;
            r.consumed = self.root.join("consumed").join(format!("{id:08}")).exists();
            if scan_id.is_some_and(|s| s != r.scan_id) || (unconsumed_only && r.consumed) {
                continue;
            }
            out.push(r);
        }
        Ok(out)
    }

    pub fn mark_consumed(&self, ids: &[u64]) -> Result<()> {
        let known = self.feedback_ids()?;
        for id in ids {
            if !known.contains(id) {
                return Err(Error::NotFound(format!("feedback {id}")));
            }
            let p = self.root.join("consumed").join(format!("{id:08}"));
            fs::write(&p, b"").map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// Detector samples implied by feedback records. Slice records label their
    /// slice. A scan corrected to negative labels every slice negative; a scan
    /// corrected to positive labels the `ceil(t * n)` highest-scoring slices of
    /// its report positive, the least that makes the vote positive.
    pub fn feedback_samples(
        &self,
        records: &[FeedbackRecord],
        prepare: &dyn Fn(&ndarray::Array2<f32>, &ndarray::Array2<bool>) -> Result<ndarray::Array2<f32>>,
        window: &WindowSpec,
    ) -> Result<Vec<ClassSample>> {
        let mut out = Vec::new();
        for r in records {
            let label = CorrectedLabel::parse(r.scope, &r.corrected_label)?;
            let volume = self.volume(&r.scan_id)?;
            let masks = self
                .masks(&r.scan_id)?
                .ok_or_else(|| Error::NotFound(format!("lobe masks of scan {} (process it first)", r.scan_id)))?;
            let windowed = apply_window(&volume, window)?;
            let n = volume.num_slices();
            let labelled: Vec<(usize, bool)> = match (r.scope, r.slice_index) {
                (FeedbackScope::Slice, Some(i)) if i < n => vec![(i, label.is_positive())],
                (FeedbackScope::Slice, _) => {
                    return Err(Error::NotFound(format!("slice {:?} of scan {}", r.slice_index, r.scan_id)))
                }
                (FeedbackScope::Scan, _) if !label.is_positive() => (0..n).map(|i| (i, false)).collect(),
                (FeedbackScope::Scan, _) => {
                    let report = self
                        .report(&r.scan_id)?
                        .ok_or_else(|| Error::NotFound(format!("report for scan {}", r.scan_id)))?;
                    let k = ((report.verdict.threshold * n as f64).ceil() as usize).clamp(1, n);
                    let mut order: Vec<_> = report.verdict.per_slice.iter().collect();
                    order.sort_by(|a, b| b.p_positive.total_cmp(&a.p_positive).then(a.slice_index.cmp(&b.slice_index)));
                    order[..k].iter().map(|d| (d.slice_index, true)).collect()
                }
            };
            for (i, positive) in labelled {
                let slice = windowed.index_axis(Axis(0), i).to_owned();
                out.push(ClassSample {
                    image: prepare(&slice, &masks[i].lung())?,
                    label: usize::from(positive),
                    weight: 1.0,
                    scan_id: r.scan_id.clone(),
                    slice_index: i,
                });
            }
        }
        Ok(out)
    }
}
