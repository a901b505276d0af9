//! Training recipes for the three models and labelled evaluation of a model set.

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::clf_model::{build_categorizer, build_detector, BackboneConfig, Classifier, DenseCustomConfig, Family};
use crate::dataset::{self, LabelledScan};
use crate::error::{Error, Result};
use crate::labels::{LesionCategory, Verdict};
use crate::metrics::{self, ConfusionTally, DetectionReport, IntervalMethod, LobeDice, RateReport};
use crate::pipeline::{run_pipeline, vote_flags, MemorySink, ModelSet, PipelineConfig};
use crate::seg_model::{segment_volume, SegConfig, SegModel};
use crate::trainer::{self, History, OptimizerConfig, Task, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub segmenter: SegConfig,
    pub detector: BackboneConfig,
    pub categorizer: BackboneConfig,
    pub seg_train: TrainConfig,
    pub det_train: TrainConfig,
    pub cat_train: TrainConfig,
    pub seed: u64,
}

impl Recipe {
    /// Full-size architectures with the reference hyperparameters.
    pub fn reference(seed: u64) -> Self {
        Self {
            segmenter: SegConfig {
                use_res_se: true,
                use_clstm: true,
                ..SegConfig::default()
            },
            detector: BackboneConfig::detector(),
            categorizer: BackboneConfig::new(Family::Dense201, 4),
            seg_train: TrainConfig::for_task(Task::Segmentation),
            det_train: TrainConfig::for_task(Task::Detection),
            cat_train: TrainConfig::for_task(Task::Categorization),
            seed,
        }
    }

    /// Small models that train on phantoms in minutes on one CPU core.
    pub fn tiny(seed: u64) -> Self {
        let backbone = |head| BackboneConfig {
            input_size: 32,
            custom: DenseCustomConfig {
                growth_rate: 8,
                block_layers: vec![2, 2, 2],
                init_features: 16,
                bn_size: 2,
            },
            ..BackboneConfig::new(Family::DenseCustom, head)
        };
        let fast = |task| TrainConfig {
            learning_rate: 2e-3,
            optimizer: OptimizerConfig::adam(),
            seed,
            ..TrainConfig::for_task(task)
        };
        Self {
            segmenter: SegConfig {
                use_res_se: true,
                use_clstm: true,
                growth_rate: 4,
                layers_per_dense_block: vec![2; 5],
                bottleneck_layers: 2,
                initial_features: 12,
                input_size: 32,
                ..SegConfig::default()
            },
            detector: BackboneConfig {
                input_size: 48,
                ..backbone(2)
            },
            categorizer: backbone(4),
            seg_train: TrainConfig {
                batch_size: 4,
                epochs: 8,
                ..fast(Task::Segmentation)
            },
            det_train: TrainConfig {
                batch_size: 12,
                epochs: 20,
                ..fast(Task::Detection)
            },
            cat_train: TrainConfig {
                batch_size: 12,
                epochs: 20,
                ..fast(Task::Categorization)
            },
            seed,
        }
    }
}

fn need(scans: &[LabelledScan], what: &str) -> Result<()> {
    if scans.is_empty() {
        return Err(Error::invalid(format!("{what} split is empty")));
    }
    Ok(())
}

pub fn fit_segmenter(recipe: &Recipe, train: &[LabelledScan], val: &[LabelledScan]) -> Result<(SegModel, History)> {
    need(train, "training")?;
    let size = recipe.segmenter.input_size;
    let mut model = SegModel::new(&recipe.segmenter, recipe.seed, DType::F32)?;
    model.norm = dataset::slice_norm(train, size)?;
    let tr = dataset::seg_samples(train, &model.norm, size);
    let va = dataset::seg_samples(val, &model.norm, size);
    let history = trainer::train_segmenter(&model, &tr, &va, &recipe.seg_train)?;
    Ok((model, history))
}

/// Trains the slice detector. With a segmenter, inputs are masked by its predicted lungs,
/// matching what the detector sees at inference; otherwise ground-truth lungs are used.
pub fn fit_detector(
    recipe: &Recipe,
    segmenter: Option<&SegModel>,
    train: &[LabelledScan],
    val: &[LabelledScan],
) -> Result<(Classifier, History)> {
    need(train, "training")?;
    let mut model = build_detector(&recipe.detector, recipe.seed)?;
    model.norm = dataset::lung_norm(train)?;
    let samples = |scans: &[LabelledScan]| match segmenter {
        Some(seg) => {
            let lungs = scans
                .iter()
                .map(|s| Ok(segment_volume(seg, &s.truth.volume)?.iter().map(|m| m.lung()).collect()))
                .collect::<Result<Vec<Vec<_>>>>()?;
            dataset::detection_samples_with(scans, &lungs, &model)
        }
        None => dataset::detection_samples(scans, &model),
    };
    let tr = samples(train)?;
    let va = samples(val)?;
    let history = trainer::train_classifier(&model, &tr, &va, &recipe.det_train)?;
    Ok((model, history))
}

pub fn fit_categorizer(
    recipe: &Recipe,
    detector: &Classifier,
    train: &[LabelledScan],
    val: &[LabelledScan],
) -> Result<(Classifier, History)> {
    let model = build_categorizer(detector, &recipe.categorizer, recipe.seed.wrapping_add(1))?;
    let tr = dataset::crop_samples(&dataset::labelled_crops(train)?, &model)?;
    if tr.is_empty() {
        return Err(Error::invalid("training split holds no lesion-bearing slices"));
    }
    let va = dataset::crop_samples(&dataset::labelled_crops(val)?, &model)?;
    let history = trainer::train_classifier(&model, &tr, &va, &recipe.cat_train)?;
    Ok((model, history))
}

/// Trains segmenter, detector and categorizer in order.
pub fn fit_all(recipe: &Recipe, train: &[LabelledScan], val: &[LabelledScan]) -> Result<(ModelSet, [History; 3])> {
    let (segmenter, hs) = fit_segmenter(recipe, train, val)?;
    let (detector, hd) = fit_detector(recipe, Some(&segmenter), train, val)?;
    let (categorizer, hc) = fit_categorizer(recipe, &detector, train, val)?;
    Ok((
        ModelSet {
            segmenter,
            detector,
            categorizer,
        },
        [hs, hd, hc],
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanOutcome {
    pub scan_id: String,
    pub truth: Verdict,
    pub predicted: Verdict,
    pub positive_fraction: f64,
    pub lesion_findings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScore {
    pub per_lobe: [f64; 5],
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Scan-level verdicts against scan labels.
    pub detection: DetectionReport,
    /// Per-slice flags against slice labels.
    pub slices: DetectionReport,
    /// Categorizer on ground-truth lobe crops of lesion-bearing slices.
    pub crop_accuracy: RateReport,
    pub categories: serde_json::Value,
    pub segmentation: SegmentationScore,
    pub scans: Vec<ScanOutcome>,
    pub threshold_sweep: Vec<SweepPoint>,
}

fn ratio(k: usize, n: usize) -> Option<f64> {
    (n > 0).then(|| k as f64 / n as f64)
}

/// Runs the pipeline (without saliency) on labelled scans and scores every stage.
pub fn evaluate(
    models: &ModelSet,
    scans: &[LabelledScan],
    config: &PipelineConfig,
    level: f64,
    method: IntervalMethod,
    sweep: &[f64],
) -> Result<Evaluation> {
    need(scans, "evaluation")?;
    let config = PipelineConfig {
        explain: None,
        ..config.clone()
    };
    let mut scan_tally = ConfusionTally::default();
    let mut slice_tally = ConfusionTally::default();
    let mut dice = LobeDice::default();
    let mut outcomes = Vec::new();
    let mut flags = Vec::new();
    for scan in scans {
        let run = run_pipeline(&scan.truth.volume, &models.models(), &config, &mut MemorySink::default())?;
        let v = &run.report.verdict;
        let truth = Verdict::from_flag(scan.is_positive());
        scan_tally.record(v.decision.is_positive(), truth.is_positive());
        for d in &v.per_slice {
            slice_tally.record(d.positive, scan.slice_positive(d.slice_index));
        }
        let preds: Vec<_> = run.masks.into_iter().map(|m| m.labels).collect();
        let truths: Vec<_> = (0..scan.num_slices()).map(|i| scan.lobe_labels(i)).collect();
        dice.add(&preds, &truths)?;
        flags.push((v.per_slice.iter().map(|d| d.positive).collect::<Vec<_>>(), truth));
        outcomes.push(ScanOutcome {
            scan_id: scan.scan_id.clone(),
            truth,
            predicted: v.decision,
            positive_fraction: v.positive_fraction,
            lesion_findings: run.report.lesions().count(),
        });
    }

    let threshold_sweep = sweep
        .iter()
        .map(|&t| {
            let mut tally = ConfusionTally::default();
            for (f, truth) in &flags {
                tally.record(vote_flags(f, t)?.0.is_positive(), truth.is_positive());
            }
            Ok(SweepPoint {
                threshold: t,
                accuracy: (tally.tp + tally.tn) as f64 / tally.total() as f64,
                sensitivity: ratio(tally.tp, tally.tp + tally.fn_),
                specificity: ratio(tally.tn, tally.tn + tally.fp),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let crops = dataset::labelled_crops(scans)?;
    let mut predicted = Vec::with_capacity(crops.len());
    for (crop, _) in &crops {
        predicted.push(crate::clf_model::categorize_crop(&models.categorizer, crop)?.label);
    }
    let truths: Vec<LesionCategory> = crops.iter().map(|(_, l)| *l).collect();
    let correct = predicted.iter().zip(&truths).filter(|(p, t)| p == t).count();
    let categories = metrics::per_category_accuracy(&predicted, &truths)?;
    let crop_accuracy = metrics::detection_report(
        &ConfusionTally {
            tp: correct,
            fn_: truths.len() - correct,
            ..ConfusionTally::default()
        },
        level,
        method,
    )?
    .sensitivity;

    Ok(Evaluation {
        detection: metrics::detection_report(&scan_tally, level, method)?,
        slices: metrics::detection_report(&slice_tally, level, method)?,
        crop_accuracy,
        categories: categories.table(),
        segmentation: SegmentationScore {
            per_lobe: dice.per_lobe(),
            mean: dice.mean(),
        },
        scans: outcomes,
        threshold_sweep,
    })
}
