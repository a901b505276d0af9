//! Memorization checks: tiny models driven to fit small phantom training sets.

use lungscope::clf_model::{build_categorizer, build_detector};
use lungscope::dataset::{self, load_scans, LabelledScan};
use lungscope::experiment::Recipe;
use lungscope::labels::LesionCategory;
use lungscope::metrics::LobeDice;
use lungscope::phantom::{emit_phantom_dataset, DatasetSpec};
use lungscope::seg_model::{segment_volume, SegModel};
use lungscope::trainer::{classifier_accuracy, train_classifier, train_segmenter};
use lungscope::volume_io::WindowSpec;

use candle_core::DType;

fn phantoms(n: usize, mix: f64, seed: u64) -> Vec<LabelledScan> {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        dims: [16, 48, 48],
        radius_range: (2, 4),
        ..DatasetSpec::new(n, mix, seed)
    };
    let manifest = emit_phantom_dataset(dir.path(), &spec).unwrap();
    let ids: Vec<&str> = manifest.entries.iter().map(|e| e.scan_id.as_str()).collect();
    load_scans(&manifest, &ids, &WindowSpec::default()).unwrap()
}

fn recipe() -> Recipe {
    let mut r = Recipe::tiny(0);
    r.detector.input_size = 32;
    for t in [&mut r.seg_train, &mut r.det_train, &mut r.cat_train] {
        t.augmentation = None;
    }
    r
}

#[test]
fn detector_memorizes_fifty_slices() {
    let scans = phantoms(4, 1.0, 21);
    let r = recipe();
    let mut det = build_detector(&r.detector, 0).unwrap();
    det.norm = dataset::lung_norm(&scans).unwrap();
    let mut samples = dataset::detection_samples(&scans, &det).unwrap();
    // keep lesion-bearing and clean slices both represented
    samples.sort_by_key(|s| (s.slice_index % 2, s.scan_id.clone()));
    samples.truncate(50);
    let positives = samples.iter().filter(|s| s.label == 1).count();
    assert!(positives > 5 && positives < 45, "{positives} positives");
    let config = lungscope::trainer::TrainConfig {
        epochs: 200,
        batch_size: 10,
        ..r.det_train
    };
    train_classifier(&det, &samples, &[], &config).unwrap();
    assert_eq!(classifier_accuracy(&det, &samples).unwrap(), 1.0);
}

#[test]
fn categorizer_memorizes_forty_crops() {
    let scans = phantoms(4, 1.0, 22);
    let r = recipe();
    let det = build_detector(&r.detector, 0).unwrap();
    let cat = build_categorizer(&det, &r.categorizer, 1).unwrap();
    let mut crops = dataset::labelled_crops(&scans).unwrap();
    // lesion crops first, then clean ones
    crops.sort_by_key(|(_, l)| *l == LesionCategory::Negative);
    let lesions = crops.iter().filter(|(_, l)| *l != LesionCategory::Negative).count().min(25);
    let mut picked: Vec<_> = crops[..lesions].to_vec();
    picked.extend(crops[lesions..].iter().take(40 - lesions).cloned());
    assert_eq!(picked.len(), 40);
    let samples = dataset::crop_samples(&picked, &cat).unwrap();
    let config = lungscope::trainer::TrainConfig {
        epochs: 150,
        batch_size: 10,
        ..r.cat_train
    };
    train_classifier(&cat, &samples, &[], &config).unwrap();
    assert_eq!(classifier_accuracy(&cat, &samples).unwrap(), 1.0);
}

#[test]
fn segmenter_fits_training_phantoms() {
    let scans = phantoms(2, 0.5, 23);
    let r = recipe();
    let size = r.segmenter.input_size;
    let mut seg = SegModel::new(&r.segmenter, 0, DType::F32).unwrap();
    seg.norm = dataset::slice_norm(&scans, size).unwrap();
    let samples = dataset::seg_samples(&scans, &seg.norm, size);
    let config = lungscope::trainer::TrainConfig {
        epochs: 30,
        ..r.seg_train
    };
    train_segmenter(&seg, &samples, &[], &config).unwrap();
    let mut dice = LobeDice::default();
    for scan in &scans {
        let pred: Vec<_> = segment_volume(&seg, &scan.truth.volume).unwrap().into_iter().map(|m| m.labels).collect();
        let truth: Vec<_> = (0..scan.num_slices()).map(|i| scan.lobe_labels(i)).collect();
        dice.add(&pred, &truth).unwrap();
    }
    let per_lobe = dice.per_lobe();
    assert!(per_lobe.iter().all(|&d| d >= 0.9), "{per_lobe:?}");
}
