use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

use lungscope::pipeline::{ModelSet, PipelineConfig};
use lungscope::store::{FeedbackInput, FeedbackScope, FileStore};
use lungscope::volume_io::load_volume;

fn lungscope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lungscope"))
        .args(args)
        .env_remove("LUNGSCOPE_STORE")
        .output()
        .unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let out = lungscope(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_subcommand_prints_usage() {
    let out = lungscope(&["frobnicate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = lungscope(&["detect", "--volume", "/nonexistent.json", "--models", "/nonexistent"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn serve_answers_health() {
    let dir = tempfile::tempdir().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_lungscope"))
        .args(["serve", "--store", s(dir.path()), "--port", "0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").expect(&line).to_string();
    let mut conn = TcpStream::connect(&addr).unwrap();
    write!(conn, "GET /api/health HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut resp = String::new();
    conn.read_to_string(&mut resp).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    let body: Value = serde_json::from_str(resp.split("\r\n\r\n").nth(1).unwrap()).unwrap();
    assert_eq!(body["models_loaded"], false);
}

#[test]
fn train_infer_evaluate_and_finetune() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("phantoms");
    let models = dir.path().join("models");

    let v = ok_json(&["phantom", "--out", s(&data), "--scans", "6", "--seed", "3"]);
    assert_eq!((v["scans"].as_u64(), v["positive"].as_u64()), (Some(6), Some(3)));

    let v = ok_json(&[
        "train",
        "--manifest",
        s(&data),
        "--out",
        s(&models),
        "--epochs",
        "1",
        "--split-ratios",
        "0.5,0.17,0.33",
    ]);
    for task in ["segmentation", "detection", "categorization"] {
        assert!(v[task]["final_train_loss"].as_f64().unwrap().is_finite(), "{v}");
        assert!(models.join(format!("history_{task}.csv")).is_file());
    }
    for f in ["seg.safetensors", "det.safetensors", "cat.safetensors", "split.json", "recipe.json"] {
        assert!(models.join(f).is_file(), "{f}");
    }

    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    let entry = &manifest["entries"][0];
    let volume = data.join(entry["volume"].as_str().unwrap());
    let vol = s(&volume);
    let m = s(&models);

    let lobes = dir.path().join("lobes.json");
    let v = ok_json(&["segment", "--volume", vol, "--models", m, "--out", s(&lobes)]);
    assert_eq!(v["slices"], 16);
    assert_eq!(v["lobe_voxels"].as_array().unwrap().len(), 5);
    assert!(lobes.is_file());

    let v = ok_json(&["detect", "--volume", vol, "--models", m, "--threshold", "0.2"]);
    assert_eq!(v["per_slice"].as_array().unwrap().len(), 16);
    assert_eq!(v["threshold"], 0.2);
    assert!(["positive", "negative"].contains(&v["decision"].as_str().unwrap()));
    let bad = lungscope(&["detect", "--volume", vol, "--models", m, "--threshold", "1.5"]);
    assert!(!bad.status.success());

    let v = ok_json(&["categorize", "--volume", vol, "--models", m, "--slice", "7", "--slice", "8"]);
    for f in v.as_array().unwrap() {
        assert!([7, 8].contains(&f["slice_index"].as_u64().unwrap()));
        assert!((1..=5).contains(&f["lobe_index"].as_u64().unwrap()));
    }

    let png = dir.path().join("explain.png");
    let v = ok_json(&["explain", "--volume", vol, "--models", m, "--slice", "8", "--out", s(&png), "--samples", "2"]);
    assert_eq!(v["slice_index"], 8);
    assert!(png.is_file());

    let v = ok_json(&[
        "eval",
        "--manifest",
        s(&data),
        "--models",
        m,
        "--split",
        s(&models.join("split.json")),
        "--role",
        "test",
        "--sweep",
        "0.05,0.2",
        "--method",
        "wilson",
    ]);
    assert_eq!(v["role"], "test");
    assert_eq!(v["threshold"], 0.1);
    assert_eq!(v["detection"]["accuracy"]["method"], "wilson");
    assert_eq!(v["segmentation"]["per_lobe"].as_array().unwrap().len(), 5);
    assert_eq!(v["threshold_sweep"].as_array().unwrap().len(), 3);
    assert!(v["crop_accuracy"]["value"].is_number());

    // feedback gathered through the store fine-tunes the detector
    let store_dir = dir.path().join("store");
    let store = FileStore::open(&store_dir).unwrap();
    let set = ModelSet::load(&models).unwrap();
    let id = store.submit(&load_volume(&volume).unwrap()).unwrap().scan_id;
    let config = PipelineConfig {
        explain: None,
        ..PipelineConfig::default()
    };
    store.process(&id, &set.models(), &config).unwrap();
    for (scope, slice, label) in [
        (FeedbackScope::Slice, Some(3), "negative"),
        (FeedbackScope::Slice, Some(8), "consolidation"),
        (FeedbackScope::Scan, None, "positive"),
    ] {
        store
            .record_feedback(&FeedbackInput {
                scan_id: id.clone(),
                scope,
                slice_index: slice,
                corrected_label: label.into(),
                author_role: "radiologist".into(),
            })
            .unwrap();
    }
    let before = set.detector.version;
    let v = ok_json(&["train", "--from-feedback", "--models", m, "--store", s(&store_dir)]);
    assert_eq!(v["consumed"].as_array().unwrap().len(), 3);
    assert_eq!(v["detector_version"].as_u64(), Some(u64::from(before) + 1));
    assert!(store.feedback(None, true).unwrap().is_empty());
    assert_eq!(ModelSet::load(&models).unwrap().detector.version, before + 1);
    let again = lungscope(&["train", "--from-feedback", "--models", m, "--store", s(&store_dir)]);
    assert!(!again.status.success());
}
