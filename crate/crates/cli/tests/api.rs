use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use candle_core::DType;
use serde_json::{json, Value};
use tower::ServiceExt;

use lungscope::clf_model::{build_categorizer, build_detector};
use lungscope::experiment::Recipe;
use lungscope::phantom::{generate_phantom, LesionKind, LesionPlacement, PhantomSpec};
use lungscope::pipeline::{run_pipeline, MemorySink, ModelSet, PipelineConfig};
use lungscope::seg_model::SegModel;
use lungscope::store::{FileStore, PortableVolume};
use lungscope::volume_io::CTVolume;
use lungscope_cli::api::{router, AppState};

/// Untrained tiny models; scores vary slightly from slice to slice.
fn models() -> ModelSet {
    let r = Recipe::tiny(0);
    let detector = build_detector(&r.detector, 0).unwrap();
    ModelSet {
        segmenter: SegModel::new(&r.segmenter, 0, DType::F32).unwrap(),
        categorizer: build_categorizer(&detector, &r.categorizer, 1).unwrap(),
        detector,
    }
}

fn explain_config() -> PipelineConfig {
    PipelineConfig {
        explain: Some(lungscope::explainer::VarGradConfig {
            n_samples: 3,
            ..Default::default()
        }),
        ..PipelineConfig::default()
    }
}

/// Slice threshold at the median lung-slice score, so roughly half the slices are flagged
/// and the scan votes positive.
fn split_config() -> PipelineConfig {
    let run = run_pipeline(&volume(), &models().models(), &PipelineConfig { explain: None, ..PipelineConfig::default() }, &mut MemorySink::default()).unwrap();
    let mut p: Vec<f64> = run.report.verdict.per_slice.iter().map(|d| d.p_positive).filter(|&p| p > 0.0).collect();
    p.sort_by(f64::total_cmp);
    let mid = p.len() / 2;
    assert!(p[mid - 1] < p[mid], "scores do not separate: {p:?}");
    PipelineConfig {
        slice_threshold: (p[mid - 1] + p[mid]) / 2.0,
        ..explain_config()
    }
}

fn volume() -> CTVolume {
    generate_phantom(&PhantomSpec {
        dims: [16, 48, 48],
        lesion_plan: vec![LesionPlacement {
            kind: LesionKind::Consolidation,
            lobe: 4,
            radius: 2,
        }],
        seed: 11,
        noise_std: 10.0,
    })
    .unwrap()
    .volume
}

fn app(dir: &std::path::Path, with_models: bool) -> Router {
    app_with(dir, with_models, explain_config())
}

fn app_with(dir: &std::path::Path, with_models: bool, config: PipelineConfig) -> Router {
    router(AppState {
        store: Arc::new(FileStore::open(dir).unwrap()),
        models: with_models.then(|| Arc::new(models())),
        config,
    })
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Vec<u8>>) -> (StatusCode, Option<String>, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_string());
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec();
    (status, ctype, bytes)
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, _, b) = call(app, method, uri, body.map(|v| serde_json::to_vec(&v).unwrap())).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn submit(app: &Router) -> String {
    let body = serde_json::to_value(PortableVolume::encode(&volume())).unwrap();
    let (s, v) = call_json(app, "POST", "/api/scans", Some(body)).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["status"], "pending");
    v["scan_id"].as_str().unwrap().to_string()
}

fn without_volatile(mut report: Value) -> Value {
    for k in ["revision", "started_at", "finished_at"] {
        report.as_object_mut().unwrap().remove(k);
    }
    report
}

#[tokio::test]
async fn lifecycle_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with(dir.path(), true, split_config());

    let (s, v) = call_json(&app, "GET", "/api/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["models_loaded"], true);

    let (_, v) = call_json(&app, "GET", "/api/scans", None).await;
    assert_eq!(v, json!([]));

    let id = submit(&app).await;
    let (s, v) = call_json(&app, "GET", &format!("/api/scans/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "pending");
    assert!(v["report"].is_null());

    let (s, first) = call_json(&app, "POST", &format!("/api/scans/{id}/process"), None).await;
    assert_eq!(s, StatusCode::OK, "{first}");
    let (_, second) = call_json(&app, "POST", &format!("/api/scans/{id}/process"), None).await;
    assert_eq!((first["revision"].as_u64(), second["revision"].as_u64()), (Some(1), Some(2)));
    assert_eq!(without_volatile(first), without_volatile(second.clone()));

    let (_, v) = call_json(&app, "GET", &format!("/api/scans/{id}"), None).await;
    assert_eq!(v["status"], "processed");
    assert_eq!(v["revision"], 2);
    assert_eq!(v["report"], second);
    let per_slice = second["verdict"]["per_slice"].as_array().unwrap();
    assert_eq!(per_slice.len(), 16);
    assert_eq!(second["verdict"]["decision"], "positive");

    let (_, list) = call_json(&app, "GET", "/api/scans", None).await;
    assert_eq!(list[0]["scan_id"], id.as_str());
    assert_eq!(list[0]["verdict"], "positive");

    let flagged = per_slice.iter().find(|d| d["positive"] == true).unwrap()["slice_index"].as_u64().unwrap();
    let unflagged = per_slice.iter().find(|d| d["positive"] == false).unwrap()["slice_index"].as_u64().unwrap();
    // every saliency reference resolves to a stored file
    for s in second["saliency"].as_array().unwrap() {
        assert!(dir.path().join(s["path"].as_str().unwrap()).is_file());
    }

    let (s, ctype, png) = call(&app, "GET", &format!("/api/scans/{id}/slices/{flagged}/image.png"), None).await;
    assert_eq!((s, ctype.as_deref()), (StatusCode::OK, Some("image/png")));
    assert_eq!(&png[1..4], b"PNG");
    let (s, _, _) = call(&app, "GET", &format!("/api/scans/{id}/slices/0/image.png?width=1000&level=-500"), None).await;
    assert_eq!(s, StatusCode::OK);
    let (s, ctype, _) = call(&app, "GET", &format!("/api/scans/{id}/slices/{flagged}/saliency.png"), None).await;
    assert_eq!((s, ctype.as_deref()), (StatusCode::OK, Some("image/png")));
    let (s, v) = call_json(&app, "GET", &format!("/api/scans/{id}/slices/{unflagged}/saliency.png"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(v["error"].is_string());
    let (s, _) = call_json(&app, "GET", &format!("/api/scans/{id}/slices/99/image.png"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, v) = call_json(&app, "GET", &format!("/api/scans/{id}/slices/x/image.png"), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"].is_string());
}

#[tokio::test]
async fn errors_use_uniform_body() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), false);
    for (method, uri) in [
        ("GET", "/api/scans/scan-000042"),
        ("POST", "/api/scans/scan-000042/process"),
        ("GET", "/api/scans/scan-000042/slices/0/image.png"),
        ("GET", "/api/nothing"),
    ] {
        let (s, v) = call_json(&app, method, uri, None).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{method} {uri}");
        assert!(v["error"].is_string() && v.get("stage").is_none(), "{v}");
    }
    let (s, v) = call(&app, "POST", "/api/scans", Some(b"not json".to_vec())).await.into_json();
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"].is_string());
    let mut bad = serde_json::to_value(PortableVolume::encode(&volume())).unwrap();
    bad["header"]["dims"][0] = json!(17);
    let (s, _) = call_json(&app, "POST", "/api/scans", Some(bad)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let id = submit(&app).await;
    let (s, v) = call_json(&app, "POST", &format!("/api/scans/{id}/process"), None).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert!(v["error"].is_string());
}

trait IntoJson {
    fn into_json(self) -> (StatusCode, Value);
}

impl IntoJson for (StatusCode, Option<String>, Vec<u8>) {
    fn into_json(self) -> (StatusCode, Value) {
        (self.0, serde_json::from_slice(&self.2).unwrap_or(Value::Null))
    }
}

#[tokio::test]
async fn feedback_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), false);
    let id = submit(&app).await;

    let (s, a) = call_json(
        &app,
        "POST",
        &format!("/api/scans/{id}/feedback"),
        Some(json!({"corrected_label": "negative", "author_role": "radiologist"})),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED, "{a}");
    assert_eq!((a["scope"].as_str(), a["consumed"].as_bool()), (Some("scan"), Some(false)));

    let (s, b) = call_json(
        &app,
        "POST",
        &format!("/api/scans/{id}/slices/3/feedback"),
        Some(json!({"scope": "slice", "corrected_label": "negative", "slice_index": 3})),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED, "{b}");
    assert_eq!(b["slice_index"], 3);
    assert!(b["id"].as_u64() > a["id"].as_u64());

    // duplicates are appended, not merged
    let (_, c) = call_json(&app, "POST", &format!("/api/scans/{id}/feedback"), Some(json!({"corrected_label": "negative"}))).await;
    assert!(c["id"].as_u64() > b["id"].as_u64());

    let (_, v) = call_json(&app, "GET", &format!("/api/scans/{id}"), None).await;
    let listed = v["feedback"].as_array().unwrap();
    assert_eq!(listed.len(), 3);
    assert_eq!(listed[0], a);
    let (_, list) = call_json(&app, "GET", &format!("/api/scans/{id}/feedback"), None).await;
    assert_eq!(list.as_array().unwrap().len(), 3);

    for (uri, body, status) in [
        (format!("/api/scans/{id}/slices/3/feedback"), json!({"corrected_label": "negative", "slice_index": 4}), StatusCode::UNPROCESSABLE_ENTITY),
        (format!("/api/scans/{id}/feedback"), json!({"corrected_label": "negative", "scope": "slice"}), StatusCode::UNPROCESSABLE_ENTITY),
        (format!("/api/scans/{id}/feedback"), json!({"corrected_label": "ground_glass"}), StatusCode::UNPROCESSABLE_ENTITY),
        (format!("/api/scans/{id}/feedback"), json!({"label": "negative"}), StatusCode::BAD_REQUEST),
        (format!("/api/scans/{id}/slices/99/feedback"), json!({"corrected_label": "negative"}), StatusCode::NOT_FOUND),
        ("/api/scans/scan-999999/feedback".to_string(), json!({"corrected_label": "negative"}), StatusCode::NOT_FOUND),
    ] {
        let (s, v) = call_json(&app, "POST", &uri, Some(body.clone())).await;
        assert_eq!(s, status, "{uri} {body} -> {v}");
        assert!(v["error"].is_string());
    }
    let (_, list) = call_json(&app, "GET", &format!("/api/scans/{id}/feedback"), None).await;
    assert_eq!(list.as_array().unwrap().len(), 3);
}
