mod common;

use std::sync::Arc;

use axum::http::{Method, StatusCode};
use common::{assert_schema, fixture, get, post, send};
use cxr_core::dataset::Label;
use cxr_core::experiments::MaskSource;
use cxr_core::imaging::decode_raw_image;
use cxr_core::model::TrainedModel;
use cxr_core::pipeline::{Pipeline, PipelineConfig};
use cxr_core::retrieval::{euclidean, read_projection, Split};
use cxr_service::{AppState, Registry};
use serde_json::Value;

#[tokio::test]
async fn without_registry_classify_is_unavailable() {
    let dir = tempfile::tempdir().unwrap();
    let st = Arc::new(AppState::open(dir.path().join("registry.json")).unwrap());
    let app = cxr_service::router(st);
    let (s, health) = get(&app, "/health").await;
    assert_eq!(s, StatusCode::OK);
    assert_schema("health_response", &health);
    assert_eq!(health["model_id"], Value::Null);
    let (s, err) = post(&app, "/classify", vec![1, 2, 3]).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_schema("error", &err);
    assert_eq!(get(&app, "/scans/x/similar").await.0, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn classify_matches_library_inference_and_is_repeatable() {
    let fx = fixture(false);
    let (_, app) = fx.app();
    let bytes = fx.image_bytes(3);

    let (s1, a) = post(&app, "/classify", bytes.clone()).await;
    let (s2, b) = post(&app, "/classify", bytes.clone()).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_schema("classify_response", &a);
    assert_eq!(a["score"], b["score"]);
    assert_ne!(a["scan_id"], b["scan_id"]);
    assert_eq!(a["model_id"], "model-a");

    let score = a["score"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&score));
    let expected = if score >= 0.5 { "positive" } else { "negative" };
    assert_eq!(a["label"], expected);

    let model = TrainedModel::load(&fx.dir.path().join("model_a.cxrw")).unwrap();
    let pipeline = Pipeline::new(PipelineConfig::default(), MaskSource::Constant { value: 0.5 }.build().unwrap()).unwrap();
    let direct = model.infer(&pipeline.raw_to_input(&decode_raw_image(&bytes).unwrap()).unwrap()).unwrap();
    assert_eq!(score.to_bits(), direct.score.score.to_bits());
}

#[tokio::test]
async fn undecodable_uploads_are_rejected() {
    let fx = fixture(false);
    let (_, app) = fx.app();
    let png = fx.image_bytes(0);
    for body in [png[..png.len() / 3].to_vec(), b"definitely not pixels".to_vec(), Vec::new()] {
        let (s, err) = post(&app, "/classify", body).await;
        assert_eq!(s, StatusCode::BAD_REQUEST);
        assert_schema("error", &err);
        assert_eq!(err["error"], "undecodable_image");
        assert!(!err["message"].as_str().unwrap().is_empty());
    }
    let (_, health) = get(&app, "/health").await;
    assert_eq!(health["uploads"], 0);
}

/// Brute-force neighbours over the train entries, skipping `exclude`.
fn oracle(fx: &common::Fixture, query: &[f64], k: usize, exclude: Option<&str>) -> Vec<(String, f64)> {
    let mut all: Vec<(f64, String)> = fx
        .entries
        .iter()
        .filter(|e| e.split == Split::Train && Some(e.scan_id.as_str()) != exclude)
        .map(|e| (euclidean(&e.vector, query), e.scan_id.clone()))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(d, id)| (id, d)).collect()
}

fn neighbours(v: &Value) -> Vec<(String, f64)> {
    v["neighbors"]
        .as_array()
        .unwrap()
        .iter()
        .map(|n| (n["scan_id"].as_str().unwrap().to_string(), n["distance"].as_f64().unwrap()))
        .collect()
}

#[tokio::test]
async fn similar_is_exact_and_excludes_the_query() {
    let fx = fixture(false);
    let (_, app) = fx.app();
    let train = fx.entries.iter().find(|e| e.split == Split::Train).unwrap();
    let id = &train.scan_id;

    let (s, v) = get(&app, &format!("/scans/{id}/similar")).await;
    assert_eq!(s, StatusCode::OK);
    assert_schema("similar_response", &v);
    assert_eq!(v["k"], 4);
    assert_eq!(neighbours(&v), oracle(&fx, &train.vector, 4, Some(id)));
    assert_eq!(v["neighbors"][0]["image_url"], format!("/scans/{}/image", v["neighbors"][0]["scan_id"].as_str().unwrap()));

    let (_, one) = get(&app, &format!("/scans/{id}/similar?k=1")).await;
    let got = neighbours(&one);
    assert_eq!(got.len(), 1);
    assert_ne!(&got[0].0, id);

    let (s, all) = get(&app, &format!("/scans/{id}/similar?k=1000")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(neighbours(&all).len(), 11);
    let d: Vec<f64> = neighbours(&all).iter().map(|n| n.1).collect();
    assert!(d.windows(2).all(|w| w[0] <= w[1]));

    // Held-out scans query the train index as-is.
    let test = fx.entries.iter().find(|e| e.split == Split::Test).unwrap();
    let (_, tv) = get(&app, &format!("/scans/{}/similar?k=12", test.scan_id)).await;
    assert_eq!(neighbours(&tv), oracle(&fx, &test.vector, 12, None));

    for bad in ["0", "-2", "abc", "1.5"] {
        let (s, err) = get(&app, &format!("/scans/{id}/similar?k={bad}")).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "k={bad}");
        assert_schema("error", &err);
    }
    let (s, err) = get(&app, "/scans/nobody/similar").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_schema("error", &err);
}

#[tokio::test]
async fn uploads_are_queryable_but_not_indexed() {
    let fx = fixture(false);
    let (_, app) = fx.app();
    let (_, c) = post(&app, "/classify", fx.image_bytes(13)).await;
    let id = c["scan_id"].as_str().unwrap();
    let (s, v) = get(&app, &format!("/scans/{id}/similar")).await;
    assert_eq!(s, StatusCode::OK);
    // Scan 13 is held out, so its upload embedding equals the stored one.
    let stored = fx.entries.iter().find(|e| e.scan_id == fx.manifest.records[13].scan_id).unwrap();
    assert_eq!(neighbours(&v), oracle(&fx, &stored.vector, 4, None));

    // A train image uploaded again finds its indexed twin at distance 0.
    let (_, c0) = post(&app, "/classify", fx.image_bytes(0)).await;
    let (_, v0) = get(&app, &format!("/scans/{}/similar?k=1", c0["scan_id"].as_str().unwrap())).await;
    assert_eq!(v0["neighbors"][0]["scan_id"], fx.manifest.records[0].scan_id.as_str());
    assert_eq!(v0["neighbors"][0]["distance"], 0.0);

    let (_, health) = get(&app, "/health").await;
    assert_eq!(health["index_size"], 12);
    assert_eq!(health["uploads"], 2);
}

#[tokio::test]
async fn projection_round_trips_the_file() {
    let fx = fixture(true);
    let (_, app) = fx.app();
    let (s, v) = get(&app, "/projection").await;
    assert_eq!(s, StatusCode::OK);
    assert_schema("projection", &v);
    let file = read_projection(&fx.dir.path().join("projection.json")).unwrap();
    let served: Vec<cxr_core::retrieval::ProjectedPoint> = serde_json::from_value(v).unwrap();
    assert_eq!(served.len(), 16);
    for (a, b) in served.iter().zip(&file) {
        assert_eq!(a.scan_id, b.scan_id);
        assert_eq!(a.xy.map(f64::to_bits), b.xy.map(f64::to_bits));
    }

    let bare = fixture(false);
    let (_, app) = bare.app();
    let (s, err) = get(&app, "/projection").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(err["message"], "no projection computed");
}

fn png_size(bytes: &[u8]) -> (u32, u32) {
    assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");
    let be = |o: usize| u32::from_be_bytes(bytes[o..o + 4].try_into().unwrap());
    (be(16), be(20))
}

#[tokio::test]
async fn scan_metadata_and_images() {
    let fx = fixture(false);
    let (_, app) = fx.app();
    let rec = &fx.manifest.records[2];
    let (s, v) = get(&app, &format!("/scans/{}", rec.scan_id)).await;
    assert_eq!(s, StatusCode::OK);
    assert_schema("scan_response", &v);
    assert_eq!(v["source"], "train");
    assert_eq!(v["metadata"]["patient_id"], rec.patient_id.as_str());
    assert_eq!(v["label"], rec.label.as_str());

    let (s, png) = send(&app, Method::GET, v["image_url"].as_str().unwrap(), Vec::new()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(png_size(&png), (1024, 1024));

    let (_, c) = post(&app, "/classify", fx.image_bytes(5)).await;
    let up = c["scan_id"].as_str().unwrap();
    let (_, u) = get(&app, &format!("/scans/{up}")).await;
    assert_schema("scan_response", &u);
    assert_eq!(u["source"], "upload");
    assert_eq!(u["label"], Value::Null);
    assert_eq!(u["score"], c["score"]);
    let (_, upng) = send(&app, Method::GET, &format!("/scans/{up}/image"), Vec::new()).await;
    // The upload is the same file as the manifest scan, so the renderings agree.
    let (_, mpng) = send(&app, Method::GET, &format!("/scans/{}/image", fx.manifest.records[5].scan_id), Vec::new()).await;
    assert_eq!(upng, mpng);

    assert_eq!(get(&app, "/scans/missing").await.0, StatusCode::NOT_FOUND);
    assert_eq!(send(&app, Method::GET, "/scans/missing/image", Vec::new()).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn reload_swaps_the_active_model() {
    let fx = fixture(false);
    let (_, app) = fx.app();
    let (_, before) = post(&app, "/classify", fx.image_bytes(1)).await;

    let mut reg = Registry::load(&fx.registry).unwrap();
    reg.activate("model-b").unwrap();
    reg.save(&fx.registry).unwrap();
    let (s, h) = post(&app, "/admin/reload", Vec::new()).await;
    assert_eq!(s, StatusCode::OK);
    assert_schema("health_response", &h);
    assert_eq!(h["model_id"], "model-b");
    assert_eq!(h["uploads"], 0);
    assert_eq!(
        get(&app, &format!("/scans/{}/similar", before["scan_id"].as_str().unwrap())).await.0,
        StatusCode::NOT_FOUND
    );
    let (_, after) = post(&app, "/classify", fx.image_bytes(1)).await;
    assert_eq!(after["model_id"], "model-b");
    assert_ne!(after["score"], before["score"]);

    // A broken registry leaves the served model in place.
    let text = std::fs::read_to_string(&fx.registry).unwrap().replace("\"is_active\": false", "\"is_active\": true");
    std::fs::write(&fx.registry, text).unwrap();
    let (s, err) = post(&app, "/admin/reload", Vec::new()).await;
    assert_eq!(s, StatusCode::INTERNAL_SERVER_ERROR);
    assert_eq!(err["error"], "reload_failed");
    assert_eq!(get(&app, "/health").await.1["model_id"], "model-b");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_match_serial_results() {
    let fx = fixture(false);
    let (_, serial_app) = fx.app();
    let images: Vec<usize> = vec![0, 4, 9, 14];
    let ids: Vec<String> = fx.entries.iter().map(|e| e.scan_id.clone()).collect();

    let mut serial_scores = Vec::new();
    for &i in &images {
        serial_scores.push(post(&serial_app, "/classify", fx.image_bytes(i)).await.1["score"].clone());
    }
    let mut serial_similar = Vec::new();
    for id in &ids {
        serial_similar.push(get(&serial_app, &format!("/scans/{id}/similar?k=3")).await.1);
    }

    let (_, app) = fx.app();
    let classify: Vec<_> = images
        .iter()
        .map(|&i| {
            let (app, body) = (app.clone(), fx.image_bytes(i));
            tokio::spawn(async move { post(&app, "/classify", body).await.1["score"].clone() })
        })
        .collect();
    let similar: Vec<_> = ids
        .iter()
        .map(|id| {
            let (app, uri) = (app.clone(), format!("/scans/{id}/similar?k=3"));
            tokio::spawn(async move { get(&app, &uri).await.1 })
        })
        .collect();
    for (h, want) in classify.into_iter().zip(&serial_scores) {
        assert_eq!(&h.await.unwrap(), want);
    }
    for (h, want) in similar.into_iter().zip(&serial_similar) {
        assert_eq!(&h.await.unwrap(), want);
    }
    let (_, health) = get(&app, "/health").await;
    assert_eq!(health["uploads"], images.len());
}

#[test]
fn labels_serialize_lowercase() {
    assert_eq!(serde_json::to_value(Label::Positive).unwrap(), "positive");
}
