use std::path::PathBuf;
use std::sync::Arc;

use axum::http::StatusCode;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;

mod common;

use common::*;
use sg2scene_core::graph::{serialize_graph, SceneGraph, SceneNode, Schema};
use sg2scene_core::harness::experiment::{depth_sweep_graph, DEPTH_SWEEP_NODE};
use sg2scene_core::processor::{compose_nodes, warp_mask};
use sg2scene_core::raster::decode_rgb;
use sg2scene_service::{GenerateResponse, LayoutResponse, ServiceState, ValidateResponse};

#[tokio::test]
async fn health_reports_checkpoint_hashes() {
    let s = Schema::default();
    let bytes = processor_bytes(&s);
    let state = Arc::new(ServiceState::new(s, RES).with_processor_bytes(&bytes).unwrap());
    let (st, body) = call(&state, "GET", "/v1/health", "").await;
    assert_eq!(st, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["processor"]["step"], 10);
    assert_eq!(v["processor"]["sha256"].as_str().unwrap().len(), 64);
    assert!(v["generator"].is_null());
}

#[tokio::test]
async fn vocab_matches_golden() {
    let state = Arc::new(ServiceState::new(Schema::default(), [64, 128]));
    let (st, body) = call(&state, "GET", "/v1/vocab", "").await;
    assert_eq!(st, StatusCode::OK);
    golden("vocab.json", &body);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    let names: Vec<&str> = v["classes"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["sky", "road", "tree", "building", "person", "car", "bus", "truck"]);
    let rels: Vec<&str> = v["relations"].as_array().unwrap().iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert!(rels.contains(&"in_front_of") && rels.contains(&"behind"));
    assert_eq!((v["grid"].as_u64(), v["depth_bins"].as_u64()), (Some(8), Some(8)));
}

#[tokio::test]
async fn validate_matches_golden_files() {
    let s = Schema::default();
    let state = Arc::new(ServiceState::new(s.clone(), RES));

    let (st, body) = call(&state, "POST", "/v1/validate", &serialize_graph(&street(&s), &s)).await;
    assert_eq!(st, StatusCode::OK);
    golden("validate_ok.json", &body);

    let (st, body) = call(&state, "POST", "/v1/validate", VIOLATING_DOC).await;
    assert_eq!(st, StatusCode::OK);
    golden("validate_violations.json", &body);
    let v: ValidateResponse = serde_json::from_slice(&body).unwrap();
    assert!(!v.valid);
    assert_eq!(v.violations.len(), 2);

    let unknown = r#"{"classes":"default","edges":[],"nodes":[{"cell":3,"class":"tram","z":2}],"version":1}"#;
    let (st, body) = call(&state, "POST", "/v1/validate", unknown).await;
    assert_eq!(st, StatusCode::OK);
    let v: ValidateResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(v.violations[0].path, "nodes[0].class");

    let (st, body) = call(&state, "POST", "/v1/validate", MALFORMED_DOC).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    golden("validate_malformed.json", &body);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!((v["line"].as_u64(), v["column"].as_u64()), (Some(2), Some(13)));
}

#[tokio::test]
async fn layout_is_byte_deterministic_and_matches_golden() {
    let s = Schema::default();
    let state = Arc::new(full_state());
    let doc = serialize_graph(&street(&s), &s);
    let (st, a) = call(&state, "POST", "/v1/layout", &doc).await;
    assert_eq!(st, StatusCode::OK);
    let (_, b) = call(&state, "POST", "/v1/layout", &doc).await;
    assert_eq!(a, b);
    golden("layout_street.json", &a);

    let r: LayoutResponse = serde_json::from_slice(&a).unwrap();
    assert_eq!(r.boxes.len(), 5);
    assert_eq!(r.layout.argmax.len(), RES[0] * RES[1]);
    let (w, h, rgb) = decode_rgb(&STANDARD.decode(&r.layout.png).unwrap()).unwrap();
    assert_eq!((w, h), (RES[1], RES[0]));
    for (p, &c) in r.layout.argmax.iter().enumerate() {
        assert_eq!(rgb[p * 3..p * 3 + 3], r.layout.palette[c as usize]);
    }
}

#[tokio::test]
async fn concurrent_identical_requests_return_identical_bytes() {
    let s = Schema::default();
    let state = Arc::new(full_state());
    let doc = serialize_graph(&street(&s), &s);
    let calls: Vec<_> = (0..4)
        .map(|_| {
            let (state, doc) = (state.clone(), doc.clone());
            tokio::spawn(async move { call(&state, "POST", "/v1/generate", &doc).await })
        })
        .collect();
    let mut out = Vec::new();
    for c in calls {
        out.push(c.await.unwrap());
    }
    assert!(out.iter().all(|r| r == &out[0]));
}

#[tokio::test]
async fn empty_graph_gives_unclaimed_layout() {
    let s = Schema::default();
    let state = Arc::new(full_state());
    let doc = serialize_graph(&SceneGraph::default(), &s);
    let (st, body) = call(&state, "POST", "/v1/layout", &doc).await;
    assert_eq!(st, StatusCode::OK);
    golden("layout_empty.json", &body);
    let r: LayoutResponse = serde_json::from_slice(&body).unwrap();
    assert!(r.boxes.is_empty());
    assert!(r.layout.argmax.iter().all(|&c| c as usize == s.classes.len()));
}

#[tokio::test]
async fn missing_models_and_vocab_mismatch_are_reported() {
    let s = Schema::default();
    let doc = serialize_graph(&street(&s), &s);
    let bare = Arc::new(ServiceState::new(s.clone(), RES));
    assert_eq!(call(&bare, "POST", "/v1/layout", &doc).await.0, StatusCode::CONFLICT);
    let only_p = Arc::new(ServiceState::new(s.clone(), RES).with_processor_bytes(&processor_bytes(&s)).unwrap());
    assert_eq!(call(&only_p, "POST", "/v1/generate", &doc).await.0, StatusCode::CONFLICT);
    let other = doc.replace("\"classes\":\"default\"", "\"classes\":\"extended\"");
    let (st, body) = call(&only_p, "POST", "/v1/layout", &other).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["path"], "classes");
    assert_eq!(call(&only_p, "POST", "/v1/generate", "nope").await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn generate_returns_rgb_image_of_configured_size() {
    let s = Schema::default();
    let state = Arc::new(full_state());
    let (st, body) = call(&state, "POST", "/v1/generate", &serialize_graph(&street(&s), &s)).await;
    assert_eq!(st, StatusCode::OK);
    let r: GenerateResponse = serde_json::from_slice(&body).unwrap();
    let (w, h, rgb) = decode_rgb(&STANDARD.decode(&r.image.png).unwrap()).unwrap();
    assert_eq!((w, h, rgb.len()), (RES[1], RES[0], RES[0] * RES[1] * 3));
    assert_eq!(r.layout.boxes.len(), 5);
}

/// Changing the class of a node without edges can only alter pixels that
/// node covers before or after the edit.
#[tokio::test]
async fn class_edit_changes_only_the_node_footprint() {
    let s = Schema::default();
    let state = Arc::new(full_state());
    let p = small_processor(&s);
    let before = street(&s);
    let mut after = before.clone();
    let node = 2;
    assert!(after.edges.iter().all(|e| e.subject != node && e.object != node));
    after.nodes[node] = SceneNode::new(s.classes.index_of("tree").unwrap(), 20, 6, &s);

    let mut footprint = vec![false; RES[0] * RES[1]];
    for g in [&before, &after] {
        let (boxes, masks) = p.predict(g).unwrap();
        assert_eq!(compose_nodes(g, &s).len(), g.nodes.len());
        for (px, a) in warp_mask(&masks[node], &boxes[node], RES[0], RES[1]).into_iter().enumerate() {
            footprint[px] |= a > 0.5;
        }
    }
    let mut argmax = Vec::new();
    for g in [&before, &after] {
        let (st, body) = call(&state, "POST", "/v1/generate", &serialize_graph(g, &s)).await;
        assert_eq!(st, StatusCode::OK);
        argmax.push(serde_json::from_slice::<GenerateResponse>(&body).unwrap().layout.layout.argmax);
    }
    let changed: Vec<usize> = (0..footprint.len()).filter(|&i| argmax[0][i] != argmax[1][i]).collect();
    assert!(!changed.is_empty(), "edit had no visible effect");
    assert!(changed.iter().all(|&i| footprint[i]), "pixels outside the edited node changed");
}

#[tokio::test]
async fn app_directory_is_served() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<!doctype html><title>editor</title>").unwrap();
    let state = Arc::new(ServiceState::new(Schema::default(), RES).with_app_dir(dir.path().to_path_buf()));
    let (st, body) = call(&state, "GET", "/app/", "").await;
    assert_eq!(st, StatusCode::OK);
    assert!(String::from_utf8(body).unwrap().contains("editor"));
    let bare = Arc::new(ServiceState::new(Schema::default(), RES));
    assert_eq!(call(&bare, "GET", "/app/", "").await.0, StatusCode::NOT_FOUND);
}

/// On the committed toy-trained checkpoint, moving the probe car nearer
/// (bin 5 → 2) enlarges its box.
#[tokio::test]
async fn nearer_car_gets_larger_box_on_trained_checkpoint() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../artifacts/calibration/checkpoints/processor.ckpt");
    let state = Arc::new(ServiceState::load(Some(&path), None, None).unwrap());
    let s = state.schema.clone();
    let mut area = Vec::new();
    for z in [5, 2] {
        let doc = serialize_graph(&depth_sweep_graph(&s, z).unwrap(), &s);
        let (st, body) = call(&state, "POST", "/v1/layout", &doc).await;
        assert_eq!(st, StatusCode::OK);
        let r: LayoutResponse = serde_json::from_slice(&body).unwrap();
        area.push(r.boxes[DEPTH_SWEEP_NODE].area);
    }
    assert!(area[1] > area[0], "areas at z=5, z=2: {area:?}");
}
