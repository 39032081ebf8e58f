//! Fixtures shared by the HTTP tests and the workspace acceptance run.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tower::ServiceExt;

use sg2scene_core::checkpoint::Checkpoint;
use sg2scene_core::generator::{Generator, GeneratorConfig};
use sg2scene_core::graph::{serialize_graph, SceneEdge, SceneGraph, SceneNode, Schema};
use sg2scene_core::processor::{Dims, Processor, ProcessorConfig};
use sg2scene_service::{router, ServiceState};

pub const RES: [usize; 2] = [16, 32];

pub fn small_processor(s: &Schema) -> Processor {
    let cfg = ProcessorConfig {
        hidden: 16,
        class_dim: 8,
        location_dim: 8,
        depth_dim: 8,
        relation_dim: 8,
        layers: 1,
        mask_size: 8,
        mask_channels: 4,
        mask_disc_widths: vec![4],
        ..Default::default()
    };
    Processor::new(cfg, Dims::of(s), &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
}

pub fn small_generator(s: &Schema) -> Generator {
    let cfg = GeneratorConfig {
        widths: [4, 8, 8],
        residual_blocks: 1,
        disc_widths: vec![8, 8, 8],
        ..Default::default()
    };
    Generator::new(cfg, s.classes.len(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
}

pub fn processor_bytes(s: &Schema) -> Vec<u8> {
    Checkpoint::of_processor(&small_processor(s), s, 10).to_bytes()
}

pub fn full_state() -> ServiceState {
    let s = Schema::default();
    let g = Checkpoint::of_generator(&small_generator(&s), &s, 20).to_bytes();
    ServiceState::new(s.clone(), RES)
        .with_processor_bytes(&processor_bytes(&s))
        .unwrap()
        .with_generator_bytes(&g)
        .unwrap()
}

pub async fn call(state: &Arc<ServiceState>, method: &str, uri: &str, body: &str) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

/// The golden directory, reachable from any sibling crate's manifest dir.
pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../service/tests/golden")
}

/// Compares `actual` with a golden file, rewriting it first when
/// `SG2SCENE_UPDATE_GOLDEN` is set.
pub fn compare_golden(name: &str, actual: &[u8]) -> Result<(), String> {
    let path = golden_dir().join(name);
    if std::env::var_os("SG2SCENE_UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| e.to_string())?;
        std::fs::write(&path, actual).map_err(|e| e.to_string())?;
    }
    let expected = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected == actual {
        Ok(())
    } else {
        Err(format!("{name} differs from golden file:\n{}", String::from_utf8_lossy(actual)))
    }
}

pub fn golden(name: &str, actual: &[u8]) {
    if let Err(e) = compare_golden(name, actual) {
        panic!("{e}");
    }
}

pub fn street(s: &Schema) -> SceneGraph {
    let c = |n: &str| s.classes.index_of(n).unwrap();
    let r = |n: &str| s.relations.index_of(n).unwrap();
    SceneGraph {
        nodes: vec![
            SceneNode::new(c("sky"), 2, 7, s),
            SceneNode::new(c("road"), 58, 7, s),
            SceneNode::new(c("building"), 20, 6, s),
            SceneNode::new(c("car"), 44, 2, s),
            SceneNode::new(c("person"), 41, 3, s),
        ],
        edges: vec![SceneEdge::new(4, r("left_of"), 3), SceneEdge::new(3, r("in_front_of"), 4)],
        meta: Default::default(),
    }
}

pub const VIOLATING_DOC: &str = r#"{"classes":"default","edges":[{"o":0,"r":"left_of","s":0},{"o":1,"r":"above","s":0},{"o":1,"r":"below","s":0}],"nodes":[{"cell":3,"class":"car","z":2},{"cell":9,"class":"bus","z":2}],"version":1}"#;
pub const MALFORMED_DOC: &str = "{\"classes\": \"default\",\n  \"nodes\": [,]}";

/// Golden checks for vocab, validate and layout on a state with no editor
/// assets, plus byte-identical repeated layout responses.
pub async fn check_goldens() -> Result<String, String> {
    let s = Schema::default();
    let expect = |ok: bool, what: &str| if ok { Ok(()) } else { Err(what.to_string()) };

    let bare = Arc::new(ServiceState::new(s.clone(), [64, 128]));
    expect(bare.app_dir.is_none(), "editor assets configured")?;
    let (st, body) = call(&bare, "GET", "/v1/vocab", "").await;
    expect(st == StatusCode::OK, "vocab status")?;
    compare_golden("vocab.json", &body)?;

    let small = Arc::new(ServiceState::new(s.clone(), RES));
    let cases = [
        ("validate_ok.json", serialize_graph(&street(&s), &s), StatusCode::OK),
        ("validate_violations.json", VIOLATING_DOC.to_string(), StatusCode::OK),
        ("validate_malformed.json", MALFORMED_DOC.to_string(), StatusCode::BAD_REQUEST),
    ];
    for (name, doc, want) in &cases {
        let (st, body) = call(&small, "POST", "/v1/validate", doc).await;
        expect(st == *want, &format!("{name}: status {st}"))?;
        compare_golden(name, &body)?;
    }

    let full = Arc::new(full_state());
    let doc = serialize_graph(&street(&s), &s);
    let (st, a) = call(&full, "POST", "/v1/layout", &doc).await;
    expect(st == StatusCode::OK, "layout status")?;
    for _ in 0..3 {
        let (_, b) = call(&full, "POST", "/v1/layout", &doc).await;
        expect(a == b, "repeated layout responses differ")?;
    }
    compare_golden("layout_street.json", &a)?;
    Ok(format!("{} golden files match; layout repeated 4× byte-identical", 2 + cases.len()))
}
