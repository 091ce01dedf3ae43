use std::path::PathBuf;

use axum::body::{Body, Bytes};
use axum::http::{header, HeaderMap, Method, Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use itgan_core::data::{RawImage, SyntheticSpec};
use itgan_core::nn::{init_params, ArchConfig, ModelBundle};
use itgan_core::pipeline;
use itgan_core::train::checkpoint;
use itgan_service::{router, AppState, CorsOrigins, ErrorBody};

/// Set to rewrite the fixture checkpoint and golden responses.
const BLESS: &str = "ITGAN_BLESS";

/// Resolved through the service crate so other packages can include this file.
fn dir(sub: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../service/tests").join(sub)
}

fn blessing() -> bool {
    std::env::var_os(BLESS).is_some()
}

fn recipe() -> ModelBundle {
    init_params(&ArchConfig::new(16, 8, 0.0625).unwrap(), 11)
        .unwrap()
        .with_attributes(SyntheticSpec::attributes())
        .unwrap()
}

fn model() -> ModelBundle {
    let path = dir("fixtures").join("tiny.itgan");
    if blessing() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        checkpoint::save_bundle(&recipe(), &Default::default(), &path).unwrap();
    }
    checkpoint::load(&path).unwrap().bundle
}

fn app() -> Router {
    router(AppState::new(Some(model())), &CorsOrigins::default())
}

fn empty_app() -> Router {
    router(AppState::new(None), &CorsOrigins::default())
}

fn golden(name: &str, actual: &[u8]) {
    let path = dir("golden").join(name);
    if blessing() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(expected == actual, "{name} differs from its golden file");
}

async fn call(app: &Router, method: Method, path: &str, body: Option<Value>) -> (StatusCode, HeaderMap, Bytes) {
    let mut req = Request::builder().method(method).uri(path);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, headers, bytes)
}

async fn post(app: &Router, path: &str, body: Value) -> (StatusCode, Value) {
    let (status, _, bytes) = call(app, Method::POST, path, Some(body)).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn png_json(img: &RawImage) -> Value {
    json!({
        "data": B64.encode(pipeline::encode_png(img).unwrap()),
        "width": img.width,
        "height": img.height,
    })
}

fn sprite() -> Value {
    let item = SyntheticSpec::new(16, 3).item(0).unwrap();
    png_json(&pipeline::tensor_to_raw(&item.pixels).unwrap())
}

fn assert_error(status: StatusCode, body: &Value, expected: StatusCode) -> ErrorBody {
    assert_eq!(status, expected, "{body}");
    serde_json::from_value(body.clone()).unwrap()
}

#[cfg_attr(not(itgan_acceptance), test)]
pub fn fixture_matches_recipe() {
    assert_eq!(model(), recipe());
}

#[cfg_attr(not(itgan_acceptance), tokio::test)]
pub async fn health_reports_model() {
    let (s, _, body) = call(&empty_app(), Method::GET, "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["model_loaded"], false);

    let app = app();
    let (s, _, first) = call(&app, Method::GET, "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!((v["image_size"].as_u64(), v["attribute_count"].as_u64()), (Some(16), Some(8)));
    let (_, _, again) = call(&app, Method::GET, "/health", None).await;
    assert_eq!(first, again);
    golden("health.json", &first);
}

#[cfg_attr(not(itgan_acceptance), tokio::test)]
pub async fn attributes_in_index_order() {
    let (s, _, body) = call(&app(), Method::GET, "/attributes", None).await;
    assert_eq!(s, StatusCode::OK);
    let v: Vec<Value> = serde_json::from_slice(&body).unwrap();
    assert_eq!(v.len(), 8);
    assert_eq!(v[0]["name"], "round_face");
    for (i, a) in v.iter().enumerate() {
        assert_eq!(a["index"].as_u64(), Some(i as u64));
    }
    golden("attributes.json", &body);
}

#[cfg_attr(not(itgan_acceptance), tokio::test)]
pub async fn model_endpoints_unavailable_without_model() {
    let app = empty_app();
    let (s, _, body) = call(&app, Method::GET, "/attributes", None).await;
    assert_error(s, &serde_json::from_slice(&body).unwrap(), StatusCode::SERVICE_UNAVAILABLE);
    for (path, body) in [
        ("/encode", json!({ "image": sprite() })),
        ("/generate", json!({ "c": vec![0; 8], "seed": 1 })),
        ("/transform", json!({ "image": sprite(), "edits": {} })),
    ] {
        let (s, v) = post(&app, path, body).await;
        let e = assert_error(s, &v, StatusCode::SERVICE_UNAVAILABLE);
        assert_eq!(e.error, "no_model");
    }
}

#[cfg_attr(not(itgan_acceptance), tokio::test)]
pub async fn encode_ranges_and_determinism() {
    let app = app();
    let (s, _, first) = call(&app, Method::POST, "/encode", Some(json!({ "image": sprite() }))).await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_slice(&first).unwrap();
    let z: Vec<f64> = serde_json::from_value(v["z_tilde"].clone()).unwrap();
    let c: Vec<f64> = serde_json::from_value(v["c_tilde"].clone()).unwrap();
    assert_eq!(z.len(), 100);
    assert!(z.iter().all(|&x| x > -1.0 && x < 1.0));
    assert_eq!(c.len(), 8);
    assert!(c.iter().all(|&x| x > 0.0 && x < 1.0));
    let (_, _, again) = call(&app, Method::POST, "/encode", Some(json!({ "image": sprite() }))).await;
    assert_eq!(first, again);
    golden("encode.json", &first);
}

#[cfg_attr(not(itgan_acceptance), tokio::test)]
pub async fn encode_rejects_bad_images() {
    let app = app();
    let not_png = json!({ "image": { "data": B64.encode(b"hello"), "width": 16, "height": 16 } });
    let not_b64 = json!({ "image": { "data": "%%%", "width": 16, "height": 16 } });
    let mut wrong_size = sprite();
    wrong_size["width"] = json!(17);
    for body in [not_png, not_b64, json!({ "image": wrong_size }), json!({ "picture": 1 })] {
        let (s, v) = post(&app, "/encode", body).await;
        assert_error(s, &v, StatusCode::BAD_REQUEST);
    }
    let small = RawImage::from_fn(8, 8, |_, _| [10, 20, 30]);
    let (s, v) = post(&app, "/encode", json!({ "image": png_json(&small) })).await;
    assert_error(s, &v, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, v) = post(&app, "/transform", json!({ "image": png_json(&small) })).await;
    assert_error(s, &v, StatusCode::UNPROCESSABLE_ENTITY);
}

#[cfg_attr(not(itgan_acceptance), tokio::test)]
pub async fn larger_inputs_are_cropped_and_resized() {
    let wide = RawImage::from_fn(40, 24, |x, y| [(x * 6) as u8, (y * 10) as u8, 128]);
    let (s, v) = post(&app(), "/encode", json!({ "image": png_json(&wide) })).await;
    assert_eq!(s, StatusCode::OK, "{v}");
}

#[cfg_attr(not(itgan_acceptance), tokio::test)]
pub async fn generate_is_seeded() {
    let app = app();
    let body = json!({ "c": [0, 1, 0, 1, 0, 0, 1, 0], "seed": 42 });
    let (s, _, first) = call(&app, Method::POST, "/generate", Some(body.clone())).await;
    assert_eq!(s, StatusCode::OK);
    let (_, _, again) = call(&app, Method::POST, "/generate", Some(body)).await;
    assert_eq!(first, again);
    let v: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(v["seed"], 42);
    assert_eq!((v["image"]["width"].as_u64(), v["image"]["height"].as_u64()), (Some(16), Some(16)));
    let png = B64.decode(v["image"]["data"].as_str().unwrap()).unwrap();
    let decoded = RawImage::decode(&png).unwrap();
    assert_eq!((decoded.width, decoded.height), (16, 16));
    golden("generate.png", &png);

    let (_, other) = post(&app, "/generate", json!({ "c": [0, 1, 0, 1, 0, 0, 1, 0], "seed": 43 })).await;
    assert_ne!(other["image"]["data"], v["image"]["data"]);
    let (s, zeros) = post(&app, "/generate", json!({ "c": vec![0; 8] })).await;
    assert_eq!(s, StatusCode::OK);
    assert!(zeros["seed"].is_u64());
}

#[cfg_attr(not(itgan_acceptance), tokio::test)]
pub async fn generate_validates_c() {
    let app = app();
    for c in [json!(vec![0; 7]), json!(vec![0; 9]), json!([0, 0, 0, 0, 0, 0, 0, 0.5])] {
        let (s, v) = post(&app, "/generate", json!({ "c": c, "seed": 1 })).await;
        assert_error(s, &v, StatusCode::BAD_REQUEST);
    }
}

#[cfg_attr(not(itgan_acceptance), tokio::test)]
pub async fn transform_without_edits_is_reconstruction() {
    let app = app();
    let bundle = model();
    let (s, _, body) = call(&app, Method::POST, "/transform", Some(json!({ "image": sprite(), "edits": {} }))).await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    let score = v["identity_score"].as_f64().unwrap();
    assert!(score >= 0.0);
    assert_eq!(v["c_tilde"], v["c_edited"]);
    assert!(v.get("warning").is_none());

    let x = SyntheticSpec::new(16, 3).item(0).unwrap().pixels;
    let x = pipeline::load_image_bytes(
        &pipeline::encode_png(&pipeline::tensor_to_raw(&x).unwrap()).unwrap(),
        16,
    )
    .unwrap();
    let local = pipeline::transform(&bundle, &x, &[]).unwrap();
    assert_eq!(score, local.identity_score);
    let direct = itgan_core::eval::identity_score(&bundle, &x, &local.image).unwrap();
    assert_eq!(score, direct);
    let png = B64.decode(v["image"]["data"].as_str().unwrap()).unwrap();
    let expected = pipeline::encode_png(&pipeline::tensor_to_raw(&bundle.rebuild(&x.reshape(&[1, 3, 16, 16]).unwrap()).unwrap()).unwrap()).unwrap();
    assert_eq!(png, expected);
    golden("transform.json", &body);

    let (_, v) = post(&app, "/transform", json!({ "image": sprite(), "return_identity_score": false })).await;
    assert!(v.get("identity_score").is_none());
}

#[cfg_attr(not(itgan_acceptance), tokio::test)]
pub async fn transform_edits() {
    let app = app();
    let (s, v) = post(&app, "/transform", json!({ "image": sprite(), "edits": { "glasses": 1, "hat": 0 } })).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["c_edited"][1], 1.0);
    assert_eq!(v["c_edited"][6], 0.0);
    assert_eq!(v["c_edited"][0], v["c_tilde"][0]);

    let (s, v) = post(&app, "/transform", json!({ "image": sprite(), "edits": { "beard": 1 } })).await;
    let e = assert_error(s, &v, StatusCode::BAD_REQUEST);
    assert_eq!(e.error, "unknown_attribute");
    assert!(e.detail.contains("round_face") && e.detail.contains("big_eyes"));

    for bad in [json!(2), json!("toggle"), json!(true)] {
        let (s, v) = post(&app, "/transform", json!({ "image": sprite(), "edits": { "smile": bad } })).await;
        assert_error(s, &v, StatusCode::BAD_REQUEST);
    }

    let four = json!({ "round_face": 1, "glasses": 1, "bangs": 0, "smile": "flip" });
    let (s, v) = post(&app, "/transform", json!({ "image": sprite(), "edits": four })).await;
    assert_eq!(s, StatusCode::OK);
    assert!(v["warning"].as_str().unwrap().contains('4'));
}

#[cfg_attr(not(itgan_acceptance), tokio::test)]
pub async fn inverse_edit_restores_binarized_labels() {
    let app = app();
    let (_, first) = post(&app, "/transform", json!({ "image": sprite(), "edits": { "smile": "flip" } })).await;
    let c0 = first["c_tilde"][3].as_f64().unwrap();
    let c1 = first["c_edited"][3].as_f64().unwrap();
    assert_eq!(c1, 1.0 - c0.round());
    let inverse = (1.0 - c1) as u8;
    let (_, second) = post(&app, "/transform", json!({ "image": sprite(), "edits": { "smile": inverse } })).await;
    assert_eq!(second["c_tilde"], first["c_tilde"]);
    assert_eq!(second["c_edited"][3].as_f64().unwrap(), c0.round());

    let bundle = model();
    let c = itgan_core::Tensor::from_f64(&[1, 8], &first["c_tilde"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect::<Vec<_>>()).unwrap();
    let flip: Vec<pipeline::Edit> = vec!["smile=flip".parse().unwrap()];
    let once = pipeline::apply_edits(&bundle, &c, &flip).unwrap();
    let twice = pipeline::apply_edits(&bundle, &once, &flip).unwrap();
    assert_eq!(twice.data()[3], c.data()[3].round());
}

#[cfg_attr(not(itgan_acceptance), tokio::test)]
pub async fn cors_allows_browser_clients() {
    let app = app();
    let pre = Request::builder()
        .method(Method::OPTIONS)
        .uri("/transform")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .header(header::ACCESS_CONTROL_REQUEST_HEADERS, "content-type")
        .body(Body::empty())
        .unwrap();
    let resp = app.clone().oneshot(pre).await.unwrap();
    assert!(resp.status().is_success());
    let h = resp.headers();
    assert_eq!(h[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");
    assert!(h[header::ACCESS_CONTROL_ALLOW_METHODS].to_str().unwrap().contains("POST"));

    let get = Request::builder()
        .uri("/health")
        .header(header::ORIGIN, "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(get).await.unwrap();
    assert_eq!(resp.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");
}

#[cfg_attr(not(itgan_acceptance), tokio::test)]
pub async fn cors_origin_list() {
    let app = router(
        AppState::new(Some(model())),
        &CorsOrigins(Some(vec!["http://ui.local".into()])),
    );
    let req = |origin: &str| {
        Request::builder()
            .uri("/health")
            .header(header::ORIGIN, origin)
            .body(Body::empty())
            .unwrap()
    };
    let ok = app.clone().oneshot(req("http://ui.local")).await.unwrap();
    assert_eq!(ok.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN], "http://ui.local");
    let other = app.oneshot(req("http://elsewhere")).await.unwrap();
    assert!(other.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).is_none());
}

#[cfg_attr(not(itgan_acceptance), tokio::test(flavor = "multi_thread", worker_threads = 4))]
pub async fn concurrent_requests_are_independent() {
    let app = app();
    let (_, expected) = post(&app, "/transform", json!({ "image": sprite(), "edits": { "hat": 1 } })).await;
    let (_, gen) = post(&app, "/generate", json!({ "c": vec![1; 8], "seed": 9 })).await;
    let mut jobs = Vec::new();
    for i in 0..8 {
        let app = app.clone();
        jobs.push(tokio::spawn(async move {
            if i % 2 == 0 {
                post(&app, "/transform", json!({ "image": sprite(), "edits": { "hat": 1 } })).await.1
            } else {
                post(&app, "/generate", json!({ "c": vec![1; 8], "seed": 9 })).await.1
            }
        }));
    }
    for (i, j) in jobs.into_iter().enumerate() {
        let v = j.await.unwrap();
        assert_eq!(v, if i % 2 == 0 { expected.clone() } else { gen.clone() });
    }
}
