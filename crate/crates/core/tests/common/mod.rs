//! Shared service fixture: toy models on disk, a registry file, an
//! in-process server and the endpoint contract checks.

use std::path::PathBuf;
use std::time::Instant;

use base64::Engine;
use cystonet::dataio::Rle;
use cystonet::nn::{Checkpoint, Model, ModelConfig};
use cystonet::serve::api::{ClassifyResponse, ErrorResponse, ExplainResponse, HealthResponse, SegmentResponse, SubtypeResponse};
use cystonet::serve::{router, AppState};
use image::{ImageFormat, RgbImage};
use reqwest::multipart::{Form, Part};
use reqwest::StatusCode;

/// The fixture classifier ignores its input and always answers this.
pub const CLASSIFY_PROBABILITY: f64 = 0.73;
pub const CLASSIFY_VERSION: &str = "toy-classifier-1";

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub registry: PathBuf,
}

fn constant_classifier() -> Model {
    let m = Model::build(&ModelConfig::classifier().toy(), 1).unwrap();
    let logit = (CLASSIFY_PROBABILITY / (1.0 - CLASSIFY_PROBABILITY)).ln() as f32;
    for (name, var) in m.store().named_trainable() {
        if name == "head.weight" {
            var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
        } else if name == "head.bias" {
            var.set(&var.as_tensor().ones_like().unwrap().affine(logit as f64, 0.0).unwrap()).unwrap();
        }
    }
    m
}

/// Writes a classifier and segmenter checkpoint, an exported subtyper and
/// the registry that lists them.
pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    Checkpoint::from_model(&constant_classifier(), Vec::new(), 0).unwrap().save(dir.path().join("classify")).unwrap();
    let seg = Model::build(&ModelConfig::segmenter().toy(), 2).unwrap();
    Checkpoint::from_model(&seg, Vec::new(), 0).unwrap().save(dir.path().join("segment")).unwrap();
    let sub = Model::build(&ModelConfig::subtyper().toy(), 3).unwrap();
    Checkpoint::from_model(&sub, Vec::new(), 0).unwrap().export(dir.path().join("subtype.safetensors")).unwrap();
    let registry = dir.path().join("registry.toml");
    std::fs::write(
        &registry,
        format!(
            "[classify]\npath = \"classify\"\nversion = \"{CLASSIFY_VERSION}\"\n\n\
             [segment]\npath = \"segment\"\nthreshold = 0.5\n\n\
             [subtype]\npath = \"subtype.safetensors\"\nformat = \"exported\"\n"
        ),
    )
    .unwrap();
    Fixture { dir, registry }
}

/// Serves `state` on an ephemeral port and returns the base URL.
pub async fn spawn(state: AppState) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, router(state)).await.unwrap();
    });
    format!("http://{addr}/api/v1")
}

pub fn test_image(w: u32, h: u32, seed: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| {
        let v = |k: u32| ((x * (3 + k) + y * (5 + seed) + k * 40 + seed * 17) % 256) as u8;
        image::Rgb([v(0), v(1), v(2)])
    })
}

pub fn encode(img: &RgbImage, format: ImageFormat) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, format).unwrap();
    buf.into_inner()
}

pub fn png(img: &RgbImage) -> Vec<u8> {
    encode(img, ImageFormat::Png)
}

pub fn form(files: &[(&str, Vec<u8>)], fields: &[(&str, &str)]) -> Form {
    let mut f = Form::new();
    for (name, bytes) in files {
        f = f.part("image", Part::bytes(bytes.clone()).file_name(name.to_string()));
    }
    for (k, v) in fields {
        f = f.text(k.to_string(), v.to_string());
    }
    f
}

pub async fn post(base: &str, endpoint: &str, form: Form) -> reqwest::Response {
    reqwest::Client::new().post(format!("{base}/{endpoint}")).multipart(form).send().await.unwrap()
}

pub async fn post_ok<T: serde::de::DeserializeOwned>(base: &str, endpoint: &str, form: Form) -> T {
    let r = post(base, endpoint, form).await;
    let status = r.status();
    let body = r.text().await.unwrap();
    assert_eq!(status, StatusCode::OK, "{endpoint}: {body}");
    serde_json::from_str(&body).unwrap_or_else(|e| panic!("{endpoint}: {e}: {body}"))
}

pub async fn post_err(base: &str, endpoint: &str, form: Form) -> (StatusCode, ErrorResponse) {
    let r = post(base, endpoint, form).await;
    let status = r.status();
    let body = r.text().await.unwrap();
    (status, serde_json::from_str(&body).unwrap_or_else(|e| panic!("{endpoint}: {e}: {body}")))
}

pub async fn health(base: &str) -> HealthResponse {
    reqwest::get(format!("{base}/health")).await.unwrap().json().await.unwrap()
}

pub fn decode_png(b64: &str) -> RgbImage {
    let bytes = base64::engine::general_purpose::STANDARD.decode(b64).unwrap();
    image::load_from_memory(&bytes).unwrap().to_rgb8()
}

/// Health reports loading until the registry is installed, then every
/// task with the registered versions.
pub async fn check_health(fx: &Fixture) -> String {
    let state = AppState::loading(2);
    let base = spawn(state.clone()).await;
    let h = health(&base).await;
    assert_eq!(h.status, "loading");
    assert!(h.models.is_empty());
    let (status, err) = post_err(&base, "classify", form(&[("a.png", png(&test_image(32, 32, 0)))], &[])).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(err.error.kind, "loading");
    state.install(cystonet::serve::Registry::load(&fx.registry).unwrap());
    let h = health(&base).await;
    assert_eq!(h.status, "ok");
    let tasks: Vec<&str> = h.models.keys().map(String::as_str).collect();
    assert_eq!(tasks, ["classify", "segment", "subtype"]);
    assert_eq!(h.models["classify"].version, CLASSIFY_VERSION);
    assert_eq!(h.models["segment"].version, "segment-e0");
    assert_eq!(h.models["subtype"].version, "subtype-e0");
    assert!(h.models.values().all(|m| m.input_side == 64));
    "health loading then ok with registry versions".into()
}

pub async fn check_classify(base: &str) -> String {
    let img = png(&test_image(80, 66, 1));
    let at = |t: &'static str| form(&[("case.png", img.clone())], &[("threshold", t)]);
    let low: ClassifyResponse = post_ok(base, "classify", at("0.5")).await;
    let high: ClassifyResponse = post_ok(base, "classify", at("0.8")).await;
    let p = low.predictions[0].probability;
    assert!((p - CLASSIFY_PROBABILITY).abs() < 1e-5, "fixture probability {p}");
    assert_eq!((low.predictions[0].label, high.predictions[0].label), (1, 0), "threshold contract");
    assert_eq!(high.predictions[0].probability, p, "probability must not depend on the threshold");
    assert_eq!(low.model_version, CLASSIFY_VERSION);

    // batch order, mixed formats, repeat determinism
    let files = [
        ("first.png", png(&test_image(64, 64, 2))),
        ("second.bmp", encode(&test_image(66, 70, 3), ImageFormat::Bmp)),
        ("third.jpg", encode(&test_image(90, 64, 4), ImageFormat::Jpeg)),
    ];
    let a: ClassifyResponse = post_ok(base, "classify", form(&files, &[])).await;
    let b: ClassifyResponse = post_ok(base, "classify", form(&files, &[])).await;
    let ids: Vec<&str> = a.predictions.iter().map(|p| p.id.as_str()).collect();
    assert_eq!(ids, ["first.png", "second.bmp", "third.jpg"]);
    assert_eq!(a.predictions, b.predictions, "repeated batch differs");
    assert!(a.latency_ms > 0.0);

    let (status, err) = post_err(base, "classify", at("1.5")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{err:?}");
    let (status, _) = post_err(base, "classify", form(&[("junk.png", b"not an image".to_vec())], &[])).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    "classify threshold contract, batch order, determinism, 400/422".into()
}

pub async fn check_segment(base: &str) -> String {
    let src = test_image(80, 72, 5);
    let img = png(&src);
    let with = |fields: &[(&str, &str)]| form(&[("lesion.png", img.clone())], fields);
    let full: SegmentResponse = post_ok(base, "segment", with(&[("return_probabilities", "true")])).await;
    let probs = full.probabilities.clone().expect("probabilities requested");
    assert_eq!(probs.len(), 80 * 72);
    assert_eq!((full.mask.width, full.mask.height), (80, 72));

    // thresholds at quantiles of the returned map keep the check non-trivial
    let mut sorted = probs.clone();
    sorted.sort_by(f32::total_cmp);
    let mut last = usize::MAX;
    let mut distinct = std::collections::BTreeSet::new();
    for q in [0.05, 0.2, 0.4, 0.5, 0.6, 0.8, 0.95] {
        let t = (sorted[((sorted.len() - 1) as f64 * q) as usize] as f64).clamp(1e-6, 1.0 - 1e-6);
        let ts = format!("{t}");
        let r: SegmentResponse = post_ok(base, "segment", with(&[("mask_threshold", &ts), ("return_probabilities", "true")])).await;
        let p = r.probabilities.as_ref().unwrap();
        let thr = ts.parse::<f64>().unwrap() as f32;
        let decoded = r.mask.decode().unwrap();
        for (i, &v) in p.iter().enumerate() {
            assert_eq!(decoded.data()[i], v >= thr, "RLE round trip differs at pixel {i}");
        }
        assert_eq!(r.mask_pixels, decoded.count());
        assert!(r.mask_pixels <= last, "mask grew from {last} to {} at threshold {t}", r.mask_pixels);
        last = r.mask_pixels;
        distinct.insert(r.mask_pixels);
    }
    assert!(distinct.len() >= 3, "thresholds did not exercise the map");

    let clear: SegmentResponse = post_ok(base, "segment", with(&[("overlay_alpha", "0")])).await;
    assert_eq!(decode_png(&clear.overlay_png), src, "alpha 0 overlay differs from the upload");
    assert!(clear.probabilities.is_none());
    let rle: &Rle = &clear.mask;
    assert_eq!(rle.counts.iter().map(|&c| c as usize).sum::<usize>(), 80 * 72);
    let shaded: SegmentResponse = post_ok(base, "segment", with(&[("overlay_alpha", "0.6")])).await;
    assert_eq!(decode_png(&shaded.overlay_png).dimensions(), (80, 72));
    format!("segment monotone over {} distinct mask sizes, RLE exact, alpha 0 identity", distinct.len())
}

pub async fn check_subtype(base: &str) -> String {
    let img = png(&test_image(64, 64, 6));
    for fields in [&[][..], &[("enable", "false")][..]] {
        let (status, err) = post_err(base, "subtype", form(&[("m.png", img.clone())], fields)).await;
        assert_eq!(status, StatusCode::FORBIDDEN);
        assert_eq!(err.error.kind, "subtype_disabled");
        assert!(err.error.message.contains("enable"));
    }
    let r: SubtypeResponse = post_ok(base, "subtype", form(&[("m.png", img)], &[("enable", "true")])).await;
    assert!(r.exploratory);
    let names: Vec<&str> = r.markers.iter().map(|m| m.name.as_str()).collect();
    assert_eq!(names, ["her2", "ki67", "p53"]);
    for m in &r.markers {
        assert!(m.probability > 0.0 && m.probability < 1.0, "{} probability {}", m.name, m.probability);
        assert_eq!(m.label, u8::from(m.probability >= r.threshold));
    }
    "subtype gated by enable, three exploratory markers".into()
}

pub async fn check_explain(base: &str) -> String {
    let src = test_image(96, 80, 7);
    let img = png(&src);
    let ask = |fields: &[(&str, &str)]| form(&[("x.png", img.clone())], fields);
    let a: ExplainResponse = post_ok(base, "explain", ask(&[("task", "subtype"), ("target", "ki67")])).await;
    let b: ExplainResponse = post_ok(base, "explain", ask(&[("task", "subtype"), ("target", "1")])).await;
    assert_eq!(a.target, "ki67");
    assert_eq!(a.target_index, 1);
    assert_eq!(a.saliency.len(), a.side * a.side);
    assert!(a.saliency.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(!a.all_zero);
    assert_eq!(a.saliency.iter().cloned().fold(0.0f32, f32::max), 1.0);
    assert_eq!(a.saliency, b.saliency, "repeated explanation differs");
    assert_eq!(a.saliency_png16, b.saliency_png16);
    assert_eq!(a.overlay_png, b.overlay_png);

    let clear: ExplainResponse = post_ok(base, "explain", ask(&[("task", "subtype"), ("alpha", "0")])).await;
    assert_eq!(decode_png(&clear.overlay_png), src, "alpha 0 overlay differs from the upload");

    // the constant classifier has no input gradient
    let flat: ExplainResponse = post_ok(base, "explain", ask(&[("task", "classify")])).await;
    assert!(flat.all_zero && flat.saliency.iter().all(|&v| v == 0.0));

    let (status, err) = post_err(base, "explain", ask(&[("task", "subtype"), ("target", "7")])).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{err:?}");
    let (status, err) = post_err(base, "explain", ask(&[("task", "subtype"), ("layer", "nowhere")])).await;
    assert!(status.is_client_error() && err.error.message.contains("stage"), "{status} {err:?}");
    "explain bit-stable, alpha 0 identity, flat model flagged, bad target rejected".into()
}

/// Concurrent requests must answer exactly as the same requests sent serially.
pub async fn check_concurrency(base: &str) -> String {
    let uploads: Vec<Vec<u8>> = (0..8).map(|i| png(&test_image(64 + 8 * i, 64, 20 + i))).collect();
    let mut serial = Vec::new();
    for u in &uploads {
        let r: SegmentResponse = post_ok(base, "segment", form(&[("c.png", u.clone())], &[])).await;
        serial.push(r.mask);
    }
    let handles: Vec<_> = uploads
        .iter()
        .map(|u| {
            let (base, u) = (base.to_string(), u.clone());
            tokio::spawn(async move { post_ok::<SegmentResponse>(&base, "segment", form(&[("c.png", u)], &[])).await.mask })
        })
        .collect();
    for (i, h) in handles.into_iter().enumerate() {
        assert_eq!(h.await.unwrap(), serial[i], "concurrent response {i} differs from serial");
    }
    "8 concurrent segment requests equal serial answers".into()
}

/// Median wall-clock time of 50 single-image classify requests, in ms.
pub async fn median_latency(base: &str) -> f64 {
    let img = png(&test_image(256, 256, 9));
    let client = reqwest::Client::new();
    let mut times = Vec::with_capacity(50);
    for _ in 0..50 {
        let started = Instant::now();
        let r = client
            .post(format!("{base}/classify"))
            .multipart(form(&[("l.png", img.clone())], &[]))
            .send()
            .await
            .unwrap();
        assert_eq!(r.status(), StatusCode::OK);
        let _: ClassifyResponse = r.json().await.unwrap();
        times.push(started.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    (times[24] + times[25]) / 2.0
}

pub fn loaded_state(fx: &Fixture) -> AppState {
    AppState::loaded(cystonet::serve::Registry::load(&fx.registry).unwrap(), 2)
}
