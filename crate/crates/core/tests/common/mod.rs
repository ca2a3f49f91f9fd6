// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fixture access and independent f64 oracles shared by the integration tests.
//!
//! Nothing here calls into the engine's kernels: the oracles are naive loops
//! in double precision, and the golden values come from the numpy reference in
//! `fixtures/make_tiny_fixture.py`.

#![allow(dead_code)]

use std::path::PathBuf;

use serde_json::Value;
use vit_lens::tensor::Matrix;
use vit_lens::weights::WeightBundle;
use vit_lens::Engine;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn fixture_bytes(name: &str) -> Vec<u8> {
    std::fs::read(fixture_path(name)).unwrap_or_else(|e| panic!("fixture {name}: {e}"))
}

pub fn golden() -> Value {
    serde_json::from_slice(&fixture_bytes("tiny_golden.json")).expect("golden json")
}

pub fn tiny_weights() -> WeightBundle {
    WeightBundle::load(fixture_path("tiny_model.safetensors"), None).expect("tiny model")
}

pub fn tiny_engine() -> Engine {
    Engine::new(tiny_weights())
}

pub fn tiny_image() -> Vec<u8> {
    fixture_bytes("tiny_image.png")
}

/// Flattens an arbitrarily nested JSON number array.
pub fn flat(v: &Value) -> Vec<f64> {
    match v {
        Value::Array(items) => items.iter().flat_map(flat).collect(),
        Value::Number(n) => vec![n.as_f64().expect("number")],
        other => panic!("expected numbers, got {other}"),
    }
}

pub fn matrix(v: &Value) -> Matrix {
    let rows: Vec<Vec<f32>> = v
        .as_array()
        .expect("rows")
        .iter()
        .map(|r| flat(r).into_iter().map(|x| x as f32).collect())
        .collect();
    Matrix::from_rows(&rows).expect("rectangular")
}

pub fn max_abs_diff(got: &[f32], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len(), "length mismatch");
    got.iter()
        .zip(want)
        .map(|(&g, &w)| (f64::from(g) - w).abs())
        .fold(0.0, f64::max)
}

pub fn assert_close(got: &[f32], want: &[f64], tol: f64, what: &str) {
    let d = max_abs_diff(got, want);
    assert!(d <= tol, "{what}: max abs diff {d:e} > {tol:e}");
}

// ---- oracles -------------------------------------------------------------

pub fn oracle_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0f64;
            for t in 0..k {
                s += f64::from(a[i * k + t]) * f64::from(b[t * n + j]);
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn oracle_softmax(row: &[f32], scale: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|&v| f64::from(v) * scale).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn oracle_layer_norm(x: &[f32], g: &[f32], b: &[f32], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = x.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(&v, (&g, &b))| f64::from(g) * (f64::from(v) - mean) / (var + eps).sqrt() + f64::from(b))
        .collect()
}

/// Standard normal CDF via statrs' erf (a different implementation from the
/// engine's).
pub fn oracle_phi(x: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

pub fn oracle_gelu(x: f64) -> f64 {
    x * oracle_phi(x)
}

/// Deterministic xorshift stream for hand-rolled random instances.
pub struct Xorshift(pub u64);

impl Xorshift {
    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x
    }

    /// Uniform in `[-1, 1)`.
    pub fn unit(&mut self) -> f32 {
        ((self.next_u64() >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn vec(&mut self, n: usize, scale: f32) -> Vec<f32> {
        (0..n).map(|_| self.unit() * scale).collect()
    }
}

// ---- service helpers -----------------------------------------------------

/// Trace JSON with the trailing wall-clock field cut off, for byte comparison.
pub fn without_elapsed(json: &str) -> &str {
    let cut = json.rfind(",\"elapsed_ms\":").expect("elapsed_ms is the last field");
    &json[..cut]
}

pub struct Booted {
    pub base: String,
    pub state: std::sync::Arc<vit_lens::service::AppState>,
}

/// Serves `engine` on an ephemeral loopback port.
pub async fn boot(engine: Engine, cache_capacity: usize) -> Booted {
    let state = vit_lens::service::AppState::ready(engine, cache_capacity);
    let app = vit_lens::service::router(state.clone(), vit_lens::service::MIB, &[]);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    Booted {
        base: format!("http://{addr}"),
        state,
    }
}

pub async fn post_image(
    client: &reqwest::Client,
    base: &str,
    query: &str,
    image: Vec<u8>,
) -> reqwest::Response {
    let part = reqwest::multipart::Part::bytes(image)
        .file_name("upload.png")
        .mime_str("image/png")
        .unwrap();
    client
        .post(format!("{base}/api/v1/infer?{query}"))
        .multipart(reqwest::multipart::Form::new().part("image", part))
        .send()
        .await
        .unwrap()
}

/// PNG of `side × side` random pixels.
pub fn random_png(side: u32, seed: u64) -> Vec<u8> {
    use image::ImageEncoder;
    let mut rng = Xorshift(seed.max(1));
    let pixels: Vec<u8> = (0..side * side * 3).map(|_| rng.next_u64() as u8).collect();
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&pixels, side, side, image::ExtendedColorType::Rgb8)
        .unwrap();
    out
}
