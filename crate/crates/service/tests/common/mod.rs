#![allow(dead_code)]

use std::path::Path;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use forge_core::critic::{CriticConfig, RealismCritic};
use forge_core::estimator::{EstimatorConfig, ParamEstimator};
use forge_core::image::{ImageGrid, RegionMask};
use forge_core::saliency::Direction;
use forge_core::synth::synth_scene;
use forge_service::config::{ForgeConfig, ModelPaths};
use forge_service::store::Store;
use forge_service::AppState;
use http_body_util::BodyExt;
use serde_json::Value;
use tempfile::TempDir;
use tower::ServiceExt;

pub const SIDE: usize = 32;

/// Writes small untrained checkpoints under `dir` and returns a config pointing at them.
pub fn write_models(dir: &Path) -> ForgeConfig {
    let critic = RealismCritic::init(CriticConfig {
        resolution: 32,
        encoder_channels: [4, 6, 6],
        mlp_hidden: 6,
        ..CriticConfig::default()
    })
    .unwrap();
    critic.save(dir.join("critic.ckpt")).unwrap();
    for (direction, name) in [(Direction::Attenuate, "attenuate.ckpt"), (Direction::Amplify, "amplify.ckpt")] {
        ParamEstimator::init(EstimatorConfig {
            resolution: 32,
            backbone_channels: [4, 6, 8, 8],
            feature_dim: 12,
            decoder_hidden: 8,
            direction,
            ..EstimatorConfig::default()
        })
        .unwrap()
        .save(dir.join(name))
        .unwrap();
    }
    ForgeConfig {
        models: ModelPaths {
            critic: Some(dir.join("critic.ckpt")),
            attenuate: Some(dir.join("attenuate.ckpt")),
            amplify: Some(dir.join("amplify.ckpt")),
        },
        ..ForgeConfig::default()
    }
}

pub struct Fixture {
    pub dir: TempDir,
    pub config: ForgeConfig,
    pub state: AppState,
}

impl Fixture {
    pub fn new() -> Self {
        Self::with_workers(1)
    }

    pub fn with_workers(workers: usize) -> Self {
        let dir = TempDir::new().unwrap();
        let mut config = write_models(dir.path());
        config.server.job_workers = workers;
        let state = Self::state_for(&config, dir.path());
        Fixture { dir, config, state }
    }

    /// A fresh process view of the same store and checkpoints.
    pub fn restart(&self) -> AppState {
        Self::state_for(&self.config, self.dir.path())
    }

    fn state_for(config: &ForgeConfig, dir: &Path) -> AppState {
        let models = config.load_models().unwrap();
        let store = Store::open(dir.join("home")).unwrap();
        AppState::new(config, models, store)
    }

    pub fn router(&self) -> Router {
        forge_service::router(self.state.clone())
    }
}

pub fn image(index: u64) -> ImageGrid {
    let png = synth_scene(11, index, SIDE).unwrap().image.encode_png().unwrap();
    ImageGrid::decode(&png).unwrap()
}

/// Mask covering the rectangle `[y0, y1) x [x0, x1)`.
pub fn rect_mask(y0: usize, y1: usize, x0: usize, x1: usize) -> RegionMask {
    RegionMask::from_fn(SIDE, SIDE, false, |y, x| ((y0..y1).contains(&y) && (x0..x1).contains(&x)) as u8 as f64).unwrap()
}

pub fn b64_image(img: &ImageGrid) -> String {
    STANDARD.encode(img.encode_png().unwrap())
}

pub fn b64_mask(mask: &RegionMask) -> String {
    STANDARD.encode(mask.encode_png().unwrap())
}

pub fn decode_b64(s: &str) -> Vec<u8> {
    STANDARD.decode(s).unwrap()
}

pub async fn send(router: &Router, request: Request<Body>) -> (StatusCode, Value) {
    let response = router.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    let body = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, body)
}

pub async fn call(router: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let builder = Request::builder().method(method).uri(uri);
    let request = match body {
        Some(v) => builder.header("content-type", "application/json").body(Body::from(v.to_string())).unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    send(router, request).await
}

pub async fn post(router: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    call(router, Method::POST, uri, Some(body)).await
}

pub async fn get(router: &Router, uri: &str) -> (StatusCode, Value) {
    call(router, Method::GET, uri, None).await
}
