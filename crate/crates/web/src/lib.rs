//! wasm-bindgen entry points for the static demo page in `www/`.
//!
//! Every export takes and returns JSON strings; errors surface as JS
//! exceptions carrying the message.

use alfa_core::metrics;
use alfa_core::rtp::{self, RtpConfig};
use alfa_core::synth::{self, SynthConfig};
use alfa_core::PipelineConfig;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

#[derive(Debug, Deserialize)]
pub struct RtpRequest {
    pub normal: Vec<f64>,
    pub abnormal: Vec<f64>,
    pub k: f64,
    pub epsilon: f64,
}

/// Contextual scores and keep decisions for two lists of similarities.
pub fn rtp_filter_json(request: &str) -> Result<String, String> {
    let req: RtpRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    let config = RtpConfig {
        k: req.k,
        epsilon: req.epsilon,
    };
    let selection = rtp::select(&req.normal, &req.abnormal, &config).map_err(|e| e.to_string())?;
    serde_json::to_string(&selection).map_err(|e| e.to_string())
}

#[derive(Debug, Deserialize)]
#[serde(default)]
pub struct MapRequest {
    pub seed: u64,
    pub separation: f64,
    pub ambiguous: bool,
    pub sigma: f64,
    pub adapt: bool,
}

impl Default for MapRequest {
    fn default() -> Self {
        Self {
            seed: 0,
            separation: 1.0,
            ambiguous: false,
            sigma: 1.0,
            adapt: true,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct MapResponse {
    pub height: usize,
    pub width: usize,
    /// Row-major pixel scores in [0, 1].
    pub pixels: Vec<f32>,
    pub mask: Vec<u8>,
    pub score: f64,
    pub global: f64,
    pub max_local: f64,
    pub kept_normal: usize,
    pub kept_abnormal: usize,
    pub pool_size: usize,
}

/// Generates one synthetic defective image and scores it.
pub fn synthetic_map_json(request: &str) -> Result<String, String> {
    let req: MapRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    if !(0.0..=1.0).contains(&req.separation) {
        return Err("separation must be in [0, 1]".into());
    }
    let base = if req.ambiguous {
        SynthConfig::ambiguous()
    } else {
        SynthConfig::default()
    };
    let fixture = synth::synth_fixture(&SynthConfig {
        seed: req.seed,
        separation: req.separation,
        n_normal: 0,
        n_abnormal: 1,
        ..base
    });
    let image = &fixture.images[0];
    let mut config = PipelineConfig::default();
    config.scoring.sigma = req.sigma;
    config.adapt = req.adapt;
    let scored = alfa_core::score_image(image, &fixture.prompts, &config, None)
        .map_err(|e| e.to_string())?;
    let mask = image
        .gt_mask
        .as_ref()
        .map(|m| m.data.clone())
        .unwrap_or_default();
    let response = MapResponse {
        height: scored.map.pixels.height(),
        width: scored.map.pixels.width(),
        pixels: scored.map.pixels.to_f32(),
        mask,
        score: scored.result.score,
        global: scored.result.s_g,
        max_local: scored.result.max_local,
        kept_normal: scored.result.kept.normal,
        kept_abnormal: scored.result.kept.abnormal,
        pool_size: fixture.prompts.prompts.len(),
    };
    serde_json::to_string(&response).map_err(|e| e.to_string())
}

#[derive(Debug, Deserialize)]
pub struct MetricsRequest {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

/// Image-level AUROC, AUPR and F1-max.
pub fn image_metrics_json(request: &str) -> Result<String, String> {
    let req: MetricsRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    let m = metrics::image_metrics(&req.scores, &req.labels).map_err(|e| e.to_string())?;
    serde_json::to_string(&m).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn rtp_filter(request: &str) -> Result<String, JsValue> {
    rtp_filter_json(request).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn synthetic_map(request: &str) -> Result<String, JsValue> {
    synthetic_map_json(request).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn image_metrics(request: &str) -> Result<String, JsValue> {
    image_metrics_json(request).map_err(|e| JsValue::from_str(&e))
}
