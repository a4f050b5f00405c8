//! Browser bindings for the demo page: mask plans, positional-encoding
//! tables and instance-normalized patches.
//!
//! The `*_json` functions are plain Rust so they can be tested natively;
//! the `#[wasm_bindgen]` wrappers only convert errors to JS strings.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use crossmae::masking::{make_plan, segment_length, MaskStrategy};
use crossmae::series::{instance_normalize, patchify, pe_table, Split, WindowSample};

#[derive(Serialize)]
struct MaskView {
    strategy: String,
    n: usize,
    ratio: f64,
    segment: Option<usize>,
    masked: Vec<usize>,
    visible: Vec<usize>,
}

pub fn mask_plan_json(strategy: &str, n: usize, ratio: f64, seed: u64) -> Result<String, String> {
    let strategy: MaskStrategy = strategy.parse().map_err(|e: crossmae::Error| e.to_string())?;
    let plan = make_plan(strategy, n, ratio, seed).map_err(|e| e.to_string())?;
    let segment = match strategy {
        MaskStrategy::Isometric | MaskStrategy::Periodic => segment_length(ratio).ok(),
        _ => None,
    };
    let view = MaskView {
        strategy: strategy.to_string(),
        n,
        ratio,
        segment,
        masked: plan.masked,
        visible: plan.visible,
    };
    Ok(serde_json::to_string(&view).expect("view serializes"))
}

/// Row-major `[n, d]` sinusoidal positional encodings.
pub fn pe_table_values(n: usize, d: usize) -> Result<Vec<f64>, String> {
    pe_table(0..n, d).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct PatchView {
    mean: f64,
    std: f64,
    normalized: Vec<f64>,
    patches: Vec<Vec<f64>>,
}

pub fn normalize_patches_json(values: &[f64], patch: usize) -> Result<String, String> {
    if values.is_empty() {
        return Err("no values".into());
    }
    let w = WindowSample {
        history: values.to_vec(),
        future: Vec::new(),
        channel: 0,
        split: Split::Test,
        origin: 0,
        revin_mean: 0.0,
        revin_std: 1.0,
    };
    let n = instance_normalize(&w);
    let patches = patchify(&n.history, patch).map_err(|e| e.to_string())?;
    let view = PatchView {
        mean: n.revin_mean,
        std: n.revin_std,
        normalized: n.history,
        patches,
    };
    Ok(serde_json::to_string(&view).expect("view serializes"))
}

#[wasm_bindgen]
pub fn mask_plan(strategy: &str, n: usize, ratio: f64, seed: u32) -> Result<String, JsValue> {
    mask_plan_json(strategy, n, ratio, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn positional_encoding(n: usize, d: usize) -> Result<Vec<f64>, JsValue> {
    pe_table_values(n, d).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn normalize_patches(values: &[f64], patch: usize) -> Result<String, JsValue> {
    normalize_patches_json(values, patch).map_err(|e| JsValue::from_str(&e))
}
