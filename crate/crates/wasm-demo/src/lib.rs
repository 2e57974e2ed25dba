//! WebAssembly bindings for the browser demo in `www/`. Each export takes
//! plain numbers or a JSON request and returns a JSON string.

pub mod demo;

use wasm_bindgen::prelude::*;

fn to_js<T: serde::Serialize>(value: Result<T, demo::DemoError>) -> Result<String, JsError> {
    let value = value.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

/// Consecutive synthetic windows for plotting.
#[wasm_bindgen]
pub fn preview(seed: u32, storm_rate: f64, windows: u32) -> Result<String, JsError> {
    to_js(demo::preview(seed as u64, storm_rate, windows as usize))
}

/// `β_t` and `ᾱ_t` of the noise schedule.
#[wasm_bindgen]
pub fn schedule(steps: u32, beta_min: f64, beta_max: f64) -> Result<String, JsError> {
    to_js(demo::schedule(steps as usize, beta_min, beta_max))
}

/// Runs a calibration from a JSON-encoded request; missing fields take
/// their defaults.
#[wasm_bindgen]
pub fn conformal(request: &str) -> Result<String, JsError> {
    let defaults = serde_json::to_value(demo::ConformalRequest::default()).map_err(|e| JsError::new(&e.to_string()))?;
    let mut merged = defaults;
    let given: serde_json::Value = serde_json::from_str(request).map_err(|e| JsError::new(&e.to_string()))?;
    if let (Some(base), serde_json::Value::Object(over)) = (merged.as_object_mut(), given) {
        base.extend(over);
    }
    let req: demo::ConformalRequest = serde_json::from_value(merged).map_err(|e| JsError::new(&e.to_string()))?;
    to_js(demo::conformal(&req))
}
