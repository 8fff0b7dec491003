//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each exported function returns a JSON string; the page parses it and
//! draws the result. The plain functions in [`demo`] do the work and are
//! what the native tests call.

use wasm_bindgen::prelude::*;

pub mod demo;

fn js_err(e: String) -> JsValue {
    JsValue::from_str(&e)
}

/// Severity level for one patient plus the level of every left/right pairing.
#[wasm_bindgen]
pub fn severity(
    left_drusen: u8,
    left_pigment: u8,
    left_late: u8,
    right_drusen: u8,
    right_pigment: u8,
    right_late: u8,
) -> Result<String, JsValue> {
    demo::severity([left_drusen, left_pigment, left_late], [right_drusen, right_pigment, right_late])
        .and_then(demo::to_json)
        .map_err(js_err)
}

/// Two-sided rank-sum test on two lists of numbers (comma or space separated).
#[wasm_bindgen]
pub fn rank_sum(x: &str, y: &str) -> Result<String, JsValue> {
    demo::rank_sum(x, y).and_then(demo::to_json).map_err(js_err)
}

/// Simulates a reader study's grading times and fits the random-intercept model.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn timing_fit(
    clinicians: u32,
    cases_per_cell: u32,
    clinician_sd: f64,
    residual_sd: f64,
    ai_effect_1: f64,
    ai_effect_2: f64,
    ai_effect_3: f64,
    ai_effect_4: f64,
    seed: u32,
) -> Result<String, JsValue> {
    let params = demo::TimingParams {
        clinicians: clinicians as usize,
        cases_per_cell: cases_per_cell as usize,
        clinician_sd,
        residual_sd,
        ai_effect: [ai_effect_1, ai_effect_2, ai_effect_3, ai_effect_4],
        seed: u64::from(seed),
    };
    demo::timing_fit(&params).and_then(demo::to_json).map_err(js_err)
}
