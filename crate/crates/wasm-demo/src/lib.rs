//! Browser bindings. Every function takes plain numbers or a JSON string and
//! returns a JSON string, so the page needs no generated TypeScript types.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use scmd_core::autodiff::softmax_t;
use scmd_core::selection::select_hard;
use scmd_core::theory::{check_mixture, AlphaRegime, MixtureConfig};

fn err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn numbers(text: &str) -> Result<Vec<f64>, JsValue> {
    let v: Vec<f64> = serde_json::from_str(text).map_err(err)?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(err("all values must be finite"));
    }
    Ok(v)
}

/// Tempered softmax of a JSON array of logits.
pub fn tempered(logits: &str, t: f64) -> Result<String, String> {
    let z: Vec<f64> = serde_json::from_str(logits).map_err(|e| e.to_string())?;
    let p = softmax_t(&z, t).map_err(|e| e.to_string())?;
    let entropy: f64 = -p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|x| x * x.ln())
        .sum::<f64>();
    Ok(json!({ "probs": p, "entropy": entropy }).to_string())
}

/// Which rows of a batch the hard selector keeps for a given ratio.
pub fn hard_select(scores: &str, rho: f64) -> Result<String, String> {
    let s: Vec<f64> = serde_json::from_str(scores).map_err(|e| e.to_string())?;
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(format!("rho must be in (0, 1], got {rho}"));
    }
    let kept = select_hard(&s, rho);
    Ok(json!({ "kept": kept, "size": kept.len(), "batch": s.len() }).to_string())
}

/// Mixture-family selection diagnostic for fixed mixture weights.
pub fn mixture_diagnostic(
    alphas: &str,
    support: usize,
    trials: usize,
    seed: u64,
) -> Result<String, String> {
    let a: Vec<f64> = serde_json::from_str(alphas).map_err(|e| e.to_string())?;
    if a.is_empty() || a.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err("weights must be a non-empty list in [0, 1]".into());
    }
    let cfg = MixtureConfig {
        members: a.len(),
        support,
        trials,
        regime: AlphaRegime::Fixed(a),
    };
    let r = check_mixture(&cfg, seed).map_err(|e| e.to_string())?;
    let v: Value = serde_json::to_value(&r).map_err(|e| e.to_string())?;
    Ok(v.to_string())
}

#[wasm_bindgen(js_name = tempered)]
pub fn tempered_js(logits: &str, t: f64) -> Result<String, JsValue> {
    numbers(logits)?;
    tempered(logits, t).map_err(err)
}

#[wasm_bindgen(js_name = hardSelect)]
pub fn hard_select_js(scores: &str, rho: f64) -> Result<String, JsValue> {
    numbers(scores)?;
    hard_select(scores, rho).map_err(err)
}

#[wasm_bindgen(js_name = mixtureDiagnostic)]
pub fn mixture_diagnostic_js(
    alphas: &str,
    support: usize,
    trials: usize,
    seed: u32,
) -> Result<String, JsValue> {
    mixture_diagnostic(alphas, support, trials.min(20_000), u64::from(seed)).map_err(err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outputs_parse() {
        let v: Value = serde_json::from_str(&tempered("[1, 2, 3]", 2.0).unwrap()).unwrap();
        let s: f64 = v["probs"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .sum();
        assert!((s - 1.0).abs() < 1e-12);

        let v: Value =
            serde_json::from_str(&hard_select("[0.1, 0.9, 0.5, 0.2]", 0.5).unwrap()).unwrap();
        assert_eq!(v["kept"], json!([1, 2]));

        let v: Value =
            serde_json::from_str(&mixture_diagnostic("[0.1, 0.2, 0.9]", 8, 20, 3).unwrap())
                .unwrap();
        assert!(v["e_tv_s1"].as_f64().unwrap() >= 0.0);
    }

    #[test]
    fn bad_input_is_an_error() {
        assert!(tempered("[1, 2]", 0.0).is_err());
        assert!(tempered("nope", 1.0).is_err());
        assert!(hard_select("[1]", 1.5).is_err());
        assert!(mixture_diagnostic("[2.0]", 8, 10, 0).is_err());
    }
}
