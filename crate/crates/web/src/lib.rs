//! wasm-bindgen bindings for the static demo page in `www/`.
//!
//! Every export takes plain values and returns a JSON string, or throws a
//! string error. The toy model is rebuilt per call; it is small enough.

use anchored_decoding::analysis::dilution_curve;
use anchored_decoding::anchoring::{combine_confidence, combine_fixed, resolve_anchors, AnchoringConfig, Markup};
use anchored_decoding::backend::{softmax, Backend, ScoreRequest, ToyModel, ToyModelConfig};
use anchored_decoding::decoding::{
    anchored_decode_tokens, beam_search_anchored, greedy_decode, DecodeLimits,
};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn model(seed: u64, vocab: usize) -> Result<ToyModel, String> {
    ToyModel::new(ToyModelConfig {
        seed,
        vocab_size: vocab,
        ..ToyModelConfig::reference()
    })
    .map_err(|e| e.to_string())
}

fn config(omega: f64, lambda: Option<f64>) -> AnchoringConfig {
    match lambda {
        Some(l) => AnchoringConfig::confidence(l),
        None => AnchoringConfig::fixed(omega),
    }
}

fn prepare(m: &ToyModel, prompt: &str) -> Result<(Vec<u32>, anchored_decoding::anchoring::AnchorResolution), String> {
    let vocab = m.vocabulary().ok_or("toy model has no vocabulary")?;
    let spec = Markup::default().parse(prompt).map_err(|e| e.to_string())?;
    resolve_anchors(&spec, vocab).map_err(|e| e.to_string())
}

/// Next-token logits for the original, masked and augmented contexts.
pub fn augment_json(seed: u64, vocab: usize, prompt: &str, omega: f64, lambda: Option<f64>) -> Result<Value, String> {
    let m = model(seed, vocab)?;
    let (tokens, res) = prepare(&m, prompt)?;
    let original = m.score(&ScoreRequest::new(&tokens)).map_err(|e| e.to_string())?.logits.to_dense(vocab);
    let masked = m
        .score(&ScoreRequest::new(&tokens).masked(&res.token_positions))
        .map_err(|e| e.to_string())?
        .logits
        .to_dense(vocab);
    let augmented = match lambda {
        Some(l) => combine_confidence(&original, &masked, l),
        None => combine_fixed(&original, &masked, omega),
    }
    .map_err(|e| e.to_string())?;
    let vocab = m.vocabulary().expect("toy vocabulary");
    let labels: Vec<String> = (0..original.len() as u32)
        .map(|i| vocab.token_str(i).unwrap_or("?").to_string())
        .collect();
    Ok(json!({
        "labels": labels,
        "anchored_positions": res.token_positions,
        "original": softmax(&original),
        "masked": softmax(&masked),
        "augmented": softmax(&augmented),
    }))
}

/// Attention-to-prompt ratio per step of a baseline and an anchored decode.
pub fn dilution_json(seed: u64, vocab: usize, prompt: &str, omega: f64, max_new: usize) -> Result<Value, String> {
    let m = model(seed, vocab)?;
    let (tokens, res) = prepare(&m, prompt)?;
    let limits = DecodeLimits::new(max_new).with_attention();
    let base = greedy_decode(&m, &tokens, &limits).map_err(|e| e.to_string())?;
    let curve = |t| dilution_curve(t).map(|c| c.alphas).map_err(|e| e.to_string());
    let mut out = json!({
        "prompt_length": tokens.len(),
        "baseline": curve(&base)?,
        "baseline_text": m.vocabulary().unwrap().decode(&base.tokens()),
    });
    if !res.is_empty() {
        let anchored = anchored_decode_tokens(&m, &tokens, &res, &config(omega, None), &limits)
            .map_err(|e| e.to_string())?;
        out["anchored"] = json!(curve(&anchored)?);
        out["anchored_text"] = json!(m.vocabulary().unwrap().decode(&anchored.tokens()));
    }
    Ok(out)
}

/// Anchored beam search candidates.
pub fn beam_json(seed: u64, vocab: usize, prompt: &str, omega: f64, width: usize, max_new: usize) -> Result<Value, String> {
    let m = model(seed, vocab)?;
    let (tokens, res) = prepare(&m, prompt)?;
    let cfg = if res.is_empty() { AnchoringConfig::off() } else { config(omega, None) };
    let beams = beam_search_anchored(&m, &tokens, &res, &cfg, width, &DecodeLimits::new(max_new))
        .map_err(|e| e.to_string())?;
    let v = m.vocabulary().unwrap();
    Ok(json!(beams
        .iter()
        .map(|b| json!({"text": v.decode(&b.tokens), "tokens": b.tokens, "score": b.score, "finished": b.finished}))
        .collect::<Vec<_>>()))
}

fn js(r: Result<Value, String>) -> Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

/// `lambda` < 0 selects fixed mode with `omega`.
#[wasm_bindgen]
pub fn augment(seed: u32, vocab: usize, prompt: &str, omega: f64, lambda: f64) -> Result<String, JsValue> {
    js(augment_json(seed as u64, vocab, prompt, omega, (lambda >= 0.0).then_some(lambda)))
}

#[wasm_bindgen]
pub fn dilution(seed: u32, vocab: usize, prompt: &str, omega: f64, max_new: usize) -> Result<String, JsValue> {
    js(dilution_json(seed as u64, vocab, prompt, omega, max_new))
}

#[wasm_bindgen]
pub fn beam(seed: u32, vocab: usize, prompt: &str, omega: f64, width: usize, max_new: usize) -> Result<String, JsValue> {
    js(beam_json(seed as u64, vocab, prompt, omega, width, max_new))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn augment_returns_distributions() {
        let v = augment_json(7, 64, "ab⟦cd⟧e", 1.5, None).unwrap();
        let sum: f64 = v["augmented"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert_eq!(v["anchored_positions"], json!([2, 3]));
    }

    #[test]
    fn omega_one_matches_original() {
        let v = augment_json(7, 64, "⟦ab⟧", 1.0, None).unwrap();
        assert_eq!(v["original"], v["augmented"]);
    }

    #[test]
    fn dilution_starts_at_one() {
        let v = dilution_json(7, 64, "x⟦y⟧", 1.3, 5).unwrap();
        assert_eq!(v["baseline"][0].as_f64(), Some(1.0));
        assert!(v["anchored"].is_array());
    }

    #[test]
    fn beam_is_sorted() {
        let v = beam_json(7, 64, "a⟦b⟧", 1.2, 3, 4).unwrap();
        let scores: Vec<f64> = v.as_array().unwrap().iter().map(|c| c["score"].as_f64().unwrap()).collect();
        assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn errors_are_strings() {
        assert!(augment_json(7, 64, "⟦unterminated", 1.5, None).is_err());
    }
}
