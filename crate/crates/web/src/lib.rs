//! WebAssembly bindings for the demo page in `www/`.

use o2r::corpus::tokenize;
use o2r::generation::{bleu, repetition_rate, BleuStats};
use o2r::numerics::Tensor;
use o2r::outline_decoder::attend;
use o2r::report_decoder::gaussian_kl;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Attention weights for `steps` decoder states over `sources` encoder
/// states, row-major. The last `masked` source positions are padding.
/// `sharpness` scales the bilinear score matrix.
pub fn attention_weights(
    seed: u64,
    sources: usize,
    steps: usize,
    masked: usize,
    hidden: usize,
    sharpness: f64,
) -> Result<Vec<f64>, String> {
    if sources == 0 || steps == 0 || hidden == 0 {
        return Err("sizes must be positive".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states: Vec<Vec<f64>> = (0..sources)
        .map(|_| (0..2 * hidden).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let w_a = Tensor::uniform(&[2 * hidden, hidden], sharpness.abs(), &mut rng);
    let w_c = Tensor::uniform_fan_in(&[hidden, 3 * hidden], &mut rng);
    let mask: Vec<bool> = (0..sources).map(|j| j + masked < sources).collect();
    let mut out = Vec::with_capacity(steps * sources);
    for _ in 0..steps {
        let s: Vec<f64> = (0..hidden).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = attend(&states, &s, &mask, &w_a, &w_c).map_err(|e| e.to_string())?;
        out.extend(a.weights);
    }
    Ok(out)
}

#[wasm_bindgen(js_name = attentionHeatmap)]
pub fn attention_heatmap(
    seed: u32,
    sources: usize,
    steps: usize,
    masked: usize,
    sharpness: f64,
) -> Result<Vec<f64>, JsError> {
    attention_weights(seed as u64, sources, steps, masked, 8, sharpness).map_err(|e| JsError::new(&e))
}

/// KL divergence of N(mu, exp(log_var)) from N(0, 1), one dimension.
#[wasm_bindgen(js_name = klValue)]
pub fn kl_value(mu: f64, log_var: f64) -> f64 {
    gaussian_kl(&[mu], &[log_var])
}

/// KL over an `n × n` grid, rows over log-variance, columns over the mean.
#[wasm_bindgen(js_name = klGrid)]
pub fn kl_grid(mu_range: f64, log_var_range: f64, n: usize) -> Vec<f64> {
    let at = |i: usize, r: f64| {
        if n < 2 {
            0.0
        } else {
            -r + 2.0 * r * i as f64 / (n - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            out.push(kl_value(at(col, mu_range), at(row, log_var_range)));
        }
    }
    out
}

/// Sentence-level BLEU breakdown and bigram repetition, as JSON text.
pub fn score_json(candidate: &str, reference: &str) -> String {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    let stats = BleuStats::new(&c, &r, 4);
    json!({
        "bleu": bleu(&c, &r, 4),
        "precisions": stats.precisions(),
        "matches": stats.matches,
        "totals": stats.totals,
        "brevity_penalty": stats.brevity_penalty(),
        "candidate_tokens": c,
        "reference_tokens": r,
        "repetition_candidate": repetition_rate(&c, 2),
        "repetition_reference": repetition_rate(&r, 2),
    })
    .to_string()
}

#[wasm_bindgen(js_name = scoreText)]
pub fn score_text(candidate: &str, reference: &str) -> String {
    score_json(candidate, reference)
}
