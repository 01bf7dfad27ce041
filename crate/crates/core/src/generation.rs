//! Inference-time decoding and evaluation metrics.

use std::collections::HashMap;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{wrap_sequence, Vocabulary, BOS, EOS, PAD};
use crate::encoder::{embed, encoder_forward, EncoderStates};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{argmax, log_softmax};
use crate::outline_decoder::{attend, initial_state, outline_step, output_logits};
use crate::report_decoder::{fuse_news_outline, report_initial_state, report_step};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Beam,
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_width: usize,
    pub temperature: f64,
    pub max_outline_len: usize,
    pub max_report_len: usize,
    pub seed: u64,
    /// Use `z = 0` instead of sampling the prior.
    pub deterministic_latent: bool,
    pub attention: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            beam_width: 4,
            temperature: 1.0,
            max_outline_len: 32,
            max_report_len: 200,
            seed: 0,
            deterministic_latent: true,
            attention: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width < 1 {
            return Err(Error::Invalid("decode.beam_width must be >= 1".into()));
        }
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(Error::Invalid("decode.temperature must be > 0".into()));
        }
        if self.max_outline_len < 1 || self.max_report_len < 1 {
            return Err(Error::Invalid("decode max lengths must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub outline: Vec<String>,
    pub report: Vec<String>,
    pub outline_logprobs: Vec<f64>,
    pub report_logprobs: Vec<f64>,
    /// Attention weights per outline step, row-major.
    pub attention: Option<Vec<Vec<f64>>>,
}

impl GenerationResult {
    pub fn logprob(&self) -> f64 {
        self.outline_logprobs.iter().chain(&self.report_logprobs).sum()
    }
}

/// One line of generation output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub outline: String,
    pub report: String,
    pub logprob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<Vec<f64>>>,
}

impl GenerationRecord {
    pub fn new(id: &str, result: &GenerationResult) -> Self {
        GenerationRecord {
            id: id.to_string(),
            outline: result.outline.join(" "),
            report: result.report.join(" "),
            logprob: result.logprob(),
            attention: result.attention.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis<S> {
    /// Emitted tokens, including a terminal EOS when one was produced.
    pub tokens: Vec<usize>,
    pub logprobs: Vec<f64>,
    pub state: S,
}

impl<S> Hypothesis<S> {
    pub fn total(&self) -> f64 {
        self.logprobs.iter().sum()
    }

    /// Length-normalized log-probability.
    pub fn score(&self) -> f64 {
        if self.tokens.is_empty() {
            0.0
        } else {
            self.total() / self.tokens.len() as f64
        }
    }
}

fn better<S>(a: &Hypothesis<S>, b: &Hypothesis<S>) -> std::cmp::Ordering {
    b.score()
        .total_cmp(&a.score())
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over `step(state, last_token) -> (next_state, log_probs)`.
///
/// Hypotheses are ranked by summed log-probability divided by length; ties
/// go to the lexicographically smaller token sequence. Hypotheses that emit
/// `eos` are retired; the rest are closed at `max_len`.
pub fn beam_search<S, F>(
    init: S,
    start: usize,
    eos: usize,
    width: usize,
    max_len: usize,
    mut step: F,
) -> Result<Hypothesis<S>>
where
    S: Clone,
    F: FnMut(&S, usize) -> Result<(S, Vec<f64>)>,
{
    if width < 1 {
        return Err(Error::Invalid("beam width must be >= 1".into()));
    }
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        logprobs: Vec::new(),
        state: init,
    }];
    let mut finished: Vec<Hypothesis<S>> = Vec::new();
    for _ in 0..max_len {
        let mut expanded: Vec<(S, Vec<f64>)> = Vec::with_capacity(live.len());
        for h in &live {
            let last = h.tokens.last().copied().unwrap_or(start);
            expanded.push(step(&h.state, last)?);
        }
        // (parent, token, normalized score)
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (p, (_, lp)) in expanded.iter().enumerate() {
            let base = live[p].total();
            let len = (live[p].tokens.len() + 1) as f64;
            for (tok, &l) in lp.iter().enumerate() {
                if l.is_finite() {
                    cands.push((p, tok, (base + l) / len));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.2.total_cmp(&a.2).then_with(|| {
                let ta = live[a.0].tokens.iter().chain(std::iter::once(&a.1));
                let tb = live[b.0].tokens.iter().chain(std::iter::once(&b.1));
                ta.cmp(tb)
            })
        });
        cands.truncate(width);
        let mut next = Vec::with_capacity(cands.len());
        for (p, tok, _) in cands {
            let mut tokens = live[p].tokens.clone();
            tokens.push(tok);
            let mut logprobs = live[p].logprobs.clone();
            logprobs.push(expanded[p].1[tok]);
            let h = Hypothesis {
                tokens,
                logprobs,
                state: expanded[p].0.clone(),
            };
            if tok == eos {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    finished.extend(live);
    finished.sort_by(better);
    finished
        .into_iter()
        .next()
        .ok_or_else(|| Error::Invalid("beam search produced no hypothesis".into()))
}

fn greedy_or_sample<S, F>(
    init: S,
    start: usize,
    eos: usize,
    max_len: usize,
    mut rng: Option<&mut ChaCha8Rng>,
    mut step: F,
) -> Result<Hypothesis<S>>
where
    F: FnMut(&S, usize) -> Result<(S, Vec<f64>)>,
{
    let mut h = Hypothesis {
        tokens: Vec::new(),
        logprobs: Vec::new(),
        state: init,
    };
    for _ in 0..max_len {
        let last = h.tokens.last().copied().unwrap_or(start);
        let (state, lp) = step(&h.state, last)?;
        let tok = match rng.as_deref_mut() {
            None => argmax(&lp),
            Some(r) => sample_index(&lp, r),
        };
        h.state = state;
        h.tokens.push(tok);
        h.logprobs.push(lp[tok]);
        if tok == eos {
            break;
        }
    }
    Ok(h)
}

fn sample_index(log_probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, lp) in log_probs.iter().enumerate() {
        if lp.is_finite() {
            acc += lp.exp();
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

fn decode<S: Clone, F>(
    init: S,
    max_len: usize,
    cfg: &DecodeConfig,
    rng: &mut ChaCha8Rng,
    step: F,
) -> Result<Hypothesis<S>>
where
    F: FnMut(&S, usize) -> Result<(S, Vec<f64>)>,
{
    match cfg.strategy {
        Strategy::Greedy => greedy_or_sample(init, BOS, EOS, max_len, None, step),
        Strategy::Sample => greedy_or_sample(init, BOS, EOS, max_len, Some(rng), step),
        Strategy::Beam => beam_search(init, BOS, EOS, cfg.beam_width, max_len, step),
    }
}

/// Temperature-scaled log-distribution with PAD and BOS excluded.
fn scaled_log_probs(mut logits: Vec<f64>, temperature: f64) -> Result<Vec<f64>> {
    logits.iter_mut().for_each(|l| *l /= temperature);
    logits[PAD] = f64::NEG_INFINITY;
    logits[BOS] = f64::NEG_INFINITY;
    log_softmax(&logits)
}

#[derive(Clone)]
struct OutlineState {
    h: Vec<f64>,
    c: Vec<f64>,
    states: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
}

#[derive(Clone)]
struct ReportState {
    h: Vec<f64>,
    c: Vec<f64>,
}

fn strip_eos(tokens: &[usize]) -> &[usize] {
    match tokens.last() {
        Some(&EOS) => &tokens[..tokens.len() - 1],
        _ => tokens,
    }
}

/// Encoder → outline decode → fusion → latent (prior mean or sample) → report decode.
pub fn generate(
    news: &[String],
    vocab: &Vocabulary,
    params: &ModelParams,
    cfg: &DecodeConfig,
) -> Result<GenerationResult> {
    cfg.validate()?;
    if news.is_empty() {
        return Err(Error::Empty("news after tokenization"));
    }
    if vocab.len() != params.dims.vocab {
        return Err(Error::DimensionMismatch {
            context: "vocabulary vs model",
            expected: params.dims.vocab,
            found: vocab.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids = wrap_sequence(&vocab.encode(news), usize::MAX);
    let enc: EncoderStates = encoder_forward(&params.encoder, &ids)?.output;
    let mask = vec![true; enc.len()];
    let op = &params.outline;

    let init = OutlineState {
        h: initial_state(op, &enc),
        c: vec![0.0; op.hidden()],
        states: Vec::new(),
        weights: Vec::new(),
    };
    let outline = decode(init, cfg.max_outline_len, cfg, &mut rng, |s: &OutlineState, last| {
        let x = embed(&[last], &op.embedding)?.remove(0);
        let step = outline_step(op, &x, (&s.h, &s.c))?;
        let att = attend(&enc.states, &step.h, &mask, &op.w_a, &op.w_c)?;
        let lp = scaled_log_probs(output_logits(&att.state, &op.w_o, &op.b_o), cfg.temperature)?;
        let mut next = s.clone();
        next.states.push(step.h.clone());
        next.weights.push(att.weights);
        next.h = step.h;
        next.c = step.c;
        Ok((next, lp))
    })?;

    let u = fuse_news_outline(&enc.states, &outline.state.states)?;
    let rp = &params.report;
    let z: Vec<f64> = if cfg.deterministic_latent {
        vec![0.0; rp.latent_dim()]
    } else {
        (0..rp.latent_dim()).map(|_| rng.sample(StandardNormal)).collect()
    };
    let init = ReportState {
        h: report_initial_state(rp, &z, &u)?,
        c: vec![0.0; rp.hidden()],
    };
    let report = decode(init, cfg.max_report_len, cfg, &mut rng, |s: &ReportState, last| {
        let x = embed(&[last], &rp.embedding)?.remove(0);
        let step = report_step(rp, &x, (&s.h, &s.c))?;
        let lp = scaled_log_probs(output_logits(&step.h, &rp.w_o, &rp.b_o), cfg.temperature)?;
        Ok((ReportState { h: step.h, c: step.c }, lp))
    })?;

    Ok(GenerationResult {
        outline: vocab.decode(strip_eos(&outline.tokens)),
        report: vocab.decode(strip_eos(&report.tokens)),
        outline_logprobs: outline.logprobs,
        report_logprobs: report.logprobs,
        attention: cfg.attention.then_some(outline.state.weights),
    })
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and candidate n-gram totals for n = 1..=max_n,
/// plus the two lengths.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl BleuStats {
    pub fn new(candidate: &[String], reference: &[String], max_n: usize) -> Self {
        let mut matches = Vec::with_capacity(max_n);
        let mut totals = Vec::with_capacity(max_n);
        for n in 1..=max_n {
            let cand = ngram_counts(candidate, n);
            let refc = ngram_counts(reference, n);
            matches.push(
                cand.iter()
                    .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
                    .sum(),
            );
            totals.push(candidate.len().saturating_sub(n - 1));
        }
        BleuStats {
            matches,
            totals,
            candidate_len: candidate.len(),
            reference_len: reference.len(),
        }
    }

    pub fn add(&mut self, other: &BleuStats) {
        if self.matches.is_empty() {
            *self = other.clone();
            return;
        }
        for n in 0..self.matches.len() {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
    }

    /// Modified precisions; add-one smoothing for n ≥ 2.
    pub fn precisions(&self) -> Vec<f64> {
        self.matches
            .iter()
            .zip(&self.totals)
            .enumerate()
            .map(|(i, (&m, &t))| {
                if i == 0 {
                    if t == 0 {
                        0.0
                    } else {
                        m as f64 / t as f64
                    }
                } else {
                    (m as f64 + 1.0) / (t as f64 + 1.0)
                }
            })
            .collect()
    }

    pub fn brevity_penalty(&self) -> f64 {
        let (c, r) = (self.candidate_len as f64, self.reference_len as f64);
        if c == 0.0 {
            0.0
        } else if c > r {
            1.0
        } else {
            (1.0 - r / c).exp()
        }
    }

    pub fn score(&self) -> f64 {
        let p = self.precisions();
        if p.is_empty() || p.iter().any(|&x| x == 0.0) {
            return 0.0;
        }
        let log_mean = p.iter().map(|x| x.ln()).sum::<f64>() / p.len() as f64;
        self.brevity_penalty() * log_mean.exp()
    }
}

/// Sentence BLEU with add-one smoothing on the n ≥ 2 precisions.
pub fn bleu(candidate: &[String], reference: &[String], max_n: usize) -> f64 {
    if candidate.is_empty() {
        warn!("empty candidate; BLEU is 0");
        return 0.0;
    }
    BleuStats::new(candidate, reference, max_n).score()
}

/// Corpus BLEU from pooled n-gram statistics.
pub fn corpus_bleu(pairs: &[(Vec<String>, Vec<String>)], max_n: usize) -> f64 {
    let mut total = BleuStats::default();
    for (c, r) in pairs {
        total.add(&BleuStats::new(c, r, max_n));
    }
    total.score()
}

/// `1 − distinct n-grams / total n-grams`.
pub fn repetition_rate(tokens: &[String], n: usize) -> f64 {
    if n == 0 || tokens.len() < n {
        warn!("sequence shorter than n = {n}; repetition rate is 0");
        return 0.0;
    }
    let total = tokens.len() - n + 1;
    let distinct = ngram_counts(tokens, n).len();
    1.0 - distinct as f64 / total as f64
}
