//! Overfitting runs and the outline-vs-baseline comparison.

use std::fmt;

use crate::corpus::{build_vocabulary, derive_outlines, NewsReportPair, Vocabulary};
use crate::error::{Error, Result};
use crate::generation::{bleu, corpus_bleu, generate, repetition_rate, DecodeConfig};
use crate::model::ModelParams;
use crate::training::{evaluate_loss, TrainEvent, TrainingConfig, TrainingState};

/// Settings that let the toy corpus be memorised quickly on one core.
pub fn toy_config() -> TrainingConfig {
    TrainingConfig {
        learning_rate: 5e-3,
        batch_size: 2,
        kl_anneal_steps: 200,
        d_emb: 32,
        d_hid: 48,
        d_z: 8,
        seed: 7,
        ..TrainingConfig::default()
    }
}

/// Settings for the synthetic comparison run.
pub fn comparison_config() -> TrainingConfig {
    TrainingConfig {
        learning_rate: 1e-2,
        batch_size: 8,
        kl_anneal_steps: 200,
        d_emb: 32,
        d_hid: 32,
        d_z: 8,
        ..TrainingConfig::default()
    }
}

/// Decode lengths at twice the longest training report and outline.
pub fn decode_config_for(pairs: &[NewsReportPair]) -> DecodeConfig {
    let longest = pairs.iter().map(|p| p.report.len()).max().unwrap_or(0);
    let outline = pairs
        .iter()
        .filter_map(|p| p.outline.as_ref().map(Vec::len))
        .max()
        .unwrap_or(0);
    DecodeConfig {
        max_report_len: (2 * longest).max(1),
        max_outline_len: (2 * outline).max(1),
        ..DecodeConfig::default()
    }
}

#[derive(Clone, Debug)]
pub struct OverfitOutcome {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs: u64,
    pub exact_matches: usize,
    pub total: usize,
    pub params: ModelParams,
}

/// Trains until the deterministic corpus loss drops below `target_ratio` of
/// its initial value (checked every `check_every` epochs) or `max_epochs`.
pub fn overfit(
    mut pairs: Vec<NewsReportPair>,
    config: TrainingConfig,
    max_epochs: u64,
    target_ratio: f64,
    check_every: u64,
) -> Result<OverfitOutcome> {
    derive_outlines(&mut pairs, config.outline_k);
    let vocab = build_vocabulary(&pairs, 1, usize::MAX)?;
    let mut state = TrainingState::new(config.clone(), vocab.len())?;
    let eval = |p: &ModelParams| {
        evaluate_loss(p, &pairs, &vocab, config.caps, 1.0, config.outline_weight).map(|r| r.model)
    };
    let initial_loss = eval(&state.params)?;
    let mut final_loss = initial_loss;
    let check_every = check_every.max(1);
    while state.epoch < max_epochs {
        let next = (state.epoch + check_every).min(max_epochs);
        state.train(&pairs, &vocab, next, None, &mut |_| {})?;
        final_loss = eval(&state.params)?;
        if final_loss < target_ratio * initial_loss {
            break;
        }
    }
    let cfg = decode_config_for(&pairs);
    let mut exact_matches = 0;
    for p in &pairs {
        if generate(&p.news, &vocab, &state.params, &cfg)?.report == p.report {
            exact_matches += 1;
        }
    }
    Ok(OverfitOutcome {
        initial_loss,
        final_loss,
        epochs: state.epoch,
        exact_matches,
        total: pairs.len(),
        params: state.params,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub system: String,
    pub outline_weight: f64,
    pub train_report_loss: f64,
    pub sentence_bleu: f64,
    pub corpus_bleu: f64,
    pub bigram_repetition: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub epochs: u64,
    pub reference_repetition: f64,
    pub rows: Vec<ComparisonRow>,
}

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "train={} test={} epochs={} reference bigram repetition={:.4}",
            self.train_pairs, self.test_pairs, self.epochs, self.reference_repetition
        )?;
        writeln!(
            f,
            "{:<12} {:>8} {:>12} {:>10} {:>11} {:>10}",
            "system", "w_outl", "train_L_rep", "sent_bleu", "corpus_bleu", "rep_2"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<12} {:>8.2} {:>12.4} {:>10.4} {:>11.4} {:>10.4}",
                r.system, r.outline_weight, r.train_report_loss, r.sentence_bleu, r.corpus_bleu, r.bigram_repetition
            )?;
        }
        Ok(())
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn evaluate_system(
    name: &str,
    train: &[NewsReportPair],
    test: &[NewsReportPair],
    vocab: &Vocabulary,
    config: TrainingConfig,
    epochs: u64,
) -> Result<ComparisonRow> {
    let mut state = TrainingState::new(config.clone(), vocab.len())?;
    let mut last = f64::NAN;
    state.train(train, vocab, epochs, None, &mut |e| {
        if let TrainEvent::Epoch(r) = e {
            last = r.report;
        }
    })?;
    let cfg = decode_config_for(train);
    let mut outputs = Vec::with_capacity(test.len());
    for p in test {
        outputs.push((generate(&p.news, vocab, &state.params, &cfg)?.report, p.report.clone()));
    }
    Ok(ComparisonRow {
        system: name.to_string(),
        outline_weight: config.outline_weight,
        train_report_loss: last,
        sentence_bleu: mean(outputs.iter().map(|(c, r)| bleu(c, r, 4))),
        corpus_bleu: corpus_bleu(&outputs, 4),
        bigram_repetition: mean(outputs.iter().map(|(c, _)| repetition_rate(c, 2))),
    })
}

/// Trains the two-stage model and the zero-outline-weight baseline on the
/// same split and vocabulary, then scores greedy outputs on held-out pairs.
pub fn run_comparison(
    mut pairs: Vec<NewsReportPair>,
    test_fraction: f64,
    config: TrainingConfig,
    epochs: u64,
) -> Result<ComparisonTable> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Invalid("test fraction must be in [0, 1)".into()));
    }
    derive_outlines(&mut pairs, config.outline_k);
    let n_test = ((pairs.len() as f64) * test_fraction).round() as usize;
    let n_test = n_test.clamp(1, pairs.len().saturating_sub(1).max(1));
    let (train, test) = pairs.split_at(pairs.len() - n_test);
    let vocab = build_vocabulary(train, 1, usize::MAX)?;
    let two_stage = TrainingConfig {
        outline_weight: 1.0,
        ..config.clone()
    };
    let baseline = TrainingConfig {
        outline_weight: 0.0,
        ..config
    };
    Ok(ComparisonTable {
        train_pairs: train.len(),
        test_pairs: test.len(),
        epochs,
        reference_repetition: mean(test.iter().map(|p| repetition_rate(&p.report, 2))),
        rows: vec![
            evaluate_system("two-stage", train, test, &vocab, two_stage, epochs)?,
            evaluate_system("baseline", train, test, &vocab, baseline, epochs)?,
        ],
    })
}
