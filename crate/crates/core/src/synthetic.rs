//! Bundled toy corpus and a generator for hierarchical synthetic data.
//!
//! The generator first draws a keyword skeleton (company, metric, direction,
//! driver, outlook) and then expands each keyword into a templated sentence,
//! so reports are long but fully determined by a short plan. The skeleton is
//! stored as the gold outline.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{pairs_from_records, parse_records, tokenize, NewsReportPair};
use crate::error::Result;

const TOY: &str = include_str!("../data/toy.jsonl");

/// Ten short news/report pairs used for overfitting checks.
pub fn toy_corpus() -> Result<Vec<NewsReportPair>> {
    pairs_from_records(&parse_records(TOY.as_bytes())?)
}

const COMPANIES: &[&str] = &[
    "acme", "globex", "initech", "umbrella", "hooli", "vandelay", "stark", "wayne", "wonka",
    "tyrell", "cyberdyne", "soylent",
];
const METRICS: &[&str] = &["revenue", "profit", "sales", "margin", "orders"];
const DRIVERS: &[&str] = &["cloud", "pricing", "exports", "costs", "demand", "currency"];
const OUTLOOKS: &[&str] = &["raised", "kept", "cut"];

fn driver_sentence(driver: &str, up: bool) -> String {
    let tone = if up { "helped" } else { "hurt" };
    match driver {
        "cloud" => format!("management said that its cloud unit {tone} results as large customers moved more work online ."),
        "pricing" => format!("executives said that new pricing {tone} results across every region during the period ."),
        "exports" => format!("the company said that exports {tone} results because shipments abroad changed sharply ."),
        "costs" => format!("the company said that input costs {tone} results as suppliers changed their terms ."),
        "demand" => format!("managers said that consumer demand {tone} results in both home and overseas markets ."),
        _ => format!("the company said that currency moves {tone} results when earnings were converted back home ."),
    }
}

fn outlook_sentence(outlook: &str) -> &'static str {
    match outlook {
        "raised" => "looking ahead , the board raised its forecast for the full year and plans to hire more staff .",
        "kept" => "looking ahead , the board kept its forecast for the full year and will review it next quarter .",
        _ => "looking ahead , the board cut its forecast for the full year and will slow new spending .",
    }
}

/// `n` pairs with gold outlines, deterministic in `seed`.
pub fn hierarchical_corpus(n: usize, seed: u64) -> Vec<NewsReportPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let company = *COMPANIES.choose(&mut rng).expect("non-empty");
            let metric = *METRICS.choose(&mut rng).expect("non-empty");
            let up = rng.random_bool(0.5);
            let direction = if up { "rose" } else { "fell" };
            let driver = *DRIVERS.choose(&mut rng).expect("non-empty");
            let outlook = *OUTLOOKS.choose(&mut rng).expect("non-empty");
            let pct = rng.random_range(2..30);
            let news = format!("{company} {metric} {direction} {pct} percent on {driver} , outlook {outlook}");
            let report = format!(
                "{company} said on monday that quarterly {metric} {direction} by {pct} percent compared with a year earlier . \
                 {} {}",
                driver_sentence(driver, up),
                outlook_sentence(outlook),
            );
            NewsReportPair {
                id: format!("syn-{i:04}"),
                news: tokenize(&news),
                report: tokenize(&report),
                outline: Some(tokenize(&format!("{company} {metric} {direction} {driver} {outlook}"))),
            }
        })
        .collect()
}
