//! Tokenization, vocabulary, silver outlines and padded batches.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Word,
    Digit,
    Other,
}

fn classify(c: char) -> CharClass {
    if c.is_numeric() {
        CharClass::Digit
    } else if c.is_alphabetic() || c == '_' {
        CharClass::Word
    } else {
        CharClass::Other
    }
}

/// Lowercases, splits on whitespace, then separates letter runs, digit runs
/// and individual punctuation characters.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let lower = chunk.to_lowercase();
        let mut cur = String::new();
        let mut cur_class = None;
        for c in lower.chars() {
            let class = classify(c);
            if class == CharClass::Other {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
                cur_class = None;
                continue;
            }
            if cur_class != Some(class) && !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            cur.push(c);
            cur_class = Some(class);
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

fn is_special(token: &str) -> bool {
    SPECIALS.contains(&token)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from corpus tokens, prepending the specials.
    pub fn from_tokens<I: IntoIterator<Item = String>>(corpus_tokens: I) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for t in corpus_tokens {
            if is_special(&t) {
                return Err(Error::Invalid(format!("reserved token {t:?} in vocabulary")));
            }
            tokens.push(t);
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK]).to_string())
            .collect()
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIALS.len() || lines[..4] != SPECIALS {
            return Err(Error::Invalid(
                "vocabulary file must start with <pad>, <bos>, <eos>, <unk>".into(),
            ));
        }
        Self::from_tokens(lines[4..].iter().map(|s| s.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// SHA-256 of the on-disk text form, hex encoded.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NewsReportPair {
    pub id: String,
    pub news: Vec<String>,
    pub report: Vec<String>,
    pub outline: Option<Vec<String>>,
}

/// One line of a JSON-lines dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub news: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outline: Option<String>,
}

pub fn parse_records<R: Read>(reader: R) -> Result<Vec<DatasetRecord>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line).map_err(|e| Error::Dataset {
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<DatasetRecord>> {
    parse_records(fs::File::open(path)?)
}

/// Tokenizes records into training pairs. Every record needs a non-empty
/// news and report text; missing outlines stay `None`.
pub fn pairs_from_records(records: &[DatasetRecord]) -> Result<Vec<NewsReportPair>> {
    records
        .iter()
        .enumerate()
        .map(|(n, r)| {
            let news = tokenize(&r.news);
            let report = tokenize(r.report.as_deref().unwrap_or(""));
            if news.is_empty() || report.is_empty() {
                return Err(Error::Dataset {
                    line: n + 1,
                    message: format!("record {:?} needs non-empty news and report", r.id),
                });
            }
            Ok(NewsReportPair {
                id: r.id.clone(),
                news,
                report,
                outline: r.outline.as_deref().map(tokenize),
            })
        })
        .collect()
}

pub fn read_pairs(path: &Path) -> Result<Vec<NewsReportPair>> {
    pairs_from_records(&read_records(path)?)
}

/// Token counts over news and reports.
pub fn token_counts(pairs: &[NewsReportPair]) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for p in pairs {
        for t in p.news.iter().chain(&p.report) {
            *counts.entry(t.clone()).or_insert(0) += 1;
        }
    }
    counts
}

pub fn build_vocabulary(
    pairs: &[NewsReportPair],
    min_freq: usize,
    max_size: usize,
) -> Result<Vocabulary> {
    if pairs.is_empty() {
        return Err(Error::Empty("pairs"));
    }
    if min_freq < 1 || max_size <= SPECIALS.len() {
        return Err(Error::Invalid(format!(
            "need min_freq >= 1 and max_size > 4 (got {min_freq}, {max_size})"
        )));
    }
    let mut kept: Vec<(String, usize)> = token_counts(pairs)
        .into_iter()
        .filter(|(t, c)| *c >= min_freq && !is_special(t))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    kept.truncate(max_size - SPECIALS.len());
    if kept.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t))
}

/// Report document frequencies for the TF-IDF outline heuristic.
#[derive(Clone, Debug, Default)]
pub struct DocumentFrequencies {
    pub documents: usize,
    pub df: HashMap<String, usize>,
}

impl DocumentFrequencies {
    pub fn from_reports<'a, I: IntoIterator<Item = &'a [String]>>(reports: I) -> Self {
        let mut stats = DocumentFrequencies::default();
        for r in reports {
            stats.documents += 1;
            let distinct: HashSet<&String> = r.iter().collect();
            for t in distinct {
                *stats.df.entry(t.clone()).or_insert(0) += 1;
            }
        }
        stats
    }

    pub fn idf(&self, token: &str) -> f64 {
        let df = self.df.get(token).copied().unwrap_or(0).max(1);
        (self.documents.max(1) as f64 / df as f64).ln()
    }
}

/// Default outline size for a report of `report_len` tokens.
pub fn default_outline_k(report_len: usize) -> usize {
    3.max(report_len.div_ceil(8))
}

/// The `k` distinct report tokens with highest TF-IDF, in order of first
/// occurrence. Ties favour the earlier token.
pub fn derive_silver_outline(
    report: &[String],
    stats: &DocumentFrequencies,
    k: usize,
) -> Vec<String> {
    let mut first_seen: Vec<&String> = Vec::new();
    let mut tf: HashMap<&String, usize> = HashMap::new();
    for t in report.iter().filter(|t| !is_special(t)) {
        let c = tf.entry(t).or_insert(0);
        if *c == 0 {
            first_seen.push(t);
        }
        *c += 1;
    }
    let mut ranked: Vec<(usize, f64)> = first_seen
        .iter()
        .enumerate()
        .map(|(pos, t)| (pos, tf[t] as f64 * stats.idf(t)))
        .collect();
    // stable sort keeps first-occurrence order among equal scores
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    ranked.truncate(k);
    ranked.sort_by_key(|&(pos, _)| pos);
    ranked.into_iter().map(|(pos, _)| first_seen[pos].clone()).collect()
}

/// Fills in missing outlines. `k = None` uses [`default_outline_k`].
pub fn derive_outlines(pairs: &mut [NewsReportPair], k: Option<usize>) {
    let stats = DocumentFrequencies::from_reports(pairs.iter().map(|p| p.report.as_slice()));
    for p in pairs.iter_mut() {
        if p.outline.is_none() {
            let k = k.unwrap_or_else(|| default_outline_k(p.report.len()));
            p.outline = Some(derive_silver_outline(&p.report, &stats, k));
        }
    }
}

/// Per-sequence length caps, counting the BOS and EOS markers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthCaps {
    pub news: usize,
    pub report: usize,
    pub outline: usize,
}

impl Default for LengthCaps {
    fn default() -> Self {
        LengthCaps {
            news: 400,
            report: 400,
            outline: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub news_ids: Vec<Vec<usize>>,
    pub report_ids: Vec<Vec<usize>>,
    pub outline_ids: Vec<Vec<usize>>,
    pub news_len: Vec<usize>,
    pub report_len: Vec<usize>,
    pub outline_len: Vec<usize>,
    pub news_mask: Vec<Vec<bool>>,
    pub report_mask: Vec<Vec<bool>>,
    pub outline_mask: Vec<Vec<bool>>,
}

/// Unpadded view of one batch row.
#[derive(Clone, Copy, Debug)]
pub struct ExampleIds<'a> {
    pub news: &'a [usize],
    pub outline: &'a [usize],
    pub report: &'a [usize],
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn example(&self, i: usize) -> ExampleIds<'_> {
        ExampleIds {
            news: &self.news_ids[i][..self.news_len[i]],
            outline: &self.outline_ids[i][..self.outline_len[i]],
            report: &self.report_ids[i][..self.report_len[i]],
        }
    }
}

/// `[BOS] ids [EOS]`, truncated to `cap` with the EOS kept.
pub fn wrap_sequence(ids: &[usize], cap: usize) -> Vec<usize> {
    let mut row = Vec::with_capacity(ids.len() + 2);
    row.push(BOS);
    row.extend_from_slice(&ids[..ids.len().min(cap.saturating_sub(2))]);
    row.push(EOS);
    row
}

fn pad_rows(rows: Vec<Vec<usize>>) -> (Vec<Vec<usize>>, Vec<usize>, Vec<Vec<bool>>) {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    let lens: Vec<usize> = rows.iter().map(Vec::len).collect();
    let masks = lens
        .iter()
        .map(|&l| (0..width).map(|j| j < l).collect())
        .collect();
    let padded = rows
        .into_iter()
        .map(|mut r| {
            r.resize(width, PAD);
            r
        })
        .collect();
    (padded, lens, masks)
}

pub fn encode_batch(pairs: &[NewsReportPair], vocab: &Vocabulary, caps: LengthCaps) -> Result<Batch> {
    if pairs.is_empty() {
        return Err(Error::Empty("batch pairs"));
    }
    if caps.news < 2 || caps.report < 2 || caps.outline < 2 {
        return Err(Error::Invalid("length caps must be at least 2".into()));
    }
    let mut news = Vec::with_capacity(pairs.len());
    let mut report = Vec::with_capacity(pairs.len());
    let mut outline = Vec::with_capacity(pairs.len());
    for p in pairs {
        let o = p
            .outline
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("outline not derived for pair {:?}", p.id)))?;
        news.push(wrap_sequence(&vocab.encode(&p.news), caps.news));
        report.push(wrap_sequence(&vocab.encode(&p.report), caps.report));
        outline.push(wrap_sequence(&vocab.encode(o), caps.outline));
    }
    let (news_ids, news_len, news_mask) = pad_rows(news);
    let (report_ids, report_len, report_mask) = pad_rows(report);
    let (outline_ids, outline_len, outline_mask) = pad_rows(outline);
    Ok(Batch {
        ids: pairs.iter().map(|p| p.id.clone()).collect(),
        news_ids,
        report_ids,
        outline_ids,
        news_len,
        report_len,
        outline_len,
        news_mask,
        report_mask,
        outline_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn pair(id: &str, news: &str, report: &str) -> NewsReportPair {
        NewsReportPair {
            id: id.into(),
            news: toks(news),
            report: toks(report),
            outline: None,
        }
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("GDP rose 3%"), vec!["gdp", "rose", "3", "%"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("a a"), vec!["a", "a"]);
        assert_eq!(tokenize("Q3 CPI: 2.5%!"), vec!["q", "3", "cpi", ":", "2", ".", "5", "%", "!"]);
    }

    proptest! {
        #[test]
        fn tokenize_is_stable_on_its_output(s in "[A-Za-z0-9éü .,%:()$-]{0,60}") {
            let t = tokenize(&s);
            prop_assert!(t.iter().all(|x| !x.is_empty()));
            prop_assert_eq!(tokenize(&t.join(" ")), t);
        }
    }

    #[test]
    fn vocabulary_frequency_filter() {
        let pairs = vec![pair("1", "a a", "a b")];
        let v = build_vocabulary(&pairs, 2, 10).unwrap();
        assert_eq!(v.tokens(), &["<pad>", "<bos>", "<eos>", "<unk>", "a"]);
    }

    #[test]
    fn vocabulary_lexicographic_tie_break() {
        let pairs = vec![pair("1", "c b a", "a b c")];
        let v = build_vocabulary(&pairs, 1, 6).unwrap();
        assert_eq!(&v.tokens()[4..], &["a", "b"]);
    }

    #[test]
    fn vocabulary_unfiltered_keeps_everything() {
        let pairs = vec![pair("1", "x y z", "z w"), pair("2", "q", "x")];
        let v = build_vocabulary(&pairs, 1, 100).unwrap();
        assert_eq!(v.len(), 5 + 4);
        for t in ["x", "y", "z", "w", "q"] {
            assert!(v.contains(t));
        }
    }

    #[test]
    fn vocabulary_errors() {
        let pairs = vec![pair("1", "a", "b")];
        assert!(matches!(build_vocabulary(&pairs, 5, 10), Err(Error::EmptyVocabulary)));
        assert!(build_vocabulary(&pairs, 1, 4).is_err());
        assert!(build_vocabulary(&[], 1, 10).is_err());
    }

    #[test]
    fn vocabulary_text_round_trip() {
        let pairs = vec![pair("1", "rates rose", "rates fell sharply")];
        let v = build_vocabulary(&pairs, 1, 100).unwrap();
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocabulary::from_text("a\nb\n").is_err());
    }

    proptest! {
        #[test]
        fn vocabulary_is_order_invariant(words in prop::collection::vec("[a-e]{1,2}", 2..30), seed in 0usize..50) {
            let pairs: Vec<NewsReportPair> = words
                .chunks(2)
                .enumerate()
                .map(|(i, c)| pair(&i.to_string(), &c[0], c.last().unwrap()))
                .collect();
            let mut rotated = pairs.clone();
            let n = rotated.len();
            rotated.rotate_left(seed % n);
            rotated.reverse();
            let a = build_vocabulary(&pairs, 1, 12).unwrap();
            let b = build_vocabulary(&rotated, 1, 12).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn encode_decode_round_trip(words in prop::collection::vec("[a-h]{1,3}", 1..30)) {
            let p = pair("1", &words.join(" "), "x");
            let v = build_vocabulary(&[p], 1, 1000).unwrap();
            prop_assert_eq!(v.decode(&v.encode(&words)), words);
        }
    }

    #[test]
    fn silver_outline_tfidf() {
        let report = toks("the rate fell the rate");
        let stats = DocumentFrequencies::from_reports([
            report.as_slice(),
            toks("the market").as_slice(),
            toks("the end").as_slice(),
        ]);
        // idf(the) = 0; rate: tf 2 · ln 3, fell: tf 1 · ln 3
        assert_eq!(derive_silver_outline(&report, &stats, 2), vec!["rate", "fell"]);
        assert_eq!(derive_silver_outline(&report, &stats, 1), vec!["rate"]);
    }

    #[test]
    fn silver_outline_short_and_unbounded() {
        let stats = DocumentFrequencies::from_reports([toks("a").as_slice()]);
        assert_eq!(derive_silver_outline(&toks("a"), &stats, 5), vec!["a"]);
        let report = toks("z y z x y w");
        let stats = DocumentFrequencies::from_reports([report.as_slice()]);
        assert_eq!(
            derive_silver_outline(&report, &stats, usize::MAX),
            vec!["z", "y", "x", "w"]
        );
    }

    #[test]
    fn silver_outline_tie_prefers_earlier() {
        let report = toks("b a c");
        let stats = DocumentFrequencies::from_reports([report.as_slice(), toks("q").as_slice()]);
        assert_eq!(derive_silver_outline(&report, &stats, 2), vec!["b", "a"]);
    }

    proptest! {
        #[test]
        fn silver_outline_is_ordered_subsequence(words in prop::collection::vec("[a-f]", 1..40), k in 1usize..8) {
            let stats = DocumentFrequencies::from_reports([words.as_slice(), &words[..words.len() / 2]]);
            let outline = derive_silver_outline(&words, &stats, k);
            let mut distinct: Vec<&String> = Vec::new();
            for w in &words {
                if !distinct.contains(&w) {
                    distinct.push(w);
                }
            }
            prop_assert!(!outline.is_empty() && outline.len() <= k.min(distinct.len()));
            let mut it = distinct.iter();
            for o in &outline {
                prop_assert!(it.any(|d| *d == o));
            }
        }
    }

    #[test]
    fn default_k() {
        assert_eq!(default_outline_k(5), 3);
        assert_eq!(default_outline_k(40), 5);
        assert_eq!(default_outline_k(41), 6);
    }

    #[test]
    fn batch_shapes_and_oov() {
        let v = Vocabulary::from_tokens(["a".to_string(), "b".to_string()]).unwrap();
        let mut p = pair("1", "a", "a b zzz");
        p.outline = Some(toks("b"));
        let mut q = p.clone();
        q.news = toks("a b a");
        let batch = encode_batch(&[p.clone(), q, p], &v, LengthCaps::default()).unwrap();
        assert_eq!(batch.news_ids[0], vec![BOS, 4, EOS, PAD, PAD]);
        assert_eq!(batch.news_len[0], 3);
        assert_eq!(batch.report_ids[0], vec![BOS, 4, 5, UNK, EOS]);
        assert_eq!(batch.news_ids[0], batch.news_ids[2]);
        assert_eq!(batch.news_mask[0], vec![true, true, true, false, false]);
        for (row, mask) in batch.news_ids.iter().zip(&batch.news_mask) {
            for (id, m) in row.iter().zip(mask) {
                assert_eq!(*m, *id != PAD);
            }
        }
        let ex = batch.example(1);
        assert_eq!(ex.news, &[BOS, 4, 5, 4, EOS]);
        assert_eq!(*ex.news.last().unwrap(), EOS);
    }

    #[test]
    fn batch_truncation_keeps_eos() {
        let v = Vocabulary::from_tokens(["a".to_string()]).unwrap();
        let mut p = pair("1", "a a a a a a", "a");
        p.outline = Some(toks("a"));
        let caps = LengthCaps { news: 4, ..LengthCaps::default() };
        let batch = encode_batch(&[p], &v, caps).unwrap();
        assert_eq!(batch.news_ids[0], vec![BOS, 4, 4, EOS]);
    }

    #[test]
    fn batch_errors() {
        let v = Vocabulary::from_tokens(["a".to_string()]).unwrap();
        assert!(encode_batch(&[], &v, LengthCaps::default()).is_err());
        let p = pair("1", "a", "a");
        assert!(encode_batch(&[p], &v, LengthCaps::default()).is_err());
    }

    #[test]
    fn dataset_parsing_reports_line_numbers() {
        let text = "{\"id\":\"1\",\"news\":\"a\",\"report\":\"b\"}\nnot json\n";
        match parse_records(text.as_bytes()) {
            Err(Error::Dataset { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let recs = parse_records(text.lines().next().unwrap().as_bytes()).unwrap();
        assert_eq!(recs[0].report.as_deref(), Some("b"));
    }
}
