//! Flat `section.key = value` run configuration.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use o2r::generation::DecodeConfig;
use o2r::training::TrainingConfig;
use serde_json::{Map, Value};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train_data: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub min_freq: usize,
    pub max_size: usize,
    pub train: TrainingConfig,
    pub decode: DecodeConfig,
    pub output_dir: Option<PathBuf>,
    /// Write a checkpoint every this many epochs; 0 keeps only the last one.
    pub checkpoint_every: u64,
    /// Keys given explicitly, e.g. `decode.max_report_len`.
    pub explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train_data: None,
            vocab: None,
            min_freq: 1,
            max_size: 50_000,
            train: TrainingConfig::default(),
            decode: DecodeConfig::default(),
            output_dir: None,
            checkpoint_every: 10,
            explicit: BTreeSet::new(),
        }
    }
}

/// Reads a bare value: numbers, booleans and `null` as JSON, anything else as text.
fn parse_value(raw: &str) -> Value {
    match serde_json::from_str::<Value>(raw) {
        Ok(v @ (Value::Number(_) | Value::Bool(_) | Value::Null | Value::String(_))) => v,
        _ => Value::String(raw.to_string()),
    }
}

fn same_kind(default: &Value, new: &Value) -> bool {
    matches!(
        (default, new),
        (Value::Number(_), Value::Number(_))
            | (Value::Bool(_), Value::Bool(_))
            | (Value::String(_), Value::String(_))
            | (Value::Null, Value::Number(_) | Value::Null)
    )
}

/// Sets `path` inside a serialized struct, rejecting keys the struct lacks.
fn set_json<T>(target: &mut T, path: &[&str], full_key: &str, raw: &str) -> Result<()>
where
    T: serde::Serialize + serde::de::DeserializeOwned,
{
    let mut root = serde_json::to_value(&*target)?;
    let mut slot = &mut root;
    for part in path {
        slot = slot
            .as_object_mut()
            .and_then(|m: &mut Map<String, Value>| m.get_mut(*part))
            .ok_or_else(|| anyhow!("unknown config key `{full_key}`"))?;
    }
    if slot.is_object() {
        bail!("unknown config key `{full_key}`");
    }
    let value = parse_value(raw);
    if !same_kind(slot, &value) {
        bail!("invalid value {raw:?} for config key `{full_key}`");
    }
    *slot = value;
    *target = serde_json::from_value(root).map_err(|e| anyhow!("invalid value {raw:?} for config key `{full_key}`: {e}"))?;
    Ok(())
}

fn parse_number<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| anyhow!("invalid value {raw:?} for config key `{key}`"))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, path.parent().unwrap_or(Path::new("")))?;
        Ok(cfg)
    }

    /// Applies file contents; relative paths resolve against `base`.
    pub fn apply_text(&mut self, text: &str, base: &Path) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("config line {}: expected `section.key = value`", n + 1))?;
            self.set_with_base(key.trim(), value.trim(), base)
                .with_context(|| format!("config line {}", n + 1))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("override {assignment:?} is not `key=value`"))?;
        self.set_with_base(key.trim(), value.trim(), Path::new(""))
    }

    #[cfg(test)]
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_with_base(key, value, Path::new(""))
    }

    fn set_with_base(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let path = || base.join(value);
        let parts: Vec<&str> = key.split('.').collect();
        match parts.as_slice() {
            ["data", "train"] => self.train_data = Some(path()),
            ["data", "vocab"] => self.vocab = Some(path()),
            ["data", "min_freq"] => self.min_freq = parse_number(key, value)?,
            ["data", "max_size"] => self.max_size = parse_number(key, value)?,
            ["output", "dir"] => self.output_dir = Some(path()),
            ["output", "checkpoint_every"] => self.checkpoint_every = parse_number(key, value)?,
            ["train", rest @ ..] if !rest.is_empty() => set_json(&mut self.train, rest, key, value)?,
            ["decode", rest @ ..] if !rest.is_empty() => set_json(&mut self.decode, rest, key, value)?,
            _ => bail!("unknown config key `{key}`"),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    pub fn require_train_data(&self) -> Result<&Path> {
        self.train_data
            .as_deref()
            .ok_or_else(|| anyhow!("missing config key `data.train`"))
    }

    pub fn require_vocab(&self) -> Result<&Path> {
        self.vocab
            .as_deref()
            .ok_or_else(|| anyhow!("missing config key `data.vocab`"))
    }

    pub fn require_output_dir(&self) -> Result<&Path> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| anyhow!("missing config key `output.dir`"))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.decode.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "# run\n data.train = d.jsonl\ntrain.learning_rate = 0.01 # fast\ntrain.caps.report = 80\n\
             train.outline_k = 4\ntrain.freeze_outline = true\ndecode.strategy = beam\n",
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(cfg.train_data.as_deref(), Some(Path::new("/base/d.jsonl")));
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.train.caps.report, 80);
        assert_eq!(cfg.train.outline_k, Some(4));
        assert!(cfg.train.freeze_outline);
        assert_eq!(cfg.decode.strategy, o2r::generation::Strategy::Beam);
        assert!(cfg.explicit.contains("train.caps.report"));
    }

    #[test]
    fn unknown_keys_are_named() {
        let mut cfg = RunConfig::default();
        for key in ["train.learning_rat", "bogus.x", "train.caps", "train", "decode.caps.news"] {
            let err = cfg.set(key, "1").unwrap_err().to_string();
            assert!(err.contains(&format!("`{key}`")), "{err}");
        }
    }

    #[test]
    fn bad_values_are_named() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("train.batch_size", "two").unwrap_err().to_string();
        assert!(err.contains("train.batch_size"), "{err}");
        let err = cfg.set("train.batch_size", "1.5").unwrap_err().to_string();
        assert!(err.contains("train.batch_size"), "{err}");
        let err = cfg.set("decode.strategy", "fastest").unwrap_err().to_string();
        assert!(err.contains("decode.strategy"), "{err}");
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn overrides_win() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("train.seed = 3", Path::new("")).unwrap();
        cfg.apply_override("train.seed=9").unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert!(cfg.apply_override("train.seed").is_err());
    }
}
