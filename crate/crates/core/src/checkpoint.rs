//! Binary checkpoint format.
//!
//! ```text
//! "O2RCKPT1"                      8-byte magic
//! u64 little-endian               header length in bytes
//! header                          UTF-8 JSON, see `Header`
//! f64 little-endian arrays        in header order, at the recorded byte offsets
//! ```
//!
//! Arrays are the model parameters followed by the two Adam moment sets.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::model::{ModelDims, ModelParams, BLOCK_NAMES};
use crate::numerics::{ParameterSet, Tensor};
use crate::training::{EpochAccumulator, TrainingConfig, TrainingState};

pub const MAGIC: &[u8; 8] = b"O2RCKPT1";
pub const FORMAT_VERSION: u32 = 1;

/// Run information stored alongside the training state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointMeta {
    pub vocab_fingerprint: Option<String>,
    /// Longest training report and outline in tokens; drive default decode lengths.
    pub longest_report: usize,
    pub longest_outline: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    /// u128 word position, as decimal text.
    word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: TrainingConfig,
    dims: ModelDims,
    step: u64,
    epoch: u64,
    batch_cursor: usize,
    accumulator: EpochAccumulator,
    rng: RngState,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

fn groups(state: &TrainingState) -> [(&'static str, &ModelParams); 3] {
    [
        ("", &state.params),
        ("adam.m.", &state.adam_m),
        ("adam.v.", &state.adam_v),
    ]
}

pub fn to_bytes(state: &TrainingState, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (prefix, set) in groups(state) {
        for (name, t) in BLOCK_NAMES.iter().zip(set.blocks()) {
            tensors.push(TensorEntry {
                name: format!("{prefix}{name}"),
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = Header {
        version: FORMAT_VERSION,
        config: state.config.clone(),
        dims: state.params.dims,
        step: state.step,
        epoch: state.epoch,
        batch_cursor: state.batch_cursor,
        accumulator: state.accumulator,
        rng: RngState {
            seed: hex(&state.noise_rng.get_seed()),
            stream: state.noise_rng.get_stream(),
            word_pos: state.noise_rng.get_word_pos().to_string(),
        },
        meta: meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(TrainingState, CheckpointMeta)> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadHeader.into());
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated {
            needed: 16,
            found: bytes.len(),
        }
        .into());
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize.saturating_add(header_len);
    if bytes.len() < data_start {
        return Err(CheckpointError::Truncated {
            needed: data_start,
            found: bytes.len(),
        }
        .into());
    }
    let raw: serde_json::Value =
        serde_json::from_slice(&bytes[16..data_start]).map_err(|_| CheckpointError::BadHeader)?;
    let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version,
        }
        .into());
    }
    let header: Header = serde_json::from_value(raw).map_err(|_| CheckpointError::BadHeader)?;
    let data = &bytes[data_start..];

    let expected = ModelParams::expected_shapes(header.dims);
    let mut sets = Vec::with_capacity(3);
    let mut entries = header.tensors.iter();
    for prefix in ["", "adam.m.", "adam.v."] {
        let mut set = ModelParams::zeros(header.dims);
        for (b, shape) in expected.iter().enumerate() {
            let name = format!("{prefix}{}", BLOCK_NAMES[b]);
            let entry = entries.next().filter(|e| e.name == name);
            let Some(entry) = entry else {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: shape.clone(),
                    found: Vec::new(),
                }
                .into());
            };
            if &entry.shape != shape {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: shape.clone(),
                    found: entry.shape.clone(),
                }
                .into());
            }
            let n: usize = shape.iter().product();
            let end = entry.offset + 8 * n;
            if data.len() < end {
                return Err(CheckpointError::Truncated {
                    needed: data_start + end,
                    found: bytes.len(),
                }
                .into());
            }
            let values = data[entry.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            *set.block_mut(b) = Tensor::from_vec(shape, values)?;
        }
        sets.push(set);
    }
    let seed = unhex(&header.rng.seed).ok_or(CheckpointError::BadHeader)?;
    let word_pos: u128 = header
        .rng
        .word_pos
        .parse()
        .map_err(|_| CheckpointError::BadHeader)?;
    let mut noise_rng = ChaCha8Rng::from_seed(seed);
    noise_rng.set_stream(header.rng.stream);
    noise_rng.set_word_pos(word_pos);

    let adam_v = sets.pop().expect("three sets");
    let adam_m = sets.pop().expect("three sets");
    let params = sets.pop().expect("three sets");
    Ok((
        TrainingState {
            config: header.config,
            params,
            adam_m,
            adam_v,
            step: header.step,
            epoch: header.epoch,
            batch_cursor: header.batch_cursor,
            noise_rng,
            accumulator: header.accumulator,
        },
        header.meta,
    ))
}

pub fn save_checkpoint(path: &Path, state: &TrainingState, meta: &CheckpointMeta) -> Result<()> {
    fs::write(path, to_bytes(state, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainingState, CheckpointMeta)> {
    from_bytes(&fs::read(path).map_err(Error::Io)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn state() -> TrainingState {
        let cfg = TrainingConfig {
            d_emb: 4,
            d_hid: 3,
            d_z: 2,
            ..TrainingConfig::default()
        };
        let mut s = TrainingState::new(cfg, 11).unwrap();
        s.step = 17;
        s.adam_m.report.b_o.fill(0.25);
        let _: f64 = s.noise_rng.random();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = state();
        let meta = CheckpointMeta {
            vocab_fingerprint: Some("abc".into()),
            longest_report: 42,
            longest_outline: 6,
        };
        let (back, meta_back) = from_bytes(&to_bytes(&s, &meta).unwrap()).unwrap();
        assert_eq!(meta_back, meta);
        assert_eq!(back.params, s.params);
        assert_eq!(back.adam_m, s.adam_m);
        assert_eq!(back.adam_v, s.adam_v);
        assert_eq!(back.step, 17);
        assert_eq!(back.noise_rng, s.noise_rng);
        assert_eq!(back.config, s.config);
    }

    #[test]
    fn distinct_errors() {
        let s = state();
        let bytes = to_bytes(&s, &CheckpointMeta::default()).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint(CheckpointError::BadHeader))));

        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(
            from_bytes(cut),
            Err(Error::Checkpoint(CheckpointError::Truncated { .. }))
        ));
        assert!(matches!(
            from_bytes(&bytes[..20]),
            Err(Error::Checkpoint(CheckpointError::Truncated { .. }))
        ));

        let text = String::from_utf8_lossy(&bytes[16..]).to_string();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = &text[..header_len];
        let rewrite = |json: String| {
            let mut out = MAGIC.to_vec();
            out.extend_from_slice(&(json.len() as u64).to_le_bytes());
            out.extend_from_slice(json.as_bytes());
            out.extend_from_slice(&bytes[16 + header_len..]);
            out
        };
        let v2 = rewrite(json.replacen("\"version\":1", "\"version\":2", 1));
        assert!(matches!(
            from_bytes(&v2),
            Err(Error::Checkpoint(CheckpointError::VersionMismatch { found: 2, .. }))
        ));
        let wrong = rewrite(json.replacen("\"d_z\":2", "\"d_z\":3", 2));
        assert!(matches!(
            from_bytes(&wrong),
            Err(Error::Checkpoint(CheckpointError::ShapeMismatch { .. }))
        ));
    }
}
