use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::volume::{decode_f32, encode_f32};
use crate::optim::{AdamWConfig, AdamWState, ParamMap};
use crate::schedule::ScheduleConfig;
use crate::tensor::Tensor;
use crate::unet::{ModelParams, UNetConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VOLDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub stream: u64,
    /// Decimal string; the word position is a 128-bit counter.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::Format("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Format(format!("bad rng word position {}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Everything needed to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub schedule: ScheduleConfig,
    pub optimizer: AdamWConfig,
    pub optimizer_state: AdamWState,
    pub rng: BTreeMap<String, RngState>,
    pub step: u64,
    /// Free-form run details (mode, patch extent, ...).
    pub extra: BTreeMap<String, String>,
    /// Exponential moving average of the parameters, when training keeps one.
    pub ema: Option<ParamMap>,
}

impl Checkpoint {
    /// The weights to sample with: the moving average if present.
    pub fn inference_model(&self) -> ModelParams {
        ModelParams {
            config: self.model.config.clone(),
            tensors: self.ema.clone().unwrap_or_else(|| self.model.tensors.clone()),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    unet: UNetConfig,
    schedule: ScheduleConfig,
    optimizer: AdamWConfig,
    optimizer_step: u64,
    step: u64,
    rng: BTreeMap<String, RngState>,
    extra: BTreeMap<String, String>,
    /// Order of tensors in each payload section (parameters, first moments,
    /// second moments, then the moving average when `ema` is set).
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    ema: bool,
}

/// Layout: magic, version (u32 LE), header length (u64 LE), JSON header,
/// then parameters, first moments, second moments and the optional moving
/// average as f32 LE.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let params = &ckpt.model.tensors;
    let tensors: Vec<TensorEntry> = params
        .iter()
        .map(|(k, v)| TensorEntry {
            name: k.clone(),
            shape: v.shape().to_vec(),
        })
        .collect();
    let mut sections = vec![params, &ckpt.optimizer_state.first, &ckpt.optimizer_state.second];
    sections.extend(ckpt.ema.as_ref());
    for section in &sections[1..] {
        for (k, v) in params {
            let m = section.get(k).ok_or_else(|| Error::MissingParameter(k.clone()))?;
            v.expect_same_shape(m, "checkpoint optimizer state")?;
        }
        if let Some(extra) = section.keys().find(|k| !params.contains_key(*k)) {
            return Err(Error::UnknownParameter(extra.clone()));
        }
    }
    let header = Header {
        unet: ckpt.model.config.clone(),
        schedule: ckpt.schedule,
        optimizer: ckpt.optimizer,
        optimizer_step: ckpt.optimizer_state.step,
        step: ckpt.step,
        rng: ckpt.rng.clone(),
        extra: ckpt.extra.clone(),
        tensors,
        ema: ckpt.ema.is_some(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for section in sections {
        for v in section.values() {
            out.extend_from_slice(&encode_f32(v.data()));
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let fixed = CHECKPOINT_MAGIC.len() + 4 + 8;
    if bytes.len() < fixed {
        return Err(Error::Truncated {
            expected: fixed,
            found: bytes.len(),
        });
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = fixed
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or(Error::Truncated {
            expected: fixed.saturating_add(header_len),
            found: bytes.len(),
        })?;
    let header: Header = serde_json::from_slice(&bytes[fixed..body])?;

    let expected_shapes = crate::unet::Layout::new(&header.unet)?.parameter_shapes();
    for e in &header.tensors {
        match expected_shapes.get(&e.name) {
            None => return Err(Error::UnknownParameter(e.name.clone())),
            Some(s) if *s != e.shape => {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint tensor",
                    left: s.clone(),
                    right: e.shape.clone(),
                })
            }
            _ => {}
        }
    }
    if let Some(missing) = expected_shapes.keys().find(|k| !header.tensors.iter().any(|e| &e.name == *k)) {
        return Err(Error::MissingParameter(missing.clone()));
    }

    let per_section: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let payload = &bytes[body..];
    let count = if header.ema { 4 } else { 3 };
    if payload.len() != count * per_section * 4 {
        return Err(Error::Truncated {
            expected: count * per_section * 4,
            found: payload.len(),
        });
    }
    let values = decode_f32(payload);
    let mut offset = 0;
    let mut sections: Vec<ParamMap> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut map = ParamMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            map.insert(e.name.clone(), Tensor::new(e.shape.clone(), values[offset..offset + n].to_vec())?);
            offset += n;
        }
        sections.push(map);
    }
    let ema = if header.ema { sections.pop() } else { None };
    let second = sections.pop().expect("three sections");
    let first = sections.pop().expect("three sections");
    let tensors = sections.pop().expect("three sections");
    Ok(Checkpoint {
        model: ModelParams {
            config: header.unet,
            tensors,
        },
        schedule: header.schedule,
        optimizer: header.optimizer,
        optimizer_state: AdamWState {
            step: header.optimizer_step,
            first,
            second,
        },
        rng: header.rng,
        step: header.step,
        extra: header.extra,
        ema,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
