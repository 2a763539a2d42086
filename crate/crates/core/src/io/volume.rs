use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VOLUME_MAGIC: &str = "voldiff-volume";
pub const VOLUME_VERSION: u32 = 1;
const DTYPE: &str = "f32le";

/// Sidecar header of a `.vol.json` / `.vol.raw` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub magic: String,
    pub version: u32,
    /// `[C, D, H, W]`; the payload is channel-major, then depth, height, width.
    pub shape: Vec<usize>,
    pub channel_names: Vec<String>,
    pub spacing: [f64; 3],
    pub dtype: String,
    pub value_range: String,
    /// Payload file name, relative to the header.
    pub payload: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeMeta {
    pub channel_names: Vec<String>,
    pub spacing: [f64; 3],
    pub value_range: String,
}

impl VolumeMeta {
    pub fn named(names: &[&str], value_range: &str) -> Self {
        Self {
            channel_names: names.iter().map(|s| s.to_string()).collect(),
            spacing: [1.0; 3],
            value_range: value_range.to_string(),
        }
    }
}

/// `dir/stem.vol.json` and `dir/stem.vol.raw` for a header path or a stem.
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let stem = s
        .strip_suffix(".vol.json")
        .or_else(|| s.strip_suffix(".vol.raw"))
        .unwrap_or(&s)
        .to_string();
    (PathBuf::from(format!("{stem}.vol.json")), PathBuf::from(format!("{stem}.vol.raw")))
}

pub fn encode_f32(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Writes the header/payload pair and returns the header path.
pub fn write_volume(path: &Path, volume: &Tensor, meta: &VolumeMeta) -> Result<PathBuf> {
    volume.expect_volume("write_volume")?;
    if meta.channel_names.len() != volume.channels() {
        return Err(Error::InvalidArgument(format!(
            "{} channel names for a {}-channel volume",
            meta.channel_names.len(),
            volume.channels()
        )));
    }
    let (json, raw) = volume_paths(path);
    let header = VolumeHeader {
        magic: VOLUME_MAGIC.to_string(),
        version: VOLUME_VERSION,
        shape: volume.shape().to_vec(),
        channel_names: meta.channel_names.clone(),
        spacing: meta.spacing,
        dtype: DTYPE.to_string(),
        value_range: meta.value_range.clone(),
        payload: raw
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    if let Some(dir) = json.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&raw, encode_f32(volume.data()))?;
    fs::write(&json, serde_json::to_string_pretty(&header)?)?;
    Ok(json)
}

pub fn read_volume(path: &Path) -> Result<(Tensor, VolumeHeader)> {
    let (json, _) = volume_paths(path);
    let header: VolumeHeader = serde_json::from_str(&fs::read_to_string(&json)?)?;
    if header.magic != VOLUME_MAGIC {
        return Err(Error::Format(format!("{}: not a volume header", json.display())));
    }
    if header.version != VOLUME_VERSION {
        return Err(Error::VersionMismatch {
            found: header.version,
            expected: VOLUME_VERSION,
        });
    }
    if header.dtype != DTYPE {
        return Err(Error::Format(format!("unsupported dtype {}", header.dtype)));
    }
    if header.shape.len() != 4 || header.channel_names.len() != header.shape[0] {
        return Err(Error::Format(format!("inconsistent header shape {:?}", header.shape)));
    }
    let raw = json.with_file_name(&header.payload);
    let bytes = fs::read(raw)?;
    let expected = header.shape.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let tensor = Tensor::new(header.shape.clone(), decode_f32(&bytes))?;
    Ok((tensor, header))
}
