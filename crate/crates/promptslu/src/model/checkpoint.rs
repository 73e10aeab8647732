//! Checkpoint files: a JSON header describing the model plus a raw
//! little-endian f64 blob with a content hash. Values round-trip bitwise,
//! which the reproducibility guarantees depend on.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Layout, ModelConfig, ModelError, Parameters};

const FORMAT: &str = "slu-model";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    n_params: usize,
    params_sha256: String,
}

/// `stem` plus a dotted extension, preserving any existing path components.
fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut name = OsString::from(stem.as_os_str().to_owned());
    name.push(".");
    name.push(ext);
    PathBuf::from(name)
}

/// Writes f64 values as a little-endian byte blob.
pub fn write_f64s(path: &Path, data: &[f64]) -> std::io::Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes)
}

/// Reads a little-endian f64 blob.
pub fn read_f64s(path: &Path) -> Result<Vec<f64>, ModelError> {
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(ModelError::MalformedCheckpoint(format!(
            "blob length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Hex SHA-256 of the little-endian byte form of `data`.
pub fn blob_sha256(data: &[f64]) -> String {
    let mut h = Sha256::new();
    for x in data {
        h.update(x.to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

/// Saves `{stem}.json` and `{stem}.bin`.
pub fn save_model(stem: &Path, cfg: &ModelConfig, params: &Parameters) -> Result<(), ModelError> {
    cfg.validate()?;
    if params.len() != Layout::of(cfg).total_len() {
        return Err(ModelError::ShapeMismatch("checkpoint parameters".into()));
    }
    let header = Header {
        format: FORMAT.to_owned(),
        version: VERSION,
        config: cfg.clone(),
        n_params: params.len(),
        params_sha256: blob_sha256(&params.data),
    };
    fs::write(
        with_ext(stem, "json"),
        serde_json::to_string_pretty(&header)?,
    )?;
    write_f64s(&with_ext(stem, "bin"), &params.data)?;
    Ok(())
}

/// Loads a checkpoint saved by [`save_model`], validating format, length,
/// and content hash.
pub fn load_model(stem: &Path) -> Result<(ModelConfig, Parameters), ModelError> {
    let header: Header = serde_json::from_str(&fs::read_to_string(with_ext(stem, "json"))?)
        .map_err(|e| ModelError::MalformedCheckpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(ModelError::MalformedCheckpoint(format!(
            "unsupported format {}/{}",
            header.format, header.version
        )));
    }
    header.config.validate()?;
    let data = read_f64s(&with_ext(stem, "bin"))?;
    if data.len() != header.n_params {
        return Err(ModelError::MalformedCheckpoint(format!(
            "blob has {} values, header says {}",
            data.len(),
            header.n_params
        )));
    }
    if blob_sha256(&data) != header.params_sha256 {
        return Err(ModelError::ChecksumMismatch);
    }
    let layout = std::sync::Arc::new(Layout::of(&header.config));
    let params = Parameters::from_data(layout, data)?;
    Ok((header.config, params))
}
