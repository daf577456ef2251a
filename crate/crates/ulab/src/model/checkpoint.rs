//! Checkpoint file format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "ULAB"
//! 4       2     format version (u16)
//! 6       4     vocab_size (u32)
//! 10      4     d_model (u32)
//! 14      4     n_layers (u32)
//! 18      4     n_heads (u32)
//! 22      4     max_seq_len (u32)
//! 26      4     d_ff (u32)
//! 30      8·N   parameter buffer (f64), declared field order
//! ```
//!
//! A load of a save is bit-identical; any truncation, trailing bytes or
//! header mismatch is a checkpoint-format error.

use std::fs;
use std::path::Path;

use crate::error::{Result, UlabError};

use super::{ModelConfig, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ULAB";
pub const CHECKPOINT_VERSION: u16 = 1;

const HEADER_LEN: usize = 4 + 2 + 6 * 4;

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let cfg = &params.config;
    let mut bytes = Vec::with_capacity(HEADER_LEN + 8 * params.data.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for dim in [
        cfg.vocab_size,
        cfg.d_model,
        cfg.n_layers,
        cfg.n_heads,
        cfg.max_seq_len,
        cfg.d_ff,
    ] {
        let dim = u32::try_from(dim).map_err(|_| {
            UlabError::CheckpointFormat {
                path: path.to_path_buf(),
                reason: format!("dimension {dim} does not fit in u32"),
            }
        })?;
        bytes.extend_from_slice(&dim.to_le_bytes());
    }
    for &value in &params.data {
        bytes.extend_from_slice(&value.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path)?;
    let err = |reason: String| UlabError::CheckpointFormat {
        path: path.to_path_buf(),
        reason,
    };

    if bytes.len() < HEADER_LEN {
        return Err(err(format!("file too short: {} bytes", bytes.len())));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(err("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(err(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }

    let mut dims = [0usize; 6];
    for (i, dim) in dims.iter_mut().enumerate() {
        let at = 6 + 4 * i;
        *dim = u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]) as usize;
    }
    let config = ModelConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_layers: dims[2],
        n_heads: dims[3],
        max_seq_len: dims[4],
        d_ff: dims[5],
    };
    config
        .validate()
        .map_err(|e| err(format!("invalid header dimensions: {e}")))?;

    let expected = HEADER_LEN + 8 * config.n_params();
    if bytes.len() != expected {
        return Err(err(format!(
            "expected {expected} bytes for the declared shape, found {}",
            bytes.len()
        )));
    }

    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
        .collect();
    Ok(ModelParams { config, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn params() -> ModelParams {
        ModelParams::init(ModelConfig::desk_default(19), 4).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ulab");
        let original = params();
        save_checkpoint(&original, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, original.config);
        // Compare raw bits, not float equality.
        let orig_bits: Vec<u64> = original.data.iter().map(|v| v.to_bits()).collect();
        let load_bits: Vec<u64> = loaded.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(orig_bits, load_bits);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ulab");
        save_checkpoint(&params(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(UlabError::CheckpointFormat { .. })
        ));
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ulab");
        save_checkpoint(&params(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(UlabError::CheckpointFormat { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ulab");
        save_checkpoint(&params(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(UlabError::CheckpointFormat { .. })
        ));
    }
}
