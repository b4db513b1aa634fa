//! `LTW1` toy-model checkpoints: magic | u32 version | six u32 shape fields
//! (vocab, layers, dim, heads, max_seq_len, mlp_hidden) | u64 count |
//! count × f32, all little-endian.

use std::fs;
use std::path::Path;

use layerlens_core::toy::{ToyConfig, ToyModel};

use crate::error::{LensError, Result};

const MAGIC: &[u8; 4] = b"LTW1";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 6 * 4 + 8;

static BUNDLED: &[u8] = include_bytes!("../assets/toy_model.ltw");

pub fn encode(model: &ToyModel) -> Vec<u8> {
    let c = model.config();
    let params = model.params();
    let mut out = Vec::with_capacity(HEADER_LEN + params.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [c.vocab_size, c.num_layers, c.dim, c.heads, c.max_seq_len, c.mlp_hidden] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

/// Parses a checkpoint; `origin` only labels errors.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<ToyModel> {
    let bad = |msg: &str| LensError::format(origin, msg);
    if bytes.len() < HEADER_LEN {
        return Err(bad("truncated checkpoint header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    if u32_at(4) != VERSION as usize {
        return Err(bad("unsupported checkpoint version"));
    }
    let config = ToyConfig {
        vocab_size: u32_at(8),
        num_layers: u32_at(12),
        dim: u32_at(16),
        heads: u32_at(20),
        max_seq_len: u32_at(24),
        mlp_hidden: u32_at(28),
    };
    let count = u64::from_le_bytes(bytes[32..40].try_into().expect("8 bytes")) as usize;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != count.saturating_mul(4) {
        return Err(bad("checkpoint length does not match parameter count"));
    }
    let params = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    ToyModel::from_params(config, params).map_err(|e| bad(&e.to_string()))
}

pub fn load(path: &Path) -> Result<ToyModel> {
    let bytes = fs::read(path).map_err(|e| LensError::io(path, e))?;
    decode(&bytes, path)
}

pub fn save(model: &ToyModel, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| LensError::io(path, e))
}

/// The trained checkpoint shipped with the crate.
pub fn bundled() -> Result<ToyModel> {
    decode(BUNDLED, Path::new("<bundled toy_model.ltw>"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact() {
        let model = ToyModel::random(ToyConfig::default(), 4).unwrap();
        let bytes = encode(&model);
        assert_eq!(decode(&bytes, Path::new("x")).unwrap(), model);
    }

    #[test]
    fn corruption_is_rejected() {
        let model = ToyModel::random(ToyConfig::default(), 4).unwrap();
        let mut bytes = encode(&model);
        bytes[0] = b'X';
        assert!(decode(&bytes, Path::new("x"))
            .unwrap_err()
            .to_string()
            .contains("bad magic"));
        let bytes = encode(&model);
        assert!(decode(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        let mut bytes = encode(&model);
        let at = bytes.len() - 4;
        bytes[at..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode(&bytes, Path::new("x")).is_err());
    }

    #[test]
    fn bundled_checkpoint_has_default_shape() {
        let model = bundled().unwrap();
        assert_eq!(*model.config(), ToyConfig::default());
    }
}
