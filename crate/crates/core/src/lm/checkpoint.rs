//! `KAMLM001` checkpoints.
//!
//! Layout: the 8-byte magic, six little-endian u32 header fields
//! (n_layers, hidden_dim, n_heads, ffn_dim, vocab_size, max_seq_len), then
//! every weight as a little-endian f32 in [`MiniLmModel::params`] order.

use std::path::Path;

use crate::binio::{put_f32s, put_u32, read_file, to_u32, write_file, ByteReader};
use crate::error::{KamirError, Result};

use super::config::LmConfig;
use super::model::{param_count_for, MiniLmModel};

pub const LM_MAGIC: &[u8; 8] = b"KAMLM001";

pub fn checkpoint_bytes(model: &MiniLmModel) -> Result<Vec<u8>> {
    let c = &model.config;
    let mut out = Vec::with_capacity(32 + model.param_count() * 4);
    out.extend_from_slice(LM_MAGIC);
    for (v, what) in [
        (c.n_layers, "n_layers"),
        (c.hidden_dim, "hidden_dim"),
        (c.n_heads, "n_heads"),
        (c.ffn_dim, "ffn_dim"),
        (c.vocab_size, "vocab_size"),
        (c.max_seq_len, "max_seq_len"),
    ] {
        put_u32(&mut out, to_u32(v, what)?);
    }
    for p in model.params() {
        put_f32s(&mut out, p);
    }
    Ok(out)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<MiniLmModel> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(LM_MAGIC)?;
    let header_start = r.offset();
    let mut field = |name: &str| -> Result<usize> { Ok(r.u32(name)? as usize) };
    let config = LmConfig {
        n_layers: field("n_layers")?,
        hidden_dim: field("hidden_dim")?,
        n_heads: field("n_heads")?,
        ffn_dim: field("ffn_dim")?,
        vocab_size: field("vocab_size")?,
        max_seq_len: field("max_seq_len")?,
        seed: 0,
    };
    config
        .validate()
        .map_err(|e| KamirError::format(header_start, format!("invalid header: {e}")))?;
    let expected = param_count_for(&config) * 4 + 32;
    if bytes.len() as u64 != expected {
        return Err(KamirError::format(
            bytes.len() as u64,
            format!(
                "file is {} bytes but the header implies {expected}",
                bytes.len()
            ),
        ));
    }
    let mut model = MiniLmModel::new(config)?;
    for (i, p) in model.params_mut().into_iter().enumerate() {
        let off = r.offset();
        let vals = r.f32s(p.len(), "weights")?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(KamirError::format(off, format!("non-finite value in tensor {i}")));
        }
        p.copy_from_slice(&vals);
    }
    r.finish()?;
    Ok(model)
}

pub fn save_checkpoint(model: &MiniLmModel, path: &Path) -> Result<()> {
    write_file(path, &checkpoint_bytes(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<MiniLmModel> {
    model_from_bytes(&read_file(path)?)
}

/// Loads and checks that the stored shape matches `expected` (seed ignored).
pub fn load_checkpoint_expecting(path: &Path, expected: &LmConfig) -> Result<MiniLmModel> {
    let model = load_checkpoint(path)?;
    if !model.config.same_shape(expected) {
        return Err(KamirError::Shape(format!(
            "checkpoint {} has n_layers={} hidden_dim={} n_heads={} ffn_dim={} max_seq_len={}, \
             expected n_layers={} hidden_dim={} n_heads={} ffn_dim={} max_seq_len={}",
            path.display(),
            model.config.n_layers,
            model.config.hidden_dim,
            model.config.n_heads,
            model.config.ffn_dim,
            model.config.max_seq_len,
            expected.n_layers,
            expected.hidden_dim,
            expected.n_heads,
            expected.ffn_dim,
            expected.max_seq_len,
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MiniLmModel {
        MiniLmModel::new(LmConfig {
            hidden_dim: 16,
            n_heads: 2,
            ffn_dim: 32,
            max_seq_len: 32,
            seed: 4,
            ..LmConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = small();
        let bytes = checkpoint_bytes(&m).unwrap();
        assert_eq!(&bytes[..8], LM_MAGIC);
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.weight_bytes(), m.weight_bytes());
    }

    #[test]
    fn truncated_is_format_error() {
        let bytes = checkpoint_bytes(&small()).unwrap();
        for cut in [4, 20, bytes.len() - 1] {
            match model_from_bytes(&bytes[..cut]) {
                Err(KamirError::Format { .. }) => {}
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut bytes = checkpoint_bytes(&small()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            model_from_bytes(&bytes),
            Err(KamirError::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn shape_expectation_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.kamlm");
        let m = MiniLmModel::new(LmConfig::default()).unwrap();
        save_checkpoint(&m, &path).unwrap();
        load_checkpoint_expecting(&path, &LmConfig::default()).unwrap();
        let six = LmConfig {
            n_layers: 6,
            ..LmConfig::default()
        };
        assert!(matches!(
            load_checkpoint_expecting(&path, &six),
            Err(KamirError::Shape(_))
        ));
    }
}
