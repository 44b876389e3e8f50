//! Model checkpoint file: magic `SSMCKPT1`, length-prefixed config JSON,
//! parameters in declaration order as little-endian f32, then a CRC32.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"SSMCKPT1";

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    let config_json = serde_json::to_vec(model.config())?;
    let mut buf = Vec::with_capacity(16 + config_json.len() + model.num_param_values() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config_json);
    for p in model.parameters() {
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let buf = fs::read(path)?;
    if buf.len() < MAGIC.len() + 8 {
        return Err(Error::Format("checkpoint file truncated".into()));
    }
    if &buf[..8] != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let (body, crc_bytes) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Corrupt);
    }
    let json_len = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize;
    if body.len() < 12 + json_len {
        return Err(Error::Format("checkpoint file truncated".into()));
    }
    let config: ModelConfig = serde_json::from_slice(&body[12..12 + json_len])?;
    config.validate()?;
    let mut model = Model::<f32>::init(config)?;
    let data = &body[12 + json_len..];
    if data.len() != model.num_param_values() * 4 {
        return Err(Error::Format(format!(
            "parameter payload is {} bytes, expected {}",
            data.len(),
            model.num_param_values() * 4
        )));
    }
    let mut off = 0;
    for p in model.parameters_mut() {
        for v in p.value.data_mut() {
            *v = f32::from_le_bytes(data[off..off + 4].try_into().expect("4 bytes"));
            off += 4;
        }
    }
    model.refresh_fingerprint();
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 17,
            n_layers: 2,
            d_model: 8,
            d_inner: 16,
            d_state: 4,
            n_heads: 2,
            eps: 1e-5,
            seed: 3,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::<f32>::init(cfg()).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.fingerprint(), model.fingerprint());
        for (a, b) in loaded.parameters().iter().zip(model.parameters()) {
            assert_eq!(a.value.data(), b.value.data());
        }
    }

    #[test]
    fn corrupt_byte_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&Model::<f32>::init(cfg()).unwrap(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Corrupt)));
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&Model::<f32>::init(cfg()).unwrap(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 3]).unwrap();
        let err = load_checkpoint(&path);
        assert!(matches!(err, Err(Error::Format(_)) | Err(Error::Corrupt)));
    }
}
