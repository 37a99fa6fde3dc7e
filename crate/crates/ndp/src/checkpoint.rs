//! Checkpoint persistence.
//!
//! Byte layout: magic `NDPC`, little-endian u32 format version, little-endian
//! u64 header length, UTF-8 JSON header (run config + tensor manifest), then
//! the tensor payloads as contiguous little-endian f32 in manifest order.
//! Manifest offsets are relative to the start of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{NdpError, Result};
use crate::model::ModelParams;
use crate::tensor::Scalar;

const MAGIC: [u8; 4] = *b"NDPC";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    manifest: Vec<ManifestEntry>,
}

/// Serialise parameters (downcast to f32) plus the run config.
pub fn save_checkpoint<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &RunConfig,
    path: &Path,
) -> Result<()> {
    let named = params.named();
    let mut manifest = Vec::with_capacity(named.len());
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in &named {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in tensor.data() {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header { config: cfg.clone(), manifest })
        .map_err(|e| NdpError::InvalidArgument(format!("header serialisation: {e}")))?;

    let mut bytes = Vec::with_capacity(16 + header.len() + payload.len());
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Load a checkpoint at the requested precision.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ModelParams<T>, RunConfig)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 {
        return Err(NdpError::Truncated { expected: 16, found: bytes.len() as u64 });
    }
    if bytes[0..4] != MAGIC {
        return Err(NdpError::BadMagic { found: [bytes[0], bytes[1], bytes[2], bytes[3]] });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(NdpError::UnsupportedVersion { found: version });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(NdpError::Truncated {
            expected: (16 + header_len) as u64,
            found: bytes.len() as u64,
        });
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| NdpError::ConfigParse(format!("checkpoint header: {e}")))?;
    header.config.validate()?;
    let payload = &bytes[16 + header_len..];

    // offsets must be in-bounds, non-overlapping and in manifest order
    let mut expected_offset = 0u64;
    for entry in &header.manifest {
        let len = entry.shape.iter().product::<usize>() as u64 * 4;
        if entry.offset != expected_offset {
            return Err(NdpError::OffsetOutOfBounds {
                name: entry.name.clone(),
                offset: entry.offset,
                len,
                payload: payload.len() as u64,
            });
        }
        if entry.offset + len > payload.len() as u64 {
            return Err(NdpError::OffsetOutOfBounds {
                name: entry.name.clone(),
                offset: entry.offset,
                len,
                payload: payload.len() as u64,
            });
        }
        expected_offset += len;
    }
    if expected_offset != payload.len() as u64 {
        return Err(NdpError::Truncated {
            expected: 16 + header_len as u64 + expected_offset,
            found: bytes.len() as u64,
        });
    }

    let mcfg = header.config.model_config();
    let mut params = ModelParams::<T>::init(&mcfg, 0)?;
    let mut filled = 0usize;
    for (name, tensor) in params.named_mut() {
        let entry = header
            .manifest
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| NdpError::ConfigParse(format!("checkpoint missing tensor {name}")))?;
        if entry.shape != tensor.shape() {
            return Err(NdpError::ShapeMismatch {
                op: "load_checkpoint",
                detail: format!("{name}: file {:?} vs model {:?}", entry.shape, tensor.shape()),
            });
        }
        let base = entry.offset as usize;
        for (i, v) in tensor.data_mut().iter_mut().enumerate() {
            let raw = f32::from_le_bytes(
                payload[base + 4 * i..base + 4 * i + 4].try_into().unwrap(),
            );
            *v = T::from_f64(raw as f64);
        }
        filled += 1;
    }
    if filled != header.manifest.len() {
        return Err(NdpError::ConfigParse(format!(
            "checkpoint has {} tensors, model expects {filled}",
            header.manifest.len()
        )));
    }
    Ok((params, header.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn small_run_config() -> RunConfig {
        RunConfig::from_toml_str(
            "[model]\nembed_width = 8\nnum_blocks = 1\nnum_heads = 2\ntimesteps = 4\n",
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let cfg = small_run_config();
        let params = ModelParams::<f32>::init(&cfg.model_config(), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ndpc");
        save_checkpoint(&params, &cfg, &path).unwrap();
        let (loaded, cfg2) = load_checkpoint::<f32>(&path).unwrap();
        for ((n1, t1), (n2, t2)) in params.named().iter().zip(loaded.named().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data(), "{n1} differs");
        }
        assert_eq!(cfg.to_toml_string(), cfg2.to_toml_string());

        // saving again produces identical bytes
        let path2 = dir.path().join("m2.ndpc");
        save_checkpoint(&loaded, &cfg2, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corruption_is_reported_not_crashed() {
        let cfg = small_run_config();
        let params = ModelParams::<f32>::init(&cfg.model_config(), 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ndpc");
        save_checkpoint(&params, &cfg, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // truncated payload
        let cut = dir.path().join("cut.ndpc");
        std::fs::write(&cut, &bytes[..bytes.len() - 17]).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&cut),
            Err(NdpError::Truncated { .. }) | Err(NdpError::OffsetOutOfBounds { .. })
        ));

        // bad magic
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let badp = dir.path().join("bad.ndpc");
        std::fs::write(&badp, &bad).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&badp), Err(NdpError::BadMagic { .. })));

        // unsupported version
        let mut v9 = bytes.clone();
        v9[4] = 9;
        let v9p = dir.path().join("v9.ndpc");
        std::fs::write(&v9p, &v9).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&v9p),
            Err(NdpError::UnsupportedVersion { found: 9 })
        ));

        // header claiming data beyond the file end
        let mut short = bytes.clone();
        short.truncate(bytes.len() - 4);
        let shortp = dir.path().join("short.ndpc");
        std::fs::write(&shortp, &short).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&shortp),
            Err(NdpError::Truncated { .. }) | Err(NdpError::OffsetOutOfBounds { .. })
        ));
    }

    #[test]
    fn header_offset_tampering_is_bounds_checked() {
        let cfg = small_run_config();
        let params = ModelParams::<f32>::init(&cfg.model_config(), 13).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ndpc");
        save_checkpoint(&params, &cfg, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let text = String::from_utf8(bytes[16..16 + header_len].to_vec()).unwrap();
        // move the first tensor's offset out of bounds, keeping length equal
        let tampered = text.replacen("\"offset\":0", "\"offset\":9", 1);
        assert_eq!(text.len(), tampered.len());
        let mut out = bytes.clone();
        out[16..16 + header_len].copy_from_slice(tampered.as_bytes());
        let tp = dir.path().join("tampered.ndpc");
        std::fs::write(&tp, &out).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&tp),
            Err(NdpError::OffsetOutOfBounds { .. })
        ));
    }

    #[test]
    fn load_into_f64_upcasts() {
        let cfg = small_run_config();
        let params = ModelParams::<f32>::init(&cfg.model_config(), 14).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ndpc");
        save_checkpoint(&params, &cfg, &path).unwrap();
        let (loaded, _) = load_checkpoint::<f64>(&path).unwrap();
        for ((_, t1), (_, t2)) in params.named().iter().zip(loaded.named().iter()) {
            for (a, b) in t1.data().iter().zip(t2.data()) {
                assert_eq!(*a as f64, *b);
            }
        }
    }
}
