//! Flat binary container for model parameters.
//!
//! Layout: 4-byte magic, u32 version, u64 header length, JSON header
//! ({module, tensor names+shapes}), then the concatenated little-endian f64
//! payload in header order. A pretty-printed `<path>.json` sidecar carries
//! the same header for quick inspection.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::layers::ParamSet;
use super::tensor::Tensor2;

const MAGIC: &[u8; 4] = b"NNPC";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("io error in parameter container: {0}")]
    Io(#[from] std::io::Error),
    #[error("header encode/decode failed: {0}")]
    Header(#[from] serde_json::Error),
    #[error("not a parameter container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    BadVersion(u32),
    #[error("payload truncated: expected {expected} f64 values, got {got}")]
    Truncated { expected: usize, got: usize },
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct Header {
    module: String,
    tensors: Vec<TensorMeta>,
}

/// Reader/writer for the container format.
pub struct ParamContainer;

impl ParamContainer {
    /// Write `params` to `path` and the sidecar to `<path>.json`.
    pub fn save(path: &Path, module: &str, params: &ParamSet) -> Result<(), ContainerError> {
        let header = Header {
            module: module.to_string(),
            tensors: params
                .iter()
                .map(|(name, t)| TensorMeta {
                    name: name.to_string(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)?;

        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for (_, t) in params.iter() {
            for v in t.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;

        let sidecar = serde_json::to_string_pretty(&header)?;
        std::fs::write(path.with_extension(sidecar_ext(path)), sidecar)?;
        Ok(())
    }

    /// Load a container, returning the module name and its parameters.
    pub fn load(path: &Path) -> Result<(String, ParamSet), ContainerError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let mut v4 = [0u8; 4];
        r.read_exact(&mut v4)?;
        let version = u32::from_le_bytes(v4);
        if version != VERSION {
            return Err(ContainerError::BadVersion(version));
        }
        let mut l8 = [0u8; 8];
        r.read_exact(&mut l8)?;
        let header_len = u64::from_le_bytes(l8) as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)?;

        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        let got = rest.len() / 8;
        let expected: usize = header.tensors.iter().map(|m| m.rows * m.cols).sum();
        if got < expected {
            return Err(ContainerError::Truncated { expected, got });
        }

        let mut params = ParamSet::new();
        let mut off = 0;
        for meta in &header.tensors {
            let n = meta.rows * meta.cols;
            let values: Vec<f64> = (0..n)
                .map(|i| {
                    let s = (off + i) * 8;
                    f64::from_le_bytes(rest[s..s + 8].try_into().expect("8-byte slice"))
                })
                .collect();
            off += n;
            let t = Tensor2::from_vec(meta.rows, meta.cols, values)
                .expect("shape/payload consistency checked above");
            params.insert(&meta.name, t);
        }
        Ok((header.module, params))
    }
}

/// Sidecar keeps the original extension plus `.json` so `model.params`
/// pairs with `model.params.json`.
fn sidecar_ext(path: &Path) -> String {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{ext}.json"),
        None => "json".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_roundtrip_is_exact() {
        let dir = std::env::temp_dir().join("nnpc-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.params");

        let mut params = ParamSet::new();
        params.insert(
            "fc.w",
            Tensor2::from_fn(3, 2, |i, j| (i as f64) * 10.0 + j as f64 + 0.125),
        );
        params.insert("fc.b", Tensor2::from_vec(1, 2, vec![-1.5, 2.25]).unwrap());

        ParamContainer::save(&path, "encoder", &params).unwrap();
        let (module, loaded) = ParamContainer::load(&path).unwrap();

        assert_eq!(module, "encoder");
        assert_eq!(loaded.len(), 2);
        for (name, t) in params.iter() {
            assert_eq!(loaded.get(name).unwrap().as_slice(), t.as_slice());
        }
        let sidecar = std::fs::read_to_string(dir.join("roundtrip.params.json")).unwrap();
        assert!(sidecar.contains("fc.w"));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = std::env::temp_dir().join("nnpc-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.params");
        std::fs::write(&path, b"XXXX0000").unwrap();
        assert!(matches!(
            ParamContainer::load(&path),
            Err(ContainerError::BadMagic)
        ));
    }
}
