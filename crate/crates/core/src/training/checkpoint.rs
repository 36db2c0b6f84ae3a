//! Self-describing checkpoint files.
//!
//! Layout: a magic line `flexcast-checkpoint <header_len>\n`, a JSON header of
//! `header_len` bytes, then the tensor payload as little-endian `f32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::Adam;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{ModelConfig, ModelWeights};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "flexcast-checkpoint";
const DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub weights: ModelWeights,
    pub optimizer: Option<Adam>,
    pub step: u64,
}

impl Checkpoint {
    /// Rounds weights and moments to `f32`, so a save/load cycle is exact.
    pub fn new(
        config: ModelConfig,
        mut weights: ModelWeights,
        mut optimizer: Option<Adam>,
        step: u64,
    ) -> Self {
        weights.quantize_f32();
        if let Some(opt) = &mut optimizer {
            for m in opt.m.iter_mut().chain(opt.v.iter_mut()) {
                quantize(m);
            }
        }
        Self {
            format_version: FORMAT_VERSION,
            config,
            weights,
            optimizer,
            step,
        }
    }
}

fn quantize(m: &mut Matrix) {
    m.as_mut_slice().iter_mut().for_each(|v| *v = *v as f32 as f64);
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_config: ModelConfig,
    train_step: u64,
    dtype: String,
    optimizer_step: Option<u64>,
    tensors: Vec<TensorEntry>,
    payload_bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: u64,
    length: u64,
}

fn tensor_list(ckpt: &Checkpoint) -> Vec<(String, &Matrix)> {
    let mut out = ckpt.weights.named_leaves();
    if let Some(opt) = &ckpt.optimizer {
        let names: Vec<String> = out.iter().map(|(n, _)| n.clone()).collect();
        for (n, m) in names.iter().zip(&opt.m) {
            out.push((format!("adam.m.{n}"), m));
        }
        for (n, v) in names.iter().zip(&opt.v) {
            out.push((format!("adam.v.{n}"), v));
        }
    }
    out
}

fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let tensors = tensor_list(ckpt);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, m) in &tensors {
        let offset = payload.len() as u64;
        for &v in m.as_slice() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: [m.rows(), m.cols()],
            offset,
            length: m.len() as u64,
        });
    }
    let header = Header {
        format_version: ckpt.format_version,
        model_config: ckpt.config.clone(),
        train_step: ckpt.step,
        dtype: DTYPE.into(),
        optimizer_step: ckpt.optimizer.as_ref().map(|o| o.t),
        tensors: entries,
        payload_bytes: payload.len() as u64,
    };
    let json = serde_json::to_vec_pretty(&header)
        .map_err(|e| Error::InvalidValue(format!("checkpoint header: {e}")))?;
    let mut out = format!("{MAGIC} {}\n", json.len()).into_bytes();
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(ckpt)?;
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt("missing magic line"))?;
    let magic = std::str::from_utf8(&bytes[..nl]).map_err(|_| corrupt("magic line is not UTF-8"))?;
    let header_len: usize = magic
        .strip_prefix(MAGIC)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| corrupt("bad magic line"))?;
    let body = &bytes[nl + 1..];
    if body.len() < header_len {
        return Err(corrupt("truncated header"));
    }
    let (head, payload) = body.split_at(header_len);

    let raw: serde_json::Value =
        serde_json::from_slice(head).map_err(|e| corrupt(format!("header: {e}")))?;
    let found = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| corrupt("header lacks format_version"))?;
    if found != u64::from(FORMAT_VERSION) {
        return Err(Error::VersionMismatch {
            found: u32::try_from(found).unwrap_or(u32::MAX),
            expected: FORMAT_VERSION,
        });
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| corrupt(format!("header: {e}")))?;
    if header.dtype != DTYPE {
        return Err(corrupt(format!("unsupported dtype {}", header.dtype)));
    }
    if payload.len() as u64 != header.payload_bytes {
        return Err(corrupt(format!(
            "payload holds {} bytes, header declares {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    header
        .model_config
        .validate()
        .map_err(|e| corrupt(format!("model config: {e}")))?;

    let read = |name: &str, shape: (usize, usize)| -> Result<Matrix> {
        let e = header
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
        if (e.shape[0], e.shape[1]) != shape || e.length != (shape.0 * shape.1) as u64 {
            return Err(corrupt(format!("tensor {name} has shape {:?}, expected {shape:?}", e.shape)));
        }
        let start = usize::try_from(e.offset).map_err(|_| corrupt("offset overflow"))?;
        let end = start + shape.0 * shape.1 * 4;
        let chunk = payload
            .get(start..end)
            .ok_or_else(|| corrupt(format!("tensor {name} lies outside the payload")))?;
        let data = chunk
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Matrix::from_vec(shape.0, shape.1, data).map_err(|e| corrupt(format!("tensor {name}: {e}")))
    };

    let layout = ModelWeights::init_shapes(&header.model_config);
    let named = layout.named_leaves();
    let leaves = named
        .iter()
        .map(|(n, &s)| read(n, s))
        .collect::<Result<Vec<_>>>()?;
    let weights = ModelWeights::from_leaves(&layout, leaves)?;

    let optimizer = match header.optimizer_step {
        None => None,
        Some(t) => {
            let moments = |prefix: &str| {
                named
                    .iter()
                    .map(|(n, &s)| read(&format!("{prefix}.{n}"), s))
                    .collect::<Result<Vec<_>>>()
            };
            Some(Adam {
                m: moments("adam.m")?,
                v: moments("adam.v")?,
                t,
            })
        }
    };

    Ok(Checkpoint {
        format_version: header.format_version,
        config: header.model_config,
        weights,
        optimizer,
        step: header.train_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig::micro();
        let w = ModelWeights::init(&cfg, 5).unwrap();
        let mut opt = Adam::new(w.leaves());
        for m in &mut opt.m {
            m.as_mut_slice().iter_mut().for_each(|v| *v = 0.125);
        }
        opt.t = 7;
        Checkpoint::new(cfg, w, Some(opt), 42)
    }

    #[test]
    fn round_trip_is_exact() {
        let ckpt = sample();
        let back = decode(&encode(&ckpt).unwrap()).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn round_trip_without_optimizer() {
        let mut ckpt = sample();
        ckpt.optimizer = None;
        let back = decode(&encode(&ckpt).unwrap()).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn version_mismatch_detected() {
        let mut ckpt = sample();
        ckpt.format_version = FORMAT_VERSION + 1;
        let err = decode(&encode(&ckpt).unwrap()).unwrap_err();
        assert!(matches!(
            err,
            Error::VersionMismatch { found, expected } if found == FORMAT_VERSION + 1 && expected == FORMAT_VERSION
        ));
    }

    #[test]
    fn truncation_detected() {
        let bytes = encode(&sample()).unwrap();
        for cut in [5, bytes.len() / 3, bytes.len() - 1] {
            assert!(matches!(
                decode(&bytes[..cut]),
                Err(Error::CorruptCheckpoint(_))
            ));
        }
        assert!(matches!(decode(b"garbage\n{}"), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = sample();
        save_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
        assert!(matches!(
            load_checkpoint(dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
