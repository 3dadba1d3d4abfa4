//! Checkpoint files.
//!
//! ```text
//! magic     8 bytes  "RSTACKPT"
//! version   u32 LE
//! json_len  u32 LE
//! config    json_len bytes, canonical ModelConfig JSON
//! width     u8       bytes per parameter (4 or 8)
//! step      u64 LE   optimizer steps taken
//! count     u64 LE   number of parameters
//! payload   count * width bytes, little-endian, in segment order
//! ```
//!
//! 32-bit payloads are the default. A 64-bit payload is written when the
//! parameters are `f64` so that 64-bit runs resume exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::tensor::Scalar;
use super::ModelError;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"RSTACKPT";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub step: u64,
    pub params: Vec<T>,
}

fn bad(m: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(m.into())
}

pub fn write_checkpoint<T: Scalar, W: Write>(mut w: W, ckpt: &Checkpoint<T>) -> std::io::Result<()> {
    let json = ckpt.config.canonical_json();
    let mut buf = Vec::with_capacity(32 + json.len() + ckpt.params.len() * T::BYTES);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(json.as_bytes());
    buf.push(T::BYTES as u8);
    buf.extend_from_slice(&ckpt.step.to_le_bytes());
    buf.extend_from_slice(&(ckpt.params.len() as u64).to_le_bytes());
    for &v in &ckpt.params {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8], ModelError> {
    if bytes.len() < n {
        return Err(bad("truncated file"));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

/// Reads a checkpoint, converting the payload to `T` if widths differ.
pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<Checkpoint<T>, ModelError> {
    let mut all = Vec::new();
    r.read_to_end(&mut all).map_err(|e| bad(e.to_string()))?;
    let mut b = all.as_slice();
    if take(&mut b, 8)? != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(take(&mut b, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let json_len = u32::from_le_bytes(take(&mut b, 4)?.try_into().unwrap()) as usize;
    let config: ModelConfig =
        serde_json::from_slice(take(&mut b, json_len)?).map_err(|e| bad(format!("config: {e}")))?;
    let width = take(&mut b, 1)?[0] as usize;
    let step = u64::from_le_bytes(take(&mut b, 8)?.try_into().unwrap());
    let count = u64::from_le_bytes(take(&mut b, 8)?.try_into().unwrap()) as usize;
    let payload = take(&mut b, count * width)?;
    if !b.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let params = match width {
        4 => payload.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
        8 => payload.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
        w => return Err(bad(format!("unsupported parameter width {w}"))),
    };
    let expected = super::Layout::new(&config).total;
    if count != expected {
        return Err(bad(format!("{count} parameters, config implies {expected}")));
    }
    Ok(Checkpoint { config, step, params })
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<(), ModelError> {
    let io = |source| ModelError::Io { path: path.to_path_buf(), source };
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ckpt).map_err(io)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>, ModelError> {
    let f = fs::File::open(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    read_checkpoint(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    #[test]
    fn round_trip_is_bit_exact() {
        let model = Model::new(ModelConfig::tiny()).unwrap();
        let params: Vec<f32> = model.init_params(3);
        let ckpt = Checkpoint { config: model.config.clone(), step: 17, params };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        let back: Checkpoint<f32> = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        assert!(back.params.iter().zip(&ckpt.params).all(|(a, b)| a.to_bits() == b.to_bits()));

        let p64: Vec<f64> = model.init_params(4);
        let ckpt = Checkpoint { config: model.config.clone(), step: 0, params: p64 };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        let back: Checkpoint<f64> = read_checkpoint(buf.as_slice()).unwrap();
        assert!(back.params.iter().zip(&ckpt.params).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rejects_corruption() {
        let model = Model::new(ModelConfig::tiny()).unwrap();
        let ckpt = Checkpoint { config: model.config.clone(), step: 0, params: model.init_params::<f32>(1) };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        assert!(read_checkpoint::<f32, _>(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint::<f32, _>(bad.as_slice()).is_err());
        buf.push(0);
        assert!(read_checkpoint::<f32, _>(buf.as_slice()).is_err());
    }
}
