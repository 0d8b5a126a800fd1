//! Model checkpoint layout (all integers little-endian):
//!
//! ```text
//! "UAVM" | u32 version | u32 n | n bytes of ModelConfig JSON
//! per learnable array: u32 rank | rank × u32 dims | f64 values
//! next-state table: n_states·rules_per_state × u32
//! ```

use std::path::Path;

use super::{param_shapes, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numcore::{Matrix, ParamSet};

pub const MODEL_MAGIC: &[u8; 4] = b"UAVM";
pub const MODEL_VERSION: u32 = 1;

pub(crate) fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_matrix(buf: &mut Vec<u8>, m: &Matrix) {
    put_u32(buf, 2);
    put_u32(buf, m.rows() as u32);
    put_u32(buf, m.cols() as u32);
    for v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Bounds-checked little-endian reader that reports offsets on failure.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], file: &'a Path) -> Self {
        Reader { bytes, pos: 0, file }
    }

    pub(crate) fn fail(&self, msg: impl Into<String>) -> Error {
        Error::format(self.file, self.pos as u64, msg)
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            self.pos -= 4;
            return Err(self.fail(format!(
                "bad magic, expected {:?}",
                std::str::from_utf8(magic).unwrap_or("?")
            )));
        }
        Ok(())
    }

    pub(crate) fn version(&mut self, expected: u32) -> Result<()> {
        let v = self.u32()?;
        if v != expected {
            self.pos -= 4;
            return Err(self.fail(format!("unsupported version {v}, expected {expected}")));
        }
        Ok(())
    }

    pub(crate) fn json<T: serde::de::DeserializeOwned>(&mut self) -> Result<T> {
        let n = self.u32()? as usize;
        let start = self.pos;
        let raw = self.take(n)?;
        serde_json::from_slice(raw).map_err(|e| Error::format(self.file, start as u64, e.to_string()))
    }

    pub(crate) fn matrix(&mut self, expect: Option<(usize, usize)>) -> Result<Matrix> {
        let rank = self.u32()?;
        if rank != 2 {
            return Err(self.fail(format!("array rank {rank}, expected 2")));
        }
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        if let Some(shape) = expect {
            if shape != (rows, cols) {
                return Err(self.fail(format!("array shape {rows}x{cols}, expected {shape:?}")));
            }
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.f64()?);
        }
        Matrix::from_vec(rows, cols, data)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail("trailing bytes"));
        }
        Ok(())
    }
}

pub(crate) fn put_json<T: serde::Serialize>(buf: &mut Vec<u8>, v: &T) {
    let json = serde_json::to_vec(v).expect("serializable");
    put_u32(buf, json.len() as u32);
    buf.extend_from_slice(&json);
}

pub fn encode_model(m: &ModelParams) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    put_u32(&mut buf, MODEL_VERSION);
    put_json(&mut buf, &m.config);
    for mat in m.params.mats() {
        put_matrix(&mut buf, mat);
    }
    for &s in &m.next_state {
        put_u32(&mut buf, s as u32);
    }
    buf
}

pub(crate) fn read_model(r: &mut Reader<'_>) -> Result<ModelParams> {
    r.magic(MODEL_MAGIC)?;
    r.version(MODEL_VERSION)?;
    let config: ModelConfig = r.json()?;
    config.check().map_err(|e| r.fail(e.to_string()))?;
    let names = [
        "state_embeddings",
        "rule_embeddings",
        "rule_selector.0.w",
        "rule_selector.0.b",
        "rule_selector.1.w",
        "rule_selector.1.b",
        "action_head.0.w",
        "action_head.0.b",
        "action_head.1.w",
        "action_head.1.b",
        "classification_head.0.w",
        "classification_head.0.b",
        "classification_head.1.w",
        "classification_head.1.b",
    ];
    let mut params = ParamSet::new();
    for (name, shape) in names.iter().zip(param_shapes(&config)) {
        let m = r.matrix(Some(shape))?;
        params.add(*name, m);
    }
    let n = config.n_states * config.rules_per_state;
    let mut next_state = Vec::with_capacity(n);
    for _ in 0..n {
        let s = r.u32()? as usize;
        if s >= config.n_states {
            return Err(r.fail(format!("next-state entry {s} out of range")));
        }
        next_state.push(s);
    }
    Ok(ModelParams {
        config,
        params,
        next_state,
    })
}

pub fn decode_model(bytes: &[u8], file: &Path) -> Result<ModelParams> {
    let mut r = Reader::new(bytes, file);
    let m = read_model(&mut r)?;
    r.finish()?;
    Ok(m)
}

pub fn save_model(m: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode_model(m)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::numcore::Rng;

    #[test]
    fn encode_decode_is_lossless() {
        let m = init_model(&ModelConfig::new(4, 5), &mut Rng::new(1)).unwrap();
        let bytes = encode_model(&m);
        let back = decode_model(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_model(&back), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let m = init_model(&ModelConfig::new(4, 5), &mut Rng::new(1)).unwrap();
        let mut bytes = encode_model(&m);
        assert!(decode_model(&bytes[..bytes.len() - 3], Path::new("mem")).is_err());
        bytes[4] = 9;
        match decode_model(&bytes, Path::new("mem")) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
    }
}
