//! Shape-prefixed raw little-endian float arrays.
//!
//! Layout: `u32` rank, `rank` x `u64` dimensions, then the elements. The
//! element width (4 or 8 bytes) follows from the payload length.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum RawData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawArray {
    pub shape: Vec<usize>,
    pub data: RawData,
}

impl RawArray {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            shape,
            data: RawData::F32(data),
        }
    }

    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            shape,
            data: RawData::F64(data),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Elements widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            RawData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            RawData::F64(v) => v.clone(),
        }
    }

    /// Elements as `f32` (narrowing `f64` payloads).
    pub fn to_f32(&self) -> Vec<f32> {
        match &self.data {
            RawData::F32(v) => v.clone(),
            RawData::F64(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            RawData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            RawData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| Error::Format(format!("raw array: {why}"));
        let rank = u32::from_le_bytes(bytes.get(..4).ok_or_else(|| bad("missing rank"))?.try_into().unwrap()) as usize;
        let header = 4 + 8 * rank;
        if bytes.len() < header {
            return Err(bad("truncated shape"));
        }
        let shape: Vec<usize> = (0..rank)
            .map(|i| u64::from_le_bytes(bytes[4 + 8 * i..12 + 8 * i].try_into().unwrap()) as usize)
            .collect();
        let n: usize = shape.iter().product();
        let payload = &bytes[header..];
        if n == 0 {
            return if payload.is_empty() {
                Ok(Self::f32(shape, Vec::new()))
            } else {
                Err(bad("payload for an empty shape"))
            };
        }
        if payload.len() == 4 * n {
            let v = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(Self::f32(shape, v))
        } else if payload.len() == 8 * n {
            let v = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(Self::f64(shape, v))
        } else {
            Err(bad(&format!("{} payload bytes for {n} elements", payload.len())))
        }
    }
}

pub fn write_raw(path: impl AsRef<Path>, array: &RawArray) -> Result<()> {
    std::fs::write(path, array.to_bytes())?;
    Ok(())
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<RawArray> {
    RawArray::from_bytes(&std::fs::read(path)?)
}
