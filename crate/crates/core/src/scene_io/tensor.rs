//! Raw little-endian row-major tensor payloads.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Float64,
    Uint8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::Float32 => 4,
            DType::Float64 => 8,
            DType::Uint8 => 1,
        }
    }
}

/// Manifest entry describing one binary payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRef {
    pub file: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

impl TensorRef {
    pub fn float32(file: impl Into<String>, shape: Vec<usize>) -> Self {
        TensorRef {
            file: file.into(),
            dtype: DType::Float32,
            shape,
        }
    }

    pub fn float64(file: impl Into<String>, shape: Vec<usize>) -> Self {
        TensorRef {
            file: file.into(),
            dtype: DType::Float64,
            shape,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> usize {
        self.numel() * self.dtype.size()
    }

    /// Checks the payload size on disk against the declared shape without
    /// reading it.
    pub fn check_size(&self, root: &Path) -> Result<()> {
        let path = root.join(&self.file);
        let meta = std::fs::metadata(&path).map_err(|e| Error::Load {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if meta.len() as usize != self.byte_len() {
            return Err(Error::validation(
                None,
                &self.file,
                format!(
                    "payload is {} bytes, manifest shape {:?} x {} bytes implies {}",
                    meta.len(),
                    self.shape,
                    self.dtype.size(),
                    self.byte_len()
                ),
            ));
        }
        Ok(())
    }

    /// Reads the payload as `f64` regardless of the stored float width.
    pub fn read_f64(&self, root: &Path) -> Result<Vec<f64>> {
        let bytes = self.read_bytes(root)?;
        Ok(match self.dtype {
            DType::Float32 => decode_f32(&bytes).into_iter().map(f64::from).collect(),
            DType::Float64 => decode_f64(&bytes),
            DType::Uint8 => bytes.into_iter().map(f64::from).collect(),
        })
    }

    pub fn read_f32(&self, root: &Path) -> Result<Vec<f32>> {
        let bytes = self.read_bytes(root)?;
        Ok(match self.dtype {
            DType::Float32 => decode_f32(&bytes),
            DType::Float64 => decode_f64(&bytes).into_iter().map(|v| v as f32).collect(),
            DType::Uint8 => bytes.into_iter().map(f32::from).collect(),
        })
    }

    fn read_bytes(&self, root: &Path) -> Result<Vec<u8>> {
        let path = root.join(&self.file);
        let bytes = std::fs::read(&path).map_err(|e| Error::Load {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if bytes.len() != self.byte_len() {
            return Err(Error::validation(
                None,
                &self.file,
                format!(
                    "payload is {} bytes, manifest shape {:?} implies {}",
                    bytes.len(),
                    self.shape,
                    self.byte_len()
                ),
            ));
        }
        Ok(bytes)
    }
}

pub fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn decode_f64(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

pub fn encode_f32(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn encode_f64(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_is_bit_exact() {
        let v = [0.0f32, -1.5, f32::MIN_POSITIVE, 3.0e8, 1.0 / 3.0];
        assert_eq!(decode_f32(&encode_f32(&v)), v);
        let w = [0.1f64, -2.0, 1e-300];
        assert_eq!(decode_f64(&encode_f64(&w)), w);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_file(&dir.path().join("t.bin"), &encode_f32(&[1.0, 2.0, 3.0])).unwrap();
        let t = TensorRef::float32("t.bin", vec![2, 2]);
        assert!(matches!(t.check_size(dir.path()), Err(Error::Validation { .. })));
        assert!(matches!(t.read_f32(dir.path()), Err(Error::Validation { .. })));
        let ok = TensorRef::float32("t.bin", vec![3]);
        assert_eq!(ok.read_f64(dir.path()).unwrap(), vec![1.0, 2.0, 3.0]);
    }
}
