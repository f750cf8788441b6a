//! Dense row-major `f32` matrices and their on-disk format.
//!
//! A matrix is stored as a flat little-endian `f32` file plus a sidecar
//! `.hdr` text file holding `rows cols` on one line.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (self.rows, self.cols), device)?.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (rows, cols) = t.dims2()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(rows, cols, data)
    }

    pub fn header_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".hdr");
        PathBuf::from(p)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// Writes `path` (raw floats) and `path.hdr` (dimensions).
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let hdr = Self::header_path(path);
        fs::write(&hdr, format!("{} {}\n", self.rows, self.cols)).map_err(|e| Error::io(&hdr, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let hdr = Self::header_path(path);
        let text = fs::read_to_string(&hdr).map_err(|e| Error::io(&hdr, e))?;
        let dims: Vec<usize> = text
            .split_whitespace()
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Invalid(format!("bad matrix header {}: {e}", hdr.display())))?;
        let [rows, cols] = dims[..] else {
            return Err(Error::Invalid(format!(
                "matrix header {} must hold exactly two integers",
                hdr.display()
            )));
        };
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() != rows * cols * 4 {
            return Err(Error::Shape(format!(
                "{} holds {} bytes, header says {rows}x{cols}",
                path.display(),
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(rows, cols, data)
    }
}
