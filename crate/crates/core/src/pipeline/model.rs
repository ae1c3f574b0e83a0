//! Trained model container and its binary file.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"TSCL"  u32 version (1)
//! u32 n, then n bytes of UTF-8 training configuration (key = value text)
//! f64 x 4  normalization mean x, y, z and scale
//! u32 tensor count, then per tensor: u32 rank, u64 per dimension, f64 values
//! ```
//!
//! Tensors are the weight and bias of each layer in encoder, projection,
//! classifier order.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::nn::ModelParams;
use crate::streamline::NormStats;

use super::{PipelineError, Result, TrainConfig};

const MAGIC: &[u8; 4] = b"TSCL";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub norm: NormStats,
    pub params: ModelParams<f64>,
}

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config.to_text();
        b.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        b.extend_from_slice(cfg.as_bytes());
        for v in self.norm.mean.iter().chain(std::iter::once(&self.norm.scale)) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let n_tensors = 2 * self.params.layers().count();
        b.extend_from_slice(&(n_tensors as u32).to_le_bytes());
        let mut tensor = |shape: &[usize], values: &mut dyn Iterator<Item = f64>| {
            b.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in values {
                b.extend_from_slice(&v.to_le_bytes());
            }
        };
        for l in self.params.layers() {
            tensor(&[l.weight.nrows(), l.weight.ncols()], &mut l.weight.iter().copied());
            tensor(&[l.bias.len()], &mut l.bias.iter().copied());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(PipelineError::ModelFile("not a model file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(PipelineError::ModelFile(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(n)?)
            .map_err(|_| PipelineError::ModelFile("configuration is not UTF-8".into()))?;
        let config = TrainConfig::parse(text)?;
        let mean = [r.f64()?, r.f64()?, r.f64()?];
        let scale = r.f64()?;
        let mut params = ModelParams::<f64>::zeros(&config.architecture());
        let expected = 2 * params.layers().count();
        let count = r.u32()? as usize;
        if count != expected {
            return Err(PipelineError::ModelFile(format!(
                "{count} tensors, configuration implies {expected}"
            )));
        }
        for (i, layer) in params.layers_mut().enumerate() {
            let w = r.tensor(&[layer.weight.nrows(), layer.weight.ncols()], i)?;
            layer.weight = Array2::from_shape_vec(layer.weight.raw_dim(), w).expect("checked shape");
            let b = r.tensor(&[layer.bias.len()], i)?;
            layer.bias = Array1::from(b);
        }
        if r.pos != bytes.len() {
            return Err(PipelineError::ModelFile(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            config,
            norm: NormStats { mean, scale },
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| PipelineError::ModelFile("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self, shape: &[usize], layer: usize) -> Result<Vec<f64>> {
        let rank = self.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(self.u64()?);
        }
        if dims.len() != shape.len() || dims.iter().zip(shape).any(|(&a, &b)| a != b as u64) {
            return Err(PipelineError::ModelFile(format!(
                "layer {layer}: tensor shape {dims:?}, expected {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
