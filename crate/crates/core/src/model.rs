//! An MHFA back-end together with its task head, and the `MHFA1` checkpoint format.
//!
//! Checkpoint layout, little-endian:
//!
//! ```text
//! b"MHFA1\0\0\0"                       magic, 8 bytes
//! u32 × 5                              L, D, H, C, E
//! f64 …                                w_k, w_v, W_k, W_v, W_att, W_out, b_out (row-major)
//! u32                                  head tag: 1 = CM logistic, 2 = AAM classes
//!   tag 1: f64 × E weight, f64 bias
//!   tag 2: u32 classes, f64 margin, f64 scale, f64 × classes·E weights
//! ```

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::{AamConfig, AamHead, CmHead, Head};
use crate::mhfa::{mhfa_forward, Embedding, MhfaConfig, MhfaParams};
use crate::numerics::Matrix;
use crate::protocol::LayeredFeatures;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MHFA1\0\0\0";

#[derive(Debug, Clone, PartialEq)]
pub struct Backend {
    pub cfg: MhfaConfig,
    pub params: MhfaParams,
    pub head: Head,
}

impl Backend {
    pub fn embed(&self, x: &LayeredFeatures) -> Result<Embedding> {
        Ok(mhfa_forward(x, &self.params, &self.cfg, false)?.0)
    }

    pub fn embed_all(&self, xs: &[LayeredFeatures]) -> Result<Vec<Embedding>> {
        xs.par_iter().map(|x| self.embed(x)).collect()
    }

    /// Countermeasure logit; higher means more likely bona fide.
    pub fn cm_logit(&self, x: &LayeredFeatures) -> Result<f64> {
        match &self.head {
            Head::Cm(h) => Ok(h.logit(&self.embed(x)?)),
            Head::Aam(_) => Err(Error::Config(
                "checkpoint carries a speaker head, not a CM head".into(),
            )),
        }
    }

    /// All trainable tensors, MHFA first, then the head.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.params.tensors().to_vec();
        v.extend(self.head.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self.params.tensors_mut().into_iter().collect();
        v.extend(self.head.tensors_mut());
        v
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.into(),
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format {
            path: self.path.into(),
            msg: "tensor size overflow".into(),
        })?)?;
        let v: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("{}: checkpoint tensor", self.path.display())));
        }
        Ok(v)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::new(rows, cols, self.f64s(rows * cols)?)
    }
}

pub fn checkpoint_bytes(model: &Backend) -> Vec<u8> {
    let mut w = Writer(CHECKPOINT_MAGIC.to_vec());
    let c = &model.cfg;
    for v in [c.num_layers, c.input_dim, c.num_heads, c.compression_dim, c.embed_dim] {
        w.u32(v);
    }
    for t in model.params.tensors() {
        w.f64s(t);
    }
    match &model.head {
        Head::Cm(h) => {
            w.u32(1);
            w.f64s(&h.weight);
            w.f64s(&[h.bias]);
        }
        Head::Aam(h) => {
            w.u32(2);
            w.u32(h.cfg.num_classes);
            w.f64s(&[h.cfg.margin, h.cfg.scale]);
            w.f64s(h.weights.as_slice());
        }
    }
    w.0
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<Backend> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: "MHFA1\\0\\0\\0".into(),
        });
    }
    let mut r = Reader { bytes, pos: 8, path };
    let cfg = MhfaConfig {
        num_layers: r.u32()?,
        input_dim: r.u32()?,
        num_heads: r.u32()?,
        compression_dim: r.u32()?,
        embed_dim: r.u32()?,
    };
    cfg.validate()?;
    let params = MhfaParams {
        layer_keys: r.f64s(cfg.num_layers)?,
        layer_values: r.f64s(cfg.num_layers)?,
        key_proj: r.matrix(cfg.input_dim, cfg.compression_dim)?,
        value_proj: r.matrix(cfg.input_dim, cfg.compression_dim)?,
        attention: r.matrix(cfg.compression_dim, cfg.num_heads)?,
        output: r.matrix(cfg.pooled_dim(), cfg.embed_dim)?,
        output_bias: r.f64s(cfg.embed_dim)?,
    };
    let head = match r.u32()? {
        1 => {
            let weight = r.f64s(cfg.embed_dim)?;
            let bias = r.f64s(1)?[0];
            Head::Cm(CmHead { weight, bias })
        }
        2 => {
            let num_classes = r.u32()?;
            let mv = r.f64s(2)?;
            let aam = AamConfig {
                num_classes,
                margin: mv[0],
                scale: mv[1],
            };
            aam.validate()?;
            Head::Aam(AamHead {
                weights: r.matrix(num_classes, cfg.embed_dim)?,
                cfg: aam,
            })
        }
        tag => {
            return Err(Error::Format {
                path: path.into(),
                msg: format!("unknown head tag {tag}"),
            })
        }
    };
    if r.pos != bytes.len() {
        return Err(Error::Format {
            path: path.into(),
            msg: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(Backend { cfg, params, head })
}

pub fn write_checkpoint(path: impl AsRef<Path>, model: &Backend) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Backend> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, path)
}
