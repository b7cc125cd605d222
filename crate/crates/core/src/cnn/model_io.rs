//! Versioned binary model files.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic     8 bytes  "CBCNNMDL"
//! version   u32
//! seed      u64
//! input     u32 h, u32 w, u32 c
//! n_layers  u32
//! layers    tag u8 + fields (see below), repeated n_layers times
//! tensors   f32 weights then f32 biases, per parameterized layer, in order
//! ```
//!
//! Layer tags: 1 conv (u32 filters, u32 kh, u32 kw), 2 max-pool (u32 ph,
//! u32 pw), 3 dropout (f64 rate), 4 flatten, 5 dense (u32 units, u8
//! activation: 0 relu, 1 softmax).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::arch::{Activation, Architecture, LayerSpec, Shape};
use super::network::{LayerParams, Network};
use super::CnnModel;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CBCNNMDL";
pub const VERSION: u32 = 1;

pub fn encode_model(model: &CnnModel) -> Vec<u8> {
    let net = model.network();
    let arch = net.architecture();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.seed().to_le_bytes());
    for v in [arch.input.h, arch.input.w, arch.input.c, arch.layers.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for layer in &arch.layers {
        match *layer {
            LayerSpec::Conv { filters, kernel } => {
                out.push(1);
                for v in [filters, kernel.0, kernel.1] {
                    out.extend_from_slice(&(v as u32).to_le_bytes());
                }
            }
            LayerSpec::MaxPool { size } => {
                out.push(2);
                for v in [size.0, size.1] {
                    out.extend_from_slice(&(v as u32).to_le_bytes());
                }
            }
            LayerSpec::Dropout { rate } => {
                out.push(3);
                out.extend_from_slice(&rate.to_le_bytes());
            }
            LayerSpec::Flatten => out.push(4),
            LayerSpec::Dense { units, activation } => {
                out.push(5);
                out.extend_from_slice(&(units as u32).to_le_bytes());
                out.push(match activation {
                    Activation::Relu => 0,
                    Activation::Softmax => 1,
                });
            }
        }
    }
    for p in net.params() {
        for v in p.weights.iter().chain(&p.biases) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::ModelFormat(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        self.u32().map(|v| v as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::ModelFormat("tensor too large".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<CnnModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::ModelFormat("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::ModelFormat(format!("unsupported version {version}")));
    }
    let seed = r.u64()?;
    let input = Shape::new(r.usize()?, r.usize()?, r.usize()?);
    let n_layers = r.usize()?;
    let mut layers = Vec::with_capacity(n_layers.min(64));
    for _ in 0..n_layers {
        let layer = match r.u8()? {
            1 => LayerSpec::Conv {
                filters: r.usize()?,
                kernel: (r.usize()?, r.usize()?),
            },
            2 => LayerSpec::MaxPool {
                size: (r.usize()?, r.usize()?),
            },
            3 => LayerSpec::Dropout { rate: r.f64()? },
            4 => LayerSpec::Flatten,
            5 => LayerSpec::Dense {
                units: r.usize()?,
                activation: match r.u8()? {
                    0 => Activation::Relu,
                    1 => Activation::Softmax,
                    a => return Err(Error::ModelFormat(format!("unknown activation {a}"))),
                },
            },
            t => return Err(Error::ModelFormat(format!("unknown layer tag {t}"))),
        };
        layers.push(layer);
    }
    let arch = Architecture { input, layers };
    let sizes = arch.param_sizes().map_err(|e| Error::ModelFormat(e.to_string()))?;
    let mut params = Vec::with_capacity(sizes.len());
    for (nw, nb) in sizes {
        params.push(LayerParams {
            weights: r.f32s(nw)?,
            biases: r.f32s(nb)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::ModelFormat(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if params.iter().any(|p| p.weights.iter().chain(&p.biases).any(|v| !v.is_finite())) {
        return Err(Error::ModelFormat("non-finite parameter".into()));
    }
    let net = Network::from_parts(arch, params).map_err(|e| Error::ModelFormat(e.to_string()))?;
    Ok(CnnModel::from_network(net, seed))
}

pub fn save_model(model: &CnnModel, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_model(model)).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<CnnModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let model = CnnModel::cough_detector(42).unwrap();
        let bytes = encode_model(&model);
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.seed(), 42);
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = encode_model(&CnnModel::cough_detector(1).unwrap());
        assert!(matches!(decode_model(&bytes[..bytes.len() - 1]), Err(Error::ModelFormat(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_model(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(decode_model(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode_model(&long).is_err());
    }
}
