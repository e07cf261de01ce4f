//! Little-endian tensor container used for checkpoints, edit deltas and head
//! corrections.
//!
//! Layout:
//!
//! ```text
//! magic        9 bytes  "MEMATCKPT"
//! version      u32
//! config       n_layers u32, n_heads u32, d_model u32, d_ff u32,
//!              vocab_size u32, max_seq_len u32,
//!              activation u8 (0 gelu, 1 relu),
//!              positional u8 (0 rotary, 1 learned, 2 none),
//!              layernorm u8, seed u64
//! metadata     u32 byte length, UTF-8 JSON object
//! n_tensors    u32
//! per tensor   name_len u32, name bytes, rank u32, dims u32 x rank,
//!              row-major f32 values
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{Activation, ModelConfig, ModelParams, Positional};

pub const MAGIC: &[u8; 9] = b"MEMATCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn from_matrix(m: &Array2<f64>) -> Self {
        Self {
            shape: vec![m.nrows(), m.ncols()],
            data: m.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn from_vector(v: &[f64]) -> Self {
        Self {
            shape: vec![v.len()],
            data: v.iter().map(|&x| x as f32).collect(),
        }
    }

    /// Rank-2 view; rank-1 tensors become a single row.
    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        let (r, c) = match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => return Err(Error::Input(format!("expected rank 1 or 2, got shape {other:?}"))),
        };
        Ok(Array2::from_shape_vec((r, c), self.data.iter().map(|&x| x as f64).collect())
            .expect("shape matches data length"))
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub config: ModelConfig,
    pub metadata: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn from_params(params: &ModelParams, metadata: Value) -> Self {
        Self {
            config: params.config.clone(),
            metadata,
            tensors: params
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, Tensor::from_matrix(t)))
                .collect(),
        }
    }

    pub fn into_params(self) -> Result<ModelParams> {
        let named = self
            .tensors
            .into_iter()
            .map(|(n, t)| t.to_matrix().map(|m| (n, m)))
            .collect::<Result<Vec<_>>>()?;
        ModelParams::from_named(self.config, named)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let c = &self.config;
        for v in [c.n_layers, c.n_heads, c.d_model, c.d_ff, c.vocab_size, c.max_seq_len] {
            put_u32(&mut out, v as u32);
        }
        out.push(match c.activation {
            Activation::Gelu => 0,
            Activation::Relu => 1,
        });
        out.push(match c.positional {
            Positional::Rotary => 0,
            Positional::Learned => 1,
            Positional::None => 2,
        });
        out.push(c.layernorm as u8);
        out.extend_from_slice(&c.seed.to_le_bytes());
        let meta = serde_json::to_vec(&self.metadata).expect("JSON values always serialize");
        put_u32(&mut out, meta.len() as u32);
        out.extend_from_slice(&meta);
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape.len() as u32);
            for &d in &t.shape {
                put_u32(&mut out, d as u32);
            }
            for &x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let activation = match r.u8()? {
            0 => Activation::Gelu,
            1 => Activation::Relu,
            x => return Err(format!("unknown activation tag {x}")),
        };
        let positional = match r.u8()? {
            0 => Positional::Rotary,
            1 => Positional::Learned,
            2 => Positional::None,
            x => return Err(format!("unknown positional tag {x}")),
        };
        let layernorm = match r.u8()? {
            0 => false,
            1 => true,
            x => return Err(format!("bad layernorm flag {x}")),
        };
        let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let config = ModelConfig {
            n_layers: dims[0],
            n_heads: dims[1],
            d_model: dims[2],
            d_ff: dims[3],
            vocab_size: dims[4],
            max_seq_len: dims[5],
            activation,
            positional,
            layernorm,
            seed,
        };
        let meta_len = r.u32()? as usize;
        let metadata = serde_json::from_slice(r.take(meta_len)?).map_err(|e| format!("metadata: {e}"))?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| e.to_string())?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(count * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor { shape, data }));
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self {
            config,
            metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Format {
            path: path.to_path_buf(),
            reason,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
}

/// Short content hash of a serializable configuration, embedded in every
/// artifact so stages can detect stale inputs.
pub fn config_hash<T: serde::Serialize>(value: &T) -> String {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(value).expect("configurations always serialize");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

/// Writes `params` as a checkpoint with `metadata`.
pub fn save_checkpoint(params: &ModelParams, metadata: Value, path: &Path) -> Result<()> {
    Container::from_params(params, metadata).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Value)> {
    let c = Container::load(path)?;
    let meta = c.metadata.clone();
    Ok((c.into_params()?, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use serde_json::json;

    fn small(positional: Positional) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 32,
            max_seq_len: 16,
            positional,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        for pos in [Positional::Rotary, Positional::Learned, Positional::None] {
            let p = ModelParams::init(&small(pos)).unwrap();
            let meta = json!({"kind": "checkpoint", "seed": 3});
            let bytes = Container::from_params(&p, meta.clone()).to_bytes();
            let back = Container::from_bytes(&bytes).unwrap();
            assert_eq!(back.metadata, meta);
            assert_eq!(back.to_bytes(), bytes);
            assert_eq!(back.into_params().unwrap(), p);
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let p = ModelParams::init(&small(Positional::Rotary)).unwrap();
        let bytes = Container::from_params(&p, json!({})).to_bytes();
        assert_eq!(&bytes[..9], b"MEMATCKPT");
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[21..25].try_into().unwrap()), 8);
        assert_eq!(bytes[37], 0);
        assert_eq!(u64::from_le_bytes(bytes[40..48].try_into().unwrap()), 3);
    }

    #[test]
    fn truncated_and_corrupt_inputs_fail() {
        let p = ModelParams::init(&small(Positional::Rotary)).unwrap();
        let bytes = Container::from_params(&p, json!({})).to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).is_err());
    }
}
