//! Versioned binary container for network weights.
//!
//! Layout (all integers little-endian `u32`, floats little-endian `f64`):
//!
//! ```text
//! magic "KORRCKPT" | version | metadata length | metadata (JSON, UTF-8)
//! block count | blocks...
//! ```
//!
//! Each block is `kind (u8) | name length | name | payload`, where the MLP
//! payload is `activation (u8) | output_bias (u8) | layer count | sizes... |`
//! followed by every weight matrix and then its bias, layer by layer in
//! declaration order. Matrix payloads are `rows | cols | values`, vectors are
//! `len | values`.

use std::path::Path;

use serde_json::Value;

use super::{Activation, Matrix, MlpParams};
use crate::error::{KorrError, Result};

pub const MAGIC: &[u8; 8] = b"KORRCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Mlp(MlpParams),
    Matrix(Matrix),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: Value,
    pub blocks: Vec<(String, Block)>,
}

fn format_err(msg: impl Into<String>) -> KorrError {
    KorrError::Format(msg.into())
}

impl Checkpoint {
    pub fn new(metadata: Value) -> Self {
        Self {
            metadata,
            blocks: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, block: Block) {
        self.blocks.push((name.to_string(), block));
    }

    pub fn get(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, b)| b)
    }

    pub fn mlp(&self, name: &str) -> Result<MlpParams> {
        match self.get(name) {
            Some(Block::Mlp(p)) => Ok(p.clone()),
            _ => Err(format_err(format!("missing MLP block `{name}`"))),
        }
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        match self.get(name) {
            Some(Block::Matrix(m)) => Ok(m.clone()),
            _ => Err(format_err(format!("missing matrix block `{name}`"))),
        }
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        match self.get(name) {
            Some(Block::Vector(v)) => Ok(v.clone()),
            _ => Err(format_err(format!("missing vector block `{name}`"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let meta = serde_json::to_vec(&self.metadata)?;
        put_u32(&mut out, meta.len() as u32);
        out.extend_from_slice(&meta);
        put_u32(&mut out, self.blocks.len() as u32);
        for (name, block) in &self.blocks {
            let kind = match block {
                Block::Mlp(_) => 0u8,
                Block::Matrix(_) => 1,
                Block::Vector(_) => 2,
            };
            out.push(kind);
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            match block {
                Block::Mlp(p) => {
                    out.push(match p.hidden_activation() {
                        Activation::Relu => 0,
                        Activation::Identity => 1,
                    });
                    out.push(p.has_output_bias() as u8);
                    put_u32(&mut out, p.layer_sizes().len() as u32);
                    for &s in p.layer_sizes() {
                        put_u32(&mut out, s as u32);
                    }
                    for (w, b) in p.weights().iter().zip(p.biases()) {
                        put_f64s(&mut out, w.data());
                        put_f64s(&mut out, b);
                    }
                }
                Block::Matrix(m) => {
                    put_u32(&mut out, m.rows() as u32);
                    put_u32(&mut out, m.cols() as u32);
                    put_f64s(&mut out, m.data());
                }
                Block::Vector(v) => {
                    put_u32(&mut out, v.len() as u32);
                    put_f64s(&mut out, v);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(format_err("bad magic header"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_err(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let metadata: Value = serde_json::from_slice(r.take(meta_len)?)?;
        let n_blocks = r.u32()?;
        let mut blocks = Vec::new();
        for _ in 0..n_blocks {
            let kind = r.take(1)?[0];
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| format_err("block name is not UTF-8"))?;
            let block = match kind {
                0 => {
                    let activation = match r.take(1)?[0] {
                        0 => Activation::Relu,
                        1 => Activation::Identity,
                        a => return Err(format_err(format!("unknown activation tag {a}"))),
                    };
                    let output_bias = r.take(1)?[0] != 0;
                    let n = r.u32()? as usize;
                    let sizes: Vec<usize> = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
                    let mut weights = Vec::new();
                    let mut biases = Vec::new();
                    for w in sizes.windows(2) {
                        weights.push(Matrix::from_vec(w[1], w[0], r.f64s(w[0] * w[1])?)?);
                        biases.push(r.f64s(w[1])?);
                    }
                    Block::Mlp(MlpParams::from_parts(sizes, weights, biases, activation, output_bias)?)
                }
                1 => {
                    let rows = r.u32()? as usize;
                    let cols = r.u32()? as usize;
                    Block::Matrix(Matrix::from_vec(rows, cols, r.f64s(rows * cols)?)?)
                }
                2 => {
                    let len = r.u32()? as usize;
                    Block::Vector(r.f64s(len)?)
                }
                k => return Err(format_err(format!("unknown block kind {k}"))),
            };
            blocks.push((name, block));
        }
        if r.pos != bytes.len() {
            return Err(format_err("trailing bytes after last block"));
        }
        Ok(Self { metadata, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| format_err("size overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn round_trip_preserves_every_bit() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mlp = MlpParams::new(&[3, 4, 2], Activation::Relu, &mut rng).without_output_bias();
        let mut ck = Checkpoint::new(serde_json::json!({"kind": "test", "rate": 0.1}));
        ck.push("net", Block::Mlp(mlp.clone()));
        ck.push("a", Block::Matrix(Matrix::identity(3)));
        ck.push("logstd", Block::Vector(vec![-1.0, -1.0]));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.mlp("net").unwrap().checksum(), mlp.checksum());
    }

    #[test]
    fn header_is_little_endian_and_versioned() {
        let bytes = Checkpoint::new(Value::Null).to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let mut bytes = Checkpoint::new(Value::Null).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
