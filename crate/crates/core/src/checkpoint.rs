//! Binary checkpoint format.
//!
//! Layout (all integers u32 little-endian):
//!
//! ```text
//! "GRVS" | version | tensor count | { name len | name | rank | dims.. | f32 LE values.. }*
//! ```
//!
//! Parameter tensors are stored under their layout names, momentum buffers
//! under `optimizer.velocity.<name>`, and two small metadata tensors carry
//! the encoder geometry and the optimizer hyperparameters.

use std::fs;
use std::path::Path;

use crate::encoder::{EncoderConfig, EncoderParams, Tensor};
use crate::error::{Error, Result};
use crate::optim::OptimizerState;

pub const MAGIC: [u8; 4] = *b"GRVS";
pub const FORMAT_VERSION: u32 = 1;

const META_ENCODER: &str = "meta.encoder";
const META_OPTIMIZER: &str = "meta.optimizer";
const VELOCITY_PREFIX: &str = "optimizer.velocity.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams<f32>,
    pub state: OptimizerState<f32>,
}

fn push_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("checkpoint field exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    push_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    push_u32(out, shape.len());
    for &d in shape {
        push_u32(out, d);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let cfg = self.params.config();
        let tensors = self.params.tensors();
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        push_u32(&mut out, FORMAT_VERSION as usize);
        push_u32(&mut out, 2 * tensors.len() + 2);

        let mut geometry = vec![
            cfg.input_size,
            cfg.kernel,
            cfg.stride,
            cfg.padding,
            cfg.hidden_dim,
            cfg.embed_dim,
            usize::from(cfg.head_relu),
        ];
        geometry.extend(&cfg.conv_channels);
        let geometry: Vec<f32> = geometry.into_iter().map(|v| v as f32).collect();
        push_tensor(&mut out, META_ENCODER, &[geometry.len()], &geometry);
        let s = &self.state;
        push_tensor(&mut out, META_OPTIMIZER, &[4], &[s.momentum, s.base_lr, s.lr_min, s.horizon as f32]);

        for t in tensors {
            push_tensor(&mut out, &t.name, &t.shape, &t.data);
        }
        for (t, v) in tensors.iter().zip(&s.velocity) {
            push_tensor(&mut out, &format!("{VELOCITY_PREFIX}{}", t.name), &t.shape, v);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::CorruptCheckpoint(format!(
                "bad magic bytes {magic:02x?} ({:?}), expected \"GRVS\"",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let count = r.u32("tensor count")? as usize;
        let mut raw = Vec::new();
        for i in 0..count {
            raw.push(r.tensor(i)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut take = |name: &str| -> Result<Tensor<f32>> {
            let idx = raw
                .iter()
                .position(|t| t.name == name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {name}")))?;
            Ok(raw.swap_remove(idx))
        };
        let geometry = take(META_ENCODER)?.data;
        if geometry.len() < 8 || geometry.iter().any(|v| !(*v >= 0.0 && v.fract() == 0.0)) {
            return Err(Error::CorruptCheckpoint("malformed encoder metadata".into()));
        }
        let g: Vec<usize> = geometry.iter().map(|&v| v as usize).collect();
        let config = EncoderConfig {
            input_size: g[0],
            kernel: g[1],
            stride: g[2],
            padding: g[3],
            hidden_dim: g[4],
            embed_dim: g[5],
            head_relu: g[6] != 0,
            conv_channels: g[7..].to_vec(),
        };
        config.validate().map_err(|e| Error::CorruptCheckpoint(format!("encoder metadata: {e}")))?;
        let opt = take(META_OPTIMIZER)?.data;
        if opt.len() != 4 || !(opt[3] >= 1.0 && opt[3].fract() == 0.0) {
            return Err(Error::CorruptCheckpoint("malformed optimizer metadata".into()));
        }

        let layout = config.layout();
        let mut tensors = Vec::with_capacity(layout.len());
        let mut velocity = Vec::with_capacity(layout.len());
        for (name, _) in &layout {
            tensors.push(take(name)?);
            velocity.push(take(&format!("{VELOCITY_PREFIX}{name}"))?);
        }
        if let Some(extra) = raw.first() {
            return Err(Error::CorruptCheckpoint(format!("unexpected tensor {}", extra.name)));
        }
        for ((name, shape), v) in layout.iter().zip(&velocity) {
            if v.shape != *shape {
                return Err(Error::CorruptCheckpoint(format!("velocity for {name} has shape {:?}", v.shape)));
            }
        }
        let params = EncoderParams::from_tensors(config, tensors)
            .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let state = OptimizerState {
            velocity: velocity.into_iter().map(|t| t.data).collect(),
            momentum: opt[0],
            base_lr: opt[1],
            lr_min: opt[2],
            horizon: opt[3] as usize,
        };
        Ok(Self { params, state })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tensor(&mut self, index: usize) -> Result<Tensor<f32>> {
        let ctx = format!("tensor {index}");
        let name_len = self.u32(&ctx)? as usize;
        let name = std::str::from_utf8(self.take(name_len, &ctx)?)
            .map_err(|_| Error::CorruptCheckpoint(format!("{ctx}: name is not UTF-8")))?
            .to_string();
        let ctx = format!("tensor {name}");
        let rank = self.u32(&ctx)? as usize;
        let shape = (0..rank).map(|_| self.u32(&ctx).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::CorruptCheckpoint(format!("{ctx}: shape {shape:?} overflows")))?;
        let data = self
            .take(len, &ctx)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor { name, shape, data })
    }
}

pub fn save_checkpoint(params: &EncoderParams<f32>, state: &OptimizerState<f32>, path: &Path) -> Result<()> {
    let ckpt = Checkpoint { params: params.clone(), state: state.clone() };
    fs::write(path, ckpt.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderParams<f32>, OptimizerState<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::decode(&bytes)?;
    Ok((ckpt.params, ckpt.state))
}
