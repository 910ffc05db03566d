//! Binary weight files.
//!
//! Layout (all integers `u32`, all reals `f32`, little-endian):
//!
//! ```text
//! magic[8] version
//! levels proj_channels conv_channels kernel_size
//! tensor_count { rank dims[rank] values[prod(dims)] }*
//! norm_count   { channels momentum running_mean[channels] running_var[channels] }*
//! ```
//!
//! Tensors follow [`NetworkWeights::params`] order and batchnorm states
//! follow [`NetworkWeights::norm_states`] order.

use std::path::Path;

use super::{Block, ConvParams, NetConfig, NetworkWeights, NormParams};
use crate::tensor::{BatchNormMode, BatchNormState, Tensor};

pub const MAGIC: [u8; 8] = *b"SIIDWGT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Upper bound on channel counts accepted from a file.
const MAX_CHANNELS: usize = 4096;

#[derive(Debug, thiserror::Error)]
pub enum WeightsError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a weights file (bad magic bytes)")]
    Magic,
    #[error("unsupported weights format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("file truncated: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("{what}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid configuration in weights file: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
}

/// Parameter shapes implied by a configuration, in canonical order.
fn expected_shapes(cfg: &NetConfig) -> Vec<Vec<usize>> {
    let (p, c, k) = (cfg.proj_channels, cfg.conv_channels, cfg.kernel_size);
    let block = |input: usize| {
        vec![
            vec![p, input, 1, 1],
            vec![p],
            vec![p],
            vec![p],
            vec![c, p, k, k],
            vec![c],
            vec![c],
            vec![c],
        ]
    };
    let mut out = Vec::new();
    for l in 0..cfg.levels {
        out.extend(block(if l == 0 { 3 } else { c }));
    }
    out.extend(block(c));
    for _ in 0..cfg.levels {
        out.extend(block(2 * c));
    }
    out.push(vec![3, c, 1, 1]);
    out.push(vec![3]);
    out
}

fn expected_norms(cfg: &NetConfig) -> Vec<usize> {
    (0..2 * cfg.levels + 1)
        .flat_map(|_| [cfg.proj_channels, cfg.conv_channels])
        .collect()
}

pub fn encode_weights(weights: &NetworkWeights<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * weights.param_count());
    let put = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
    out.extend_from_slice(&MAGIC);
    put(&mut out, FORMAT_VERSION);
    let cfg = weights.config;
    for v in [cfg.levels, cfg.proj_channels, cfg.conv_channels, cfg.kernel_size] {
        put(&mut out, v as u32);
    }
    let params = weights.params();
    put(&mut out, params.len() as u32);
    for t in params {
        put(&mut out, t.rank() as u32);
        for &d in t.shape() {
            put(&mut out, d as u32);
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let norms = weights.norm_states();
    put(&mut out, norms.len() as u32);
    for s in norms {
        put(&mut out, s.running_mean.len() as u32);
        out.extend_from_slice(&s.momentum.to_le_bytes());
        for &v in s.running_mean.iter().chain(&s.running_var) {
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
    fn bytes(&mut self, n: usize) -> Result<&'a [u8], WeightsError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(WeightsError::Truncated {
                offset: self.pos,
                needed: n,
            });
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>, WeightsError> {
        let raw = self.bytes(n.checked_mul(4).ok_or(WeightsError::Truncated {
            offset: self.pos,
            needed: usize::MAX,
        })?)?;
        let vals: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(WeightsError::NonFinite(what.to_string()));
        }
        Ok(vals)
    }
}

/// Parses a weights file image. Never returns partially filled weights.
pub fn decode_weights(bytes: &[u8]) -> Result<NetworkWeights<f32>, WeightsError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.bytes(MAGIC.len()).map_err(|_| WeightsError::Magic)? != MAGIC {
        return Err(WeightsError::Magic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(WeightsError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let config = NetConfig {
        levels: dims[0],
        proj_channels: dims[1],
        conv_channels: dims[2],
        kernel_size: dims[3],
    };
    config.validate().map_err(|e| WeightsError::Config(e.to_string()))?;
    if config.proj_channels > MAX_CHANNELS || config.conv_channels > MAX_CHANNELS {
        return Err(WeightsError::Config(format!("channel count above {MAX_CHANNELS}")));
    }

    let shapes = expected_shapes(&config);
    let count = r.u32()? as usize;
    if count != shapes.len() {
        return Err(WeightsError::ShapeMismatch {
            what: "tensor count".into(),
            expected: vec![shapes.len()],
            found: vec![count],
        });
    }
    let mut tensors = Vec::with_capacity(count);
    for (i, shape) in shapes.iter().enumerate() {
        let rank = r.u32()? as usize;
        if rank != shape.len() {
            return Err(WeightsError::ShapeMismatch {
                what: format!("rank of tensor {i}"),
                expected: vec![shape.len()],
                found: vec![rank],
            });
        }
        let found = (0..rank)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if &found != shape {
            return Err(WeightsError::ShapeMismatch {
                what: format!("tensor {i}"),
                expected: shape.clone(),
                found,
            });
        }
        let data = r.f32s(shape.iter().product(), &format!("tensor {i}"))?;
        tensors.push(Tensor::new(shape, data).expect("shape checked"));
    }

    let norm_channels = expected_norms(&config);
    let ncount = r.u32()? as usize;
    if ncount != norm_channels.len() {
        return Err(WeightsError::ShapeMismatch {
            what: "batchnorm count".into(),
            expected: vec![norm_channels.len()],
            found: vec![ncount],
        });
    }
    let mut states = Vec::with_capacity(ncount);
    for (i, &c) in norm_channels.iter().enumerate() {
        let found = r.u32()? as usize;
        if found != c {
            return Err(WeightsError::ShapeMismatch {
                what: format!("batchnorm {i}"),
                expected: vec![c],
                found: vec![found],
            });
        }
        let what = format!("batchnorm {i}");
        let momentum = r.f32s(1, &what)?[0];
        let running_mean = r.f32s(c, &what)?;
        let running_var = r.f32s(c, &what)?;
        if running_var.iter().any(|&v| v <= 0.0) {
            return Err(WeightsError::Config(format!(
                "{what}: running variance must be positive"
            )));
        }
        states.push(BatchNormState {
            running_mean,
            running_var,
            momentum,
            mode: BatchNormMode::Inference,
        });
    }
    if r.pos != bytes.len() {
        return Err(WeightsError::TrailingBytes(bytes.len() - r.pos));
    }

    let mut tensors = tensors.into_iter();
    let mut states = states.into_iter();
    let mut block = || {
        let mut conv = || ConvParams {
            kernel: tensors.next().unwrap(),
            bias: tensors.next().unwrap(),
        };
        let proj = conv();
        let proj_norm = NormParams {
            scale: tensors.next().unwrap(),
            shift: tensors.next().unwrap(),
            state: states.next().unwrap(),
        };
        let conv_p = ConvParams {
            kernel: tensors.next().unwrap(),
            bias: tensors.next().unwrap(),
        };
        let conv_norm = NormParams {
            scale: tensors.next().unwrap(),
            shift: tensors.next().unwrap(),
            state: states.next().unwrap(),
        };
        Block {
            proj,
            proj_norm,
            conv: conv_p,
            conv_norm,
        }
    };
    let encoder = (0..config.levels).map(|_| block()).collect();
    let bottleneck = block();
    let decoder = (0..config.levels).map(|_| block()).collect();
    let head = ConvParams {
        kernel: tensors.next().unwrap(),
        bias: tensors.next().unwrap(),
    };
    Ok(NetworkWeights {
        config,
        format_version: version,
        encoder,
        bottleneck,
        decoder,
        head,
    })
}

pub fn save_weights(weights: &NetworkWeights<f32>, path: impl AsRef<Path>) -> Result<(), WeightsError> {
    std::fs::write(path, encode_weights(weights))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<NetworkWeights<f32>, WeightsError> {
    decode_weights(&std::fs::read(path)?)
}
