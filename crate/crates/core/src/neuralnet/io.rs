//! Parameter files: magic, version, then per layer the weight and bias
//! tensors as `rank u32, dims u32…, f32 values`, all little-endian.

use std::path::Path;

use super::arch::{Architecture, LayerParams, NetworkParams};
use super::tensor::Tensor;
use super::NnError;

pub const PARAMS_MAGIC: &[u8; 8] = b"CRWDNN01";
pub const PARAMS_VERSION: u32 = 1;

pub fn encode_params(params: &NetworkParams<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.param_count() * 4);
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    for layer in params.layers() {
        for t in [&layer.weights, &layer.bias] {
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], NnError> {
        if self.bytes.len() < n {
            return Err(NnError::Truncated);
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_params(bytes: &[u8], arch: &Architecture) -> Result<NetworkParams<f32>, NnError> {
    arch.validate()?;
    let mut r = Reader { bytes };
    if r.take(8).map_err(|_| NnError::BadMagic)? != PARAMS_MAGIC {
        return Err(NnError::BadMagic);
    }
    let version = r.u32()?;
    if version != PARAMS_VERSION {
        return Err(NnError::UnsupportedVersion(version));
    }
    let mut layers = Vec::new();
    for (i, (w_shape, b_shape, _)) in arch.layer_shapes().into_iter().enumerate() {
        let mut read = |expected: &[usize], what: &str| -> Result<Tensor<f32>, NnError> {
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            if shape != expected {
                return Err(NnError::ShapeMismatch(format!(
                    "{} {what}: file has {shape:?}, expected {expected:?}",
                    arch.layer_name(i)
                )));
            }
            let n: usize = shape.iter().product();
            let data = r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::new(shape, data)
        };
        let weights = read(&w_shape, "weights")?;
        let bias = read(&b_shape, "bias")?;
        layers.push(LayerParams { weights, bias });
    }
    if !r.bytes.is_empty() {
        return Err(NnError::TrailingBytes(r.bytes.len()));
    }
    NetworkParams::from_layers(arch.clone(), layers)
}

pub fn save_params(params: &NetworkParams<f32>, path: impl AsRef<Path>) -> Result<(), NnError> {
    std::fs::write(path, encode_params(params))?;
    Ok(())
}

/// Loads parameters for the crowd-navigation architecture.
pub fn load_params(path: impl AsRef<Path>) -> Result<NetworkParams<f32>, NnError> {
    load_params_for(path, &Architecture::crowd_cnn())
}

pub fn load_params_for(path: impl AsRef<Path>, arch: &Architecture) -> Result<NetworkParams<f32>, NnError> {
    decode_params(&std::fs::read(path)?, arch)
}
