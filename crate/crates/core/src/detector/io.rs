//! Weight files: one line of compact JSON header, a newline, then raw
//! little-endian `f32` values for every tensor in layer order.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::network::{ConvWeights, DetectorArch, DetectorParams, Layer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::sha256_hex;

pub const WEIGHTS_FORMAT: &str = "patchlab-detector-weights";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightHeader {
    pub format: String,
    pub version: u32,
    pub arch: DetectorArch,
    pub training_seed: u64,
    pub config_hash: Option<String>,
    pub tensors: Vec<TensorEntry>,
}

fn kernel_shapes(arch: &DetectorArch) -> Vec<[usize; 4]> {
    arch.layers
        .iter()
        .filter_map(|l| match *l {
            Layer::Conv {
                in_ch,
                out_ch,
                kernel,
                ..
            } => Some([out_ch, in_ch, kernel, kernel]),
            _ => None,
        })
        .collect()
}

pub fn encode_weights<T: Scalar>(params: &DetectorParams<T>, config_hash: Option<&str>) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    for (i, (c, shape)) in params.convs.iter().zip(kernel_shapes(&params.arch)).enumerate() {
        for (name, shape, values) in [
            (format!("conv{i}.weight"), shape.to_vec(), c.weight.iter().copied().collect::<Vec<T>>()),
            (format!("conv{i}.bias"), vec![shape[0]], c.bias.to_vec()),
        ] {
            tensors.push(TensorEntry {
                name,
                shape,
                offset: data.len(),
                len: values.len(),
            });
            for v in values {
                data.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
    }
    let header = WeightHeader {
        format: WEIGHTS_FORMAT.into(),
        version: WEIGHTS_VERSION,
        arch: params.arch.clone(),
        training_seed: params.training_seed,
        config_hash: config_hash.map(str::to_string),
        tensors,
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.extend_from_slice(&data);
    out
}

pub fn decode_weights(bytes: &[u8]) -> Result<(DetectorParams<f32>, WeightHeader)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("weight file has no header terminator".into()))?;
    let header: WeightHeader = serde_json::from_slice(&bytes[..nl])?;
    if header.format != WEIGHTS_FORMAT || header.version != WEIGHTS_VERSION {
        return Err(Error::Format(format!("unsupported weight format {} v{}", header.format, header.version)));
    }
    header.arch.validate()?;
    let data = &bytes[nl + 1..];
    let read = |entry: &TensorEntry| -> Result<Vec<f32>> {
        let end = entry.offset + 4 * entry.len;
        if end > data.len() || entry.shape.iter().product::<usize>() != entry.len {
            return Err(Error::Format(format!("tensor {} is truncated or misshapen", entry.name)));
        }
        Ok(data[entry.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    };
    let shapes = kernel_shapes(&header.arch);
    if header.tensors.len() != 2 * shapes.len() {
        return Err(Error::Format("tensor count does not match architecture".into()));
    }
    let mut convs = Vec::with_capacity(shapes.len());
    for (i, shape) in shapes.iter().enumerate() {
        let (w, b) = (&header.tensors[2 * i], &header.tensors[2 * i + 1]);
        if w.shape != shape.to_vec() || b.shape != vec![shape[0]] {
            return Err(Error::Format(format!("conv{i} shape does not match architecture")));
        }
        let fan_in = shape[1] * shape[2] * shape[3];
        convs.push(ConvWeights {
            weight: Array2::from_shape_vec((shape[0], fan_in), read(w)?).unwrap(),
            bias: Array1::from_vec(read(b)?),
        });
    }
    let params = DetectorParams {
        arch: header.arch.clone(),
        convs,
        training_seed: header.training_seed,
    };
    if !params.all_finite() {
        return Err(Error::Format("weights contain non-finite values".into()));
    }
    Ok((params, header))
}

/// Writes the weight file and returns its content hash.
pub fn save_weights<T: Scalar>(path: &Path, params: &DetectorParams<T>, config_hash: Option<&str>) -> Result<String> {
    let bytes = encode_weights(params, config_hash);
    std::fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Reads a weight file; also returns its content hash.
pub fn load_weights(path: &Path) -> Result<(DetectorParams<f32>, WeightHeader, String)> {
    let bytes = std::fs::read(path)?;
    let (p, h) = decode_weights(&bytes)?;
    Ok((p, h, sha256_hex(&bytes)))
}
