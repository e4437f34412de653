//! Model checkpoints: an 8-byte magic, the length of a JSON header as a
//! little-endian `u64`, the header, then every array as raw little-endian
//! floats in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelSpec, ModelState};
use crate::tensor::{numel, Precision, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"GLCKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub precision: Precision,
    pub seed: u64,
    pub spec: ModelSpec,
    pub params: Vec<ArrayInfo>,
    pub buffers: Vec<ArrayInfo>,
}

pub fn write_checkpoint<T: Real, W: Write>(state: &ModelState<T>, mut w: W) -> Result<()> {
    let layout = state.layout();
    let header = Header {
        precision: T::PRECISION,
        seed: state.seed,
        spec: state.spec.clone(),
        params: layout
            .iter()
            .zip(&state.params)
            .map(|(s, p)| ArrayInfo {
                name: format!("{}.{}", s.layer, if s.kind == crate::ParamKind::Weight { "weight" } else { "bias" }),
                shape: p.shape().to_vec(),
            })
            .collect(),
        buffers: state
            .buffers
            .iter()
            .enumerate()
            .map(|(i, b)| ArrayInfo {
                name: format!("bn{}.{}", i / 2 + 1, if i % 2 == 0 { "running_mean" } else { "running_var" }),
                shape: b.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::new();
    for t in state.params.iter().chain(&state.buffers) {
        buf.clear();
        for &v in t.data() {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_header<R: Read>(r: &mut R) -> Result<Header> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 26 {
        return Err(Error::CorruptCheckpoint(format!("header of {len} bytes")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    serde_json::from_slice(&json).map_err(|e| Error::CorruptCheckpoint(e.to_string()))
}

/// Reads a checkpoint into precision `T`, converting if it was stored in
/// the other precision.
pub fn read_checkpoint<T: Real, R: Read>(mut r: R) -> Result<ModelState<T>> {
    let header = read_header(&mut r)?;
    let layout = header.spec.layout()?;
    if layout.len() != header.params.len() || layout.iter().zip(&header.params).any(|(s, a)| s.shape != a.shape) {
        return Err(Error::CorruptCheckpoint("arrays do not match the model spec".into()));
    }
    let read_array = |r: &mut R, shape: &[usize]| -> Result<Tensor<T>> {
        match header.precision {
            Precision::F32 => read_as::<f32, T, R>(r, shape),
            Precision::F64 => read_as::<f64, T, R>(r, shape),
        }
    };
    let params = header.params.iter().map(|a| read_array(&mut r, &a.shape)).collect::<Result<Vec<_>>>()?;
    let buffers = header.buffers.iter().map(|a| read_array(&mut r, &a.shape)).collect::<Result<Vec<_>>>()?;
    if buffers.len() != 2 * header.spec.batch_norm_widths().len() {
        return Err(Error::CorruptCheckpoint("batch-norm buffers do not match the spec".into()));
    }
    Ok(ModelState { spec: header.spec, seed: header.seed, params, buffers })
}

fn read_as<S: Real, T: Real, R: Read>(r: &mut R, shape: &[usize]) -> Result<Tensor<T>> {
    let n = numel(shape);
    let mut bytes = vec![0u8; n * S::BYTES];
    r.read_exact(&mut bytes).map_err(|e| Error::CorruptCheckpoint(format!("truncated data: {e}")))?;
    let data = bytes.chunks_exact(S::BYTES).map(|c| T::of(S::read_le(c).as_f64())).collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn save<T: Real>(state: &ModelState<T>, path: &Path) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(state, f)
}

pub fn load<T: Real>(path: &Path) -> Result<ModelState<T>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(f)
}
