//! Checkpoint archive: a single file holding a JSON metadata record
//! (format version, network config, iteration counter, last loss) followed
//! by named parameter arrays with shapes, little-endian f32/f64 payloads,
//! sorted by name. Loading verifies the magic, the declared byte order,
//! and (when an expected config is supplied) config equality.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::network::{Model, NetworkConfig};
use crate::nn::{Adam, Init};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"HADCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: NetworkConfig,
    pub iteration: u64,
    pub loss: Option<f64>,
    pub byte_order: String,
}

impl CheckpointMeta {
    pub fn new(config: NetworkConfig, iteration: u64, loss: Option<f64>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config,
            iteration,
            loss,
            byte_order: "little".to_string(),
        }
    }
}

fn dtype_code(dtype: DType) -> Result<u8> {
    match dtype {
        DType::F32 => Ok(0),
        DType::F64 => Ok(1),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[dtype_code(t.dtype())?])?;
    w.write_all(&(t.dims().len() as u32).to_le_bytes())?;
    for &d in t.dims() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match t.dtype() {
        DType::F32 => {
            let data = t.flatten_all()?.to_vec1::<f32>()?;
            w.write_all(&(data.len() as u64 * 4).to_le_bytes())?;
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        DType::F64 => {
            let data = t.flatten_all()?.to_vec1::<f64>()?;
            w.write_all(&(data.len() as u64 * 8).to_le_bytes())?;
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        _ => unreachable!(),
    }
    Ok(())
}

fn read_exact_vec(r: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let b = read_exact_vec(r, 4)?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let b = read_exact_vec(r, 8)?;
    Ok(u64::from_le_bytes(b.try_into().unwrap()))
}

fn read_tensor(r: &mut impl Read, device: &Device) -> Result<(String, Tensor)> {
    let name_len = read_u32(r)? as usize;
    let name = String::from_utf8(read_exact_vec(r, name_len)?)
        .map_err(|e| Error::Checkpoint(format!("invalid tensor name: {e}")))?;
    let mut code = [0u8; 1];
    r.read_exact(&mut code)?;
    let ndims = read_u32(r)? as usize;
    let mut dims = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        dims.push(read_u64(r)? as usize);
    }
    let byte_len = read_u64(r)? as usize;
    let bytes = read_exact_vec(r, byte_len)?;
    let n: usize = dims.iter().product();
    let tensor = match code[0] {
        0 => {
            if byte_len != n * 4 {
                return Err(Error::Checkpoint(format!("payload size mismatch for {name}")));
            }
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(data, dims, device)?
        }
        1 => {
            if byte_len != n * 8 {
                return Err(Error::Checkpoint(format!("payload size mismatch for {name}")));
            }
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(data, dims, device)?
        }
        other => return Err(Error::Checkpoint(format!("unknown dtype code {other}"))),
    };
    Ok((name, tensor))
}

/// Serialize the tensor section alone (sorted by name). Used both by
/// [`save`] and by the weight-sharing check.
pub fn tensor_section(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut sorted: Vec<&(String, Tensor)> = tensors.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = Vec::new();
    out.extend_from_slice(&(sorted.len() as u64).to_le_bytes());
    for (name, t) in sorted {
        write_tensor(&mut out, name, t)?;
    }
    Ok(out)
}

pub fn save(path: &Path, meta: &CheckpointMeta, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let meta_json = serde_json::to_vec(meta)
        .map_err(|e| Error::Checkpoint(format!("metadata encode: {e}")))?;
    w.write_all(&(meta_json.len() as u64).to_le_bytes())?;
    w.write_all(&meta_json)?;
    w.write_all(&tensor_section(tensors)?)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path, device: &Device) -> Result<(CheckpointMeta, HashMap<String, Tensor>)> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_exact_vec(&mut r, MAGIC.len())?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint archive",
            path.display()
        )));
    }
    let meta_len = read_u64(&mut r)? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(&read_exact_vec(&mut r, meta_len)?)
        .map_err(|e| Error::Checkpoint(format!("metadata decode: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            meta.format_version
        )));
    }
    if meta.byte_order != "little" {
        return Err(Error::Checkpoint(format!(
            "unsupported byte order {:?}",
            meta.byte_order
        )));
    }
    let count = read_u64(&mut r)? as usize;
    let mut tensors = HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, t) = read_tensor(&mut r, device)?;
        tensors.insert(name, t);
    }
    Ok((meta, tensors))
}

/// Save a model (and optionally its optimizer state) into one archive.
pub fn save_model(
    path: &Path,
    model: &Model,
    iteration: u64,
    loss: Option<f64>,
    optimizer: Option<&Adam>,
) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = model
        .store()
        .named()
        .iter()
        .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
        .collect();
    if let Some(opt) = optimizer {
        tensors.extend(opt.state_tensors());
    }
    let meta = CheckpointMeta::new(model.config.clone(), iteration, loss);
    save(path, &meta, &tensors)
}

/// Rebuild a model from a checkpoint. When `expect` is given, the stored
/// config must match it exactly.
pub fn load_model(
    path: &Path,
    device: &Device,
    expect: Option<&NetworkConfig>,
) -> Result<(Model, CheckpointMeta, HashMap<String, Tensor>)> {
    let (meta, tensors) = load(path, device)?;
    if let Some(expected) = expect {
        if *expected != meta.config {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint {} was written with a different network config",
                path.display()
            )));
        }
    }
    let model = Model::new(meta.config.clone(), device, Init::Zeros, 0)?;
    let params: HashMap<String, Tensor> = tensors
        .iter()
        .filter(|(n, _)| !n.starts_with("opt."))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    model.store().load_values(&params)?;
    Ok((model, meta, tensors))
}

/// Byte-serialized parameter section of a model (no metadata, no
/// optimizer state).
pub fn serialized_params(model: &Model) -> Result<Vec<u8>> {
    let tensors: Vec<(String, Tensor)> = model
        .store()
        .named()
        .iter()
        .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
        .collect();
    tensor_section(&tensors)
}
