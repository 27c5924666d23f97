//! Parameter checkpoints.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON index
//! header, then every record's values as raw little-endian floats in index
//! order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MPFGVCP1";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    /// Byte offset from the start of the value section.
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Header {
    pub dtype: String,
    pub records: Vec<Record>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn to_bytes<T: Scalar>(store: &ParamStore<T>, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut values = Vec::with_capacity(store.num_values() * T::BYTES);
    let mut records = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        records.push(Record {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            frozen: p.frozen,
            offset: values.len() as u64,
        });
        for &v in p.tensor.data() {
            v.write_le(&mut values);
        }
    }
    let header = Header {
        dtype: T::DTYPE.to_string(),
        records,
        meta,
    };
    let header = serde_json::to_vec(&header).map_err(|e| TensorError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + header.len() + values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&values);
    Ok(out)
}

pub fn save<T: Scalar>(path: &Path, store: &ParamStore<T>, meta: serde_json::Value) -> Result<()> {
    let bytes = to_bytes(store, meta)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

fn read_value<T: Scalar>(dtype: &str, bytes: &[u8]) -> T {
    match dtype {
        "f64" => T::lit(f64::read_le(bytes)),
        _ => T::lit(f32::read_le(bytes) as f64),
    }
}

/// Parses a checkpoint into a fresh store (record order preserved) plus its meta.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(ParamStore<T>, serde_json::Value)> {
    let fmt = |m: &str| TensorError::Format(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(fmt("bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| fmt("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| TensorError::Format(e.to_string()))?;
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(TensorError::Format(format!("unknown dtype {other}"))),
    };
    let data = &bytes[16 + hlen..];
    let mut store = ParamStore::new();
    for r in &header.records {
        let n: usize = r.shape.iter().product();
        let start = r.offset as usize;
        let end = start + n * width;
        let raw = data
            .get(start..end)
            .ok_or_else(|| TensorError::Format(format!("record {} out of bounds", r.name)))?;
        let values = raw.chunks_exact(width).map(|c| read_value(&header.dtype, c)).collect();
        let id = store.add(r.name.clone(), Tensor::new(r.shape.clone(), values)?)?;
        store.get_mut(id).frozen = r.frozen;
    }
    Ok((store, header.meta))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, serde_json::Value)> {
    from_bytes(&fs::read(path)?)
}

/// Overwrites the values of every parameter in `store` from the file, matching
/// by name. Frozen flags in `store` are left alone.
pub fn load_into<T: Scalar>(path: &Path, store: &mut ParamStore<T>) -> Result<serde_json::Value> {
    let (loaded, meta) = load::<T>(path)?;
    let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
    for name in names {
        let src = loaded
            .by_name(&name)
            .ok_or_else(|| TensorError::Format(format!("checkpoint lacks parameter {name}")))?;
        let id = store.id_of(&name).unwrap();
        let dst = &mut store.get_mut(id).tensor;
        if dst.shape() != src.tensor.shape() {
            return Err(TensorError::Format(format!(
                "parameter {name}: shape {:?} in file, {:?} expected",
                src.tensor.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(src.tensor.data());
    }
    Ok(meta)
}
