//! `.xatl` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"XATL"  u32 version  u64 meta_len  meta_len bytes of JSON metadata
//! u64 record_count
//! per record, sorted by name:
//!   u32 name_len  name (UTF-8)  u8 dtype  u8 rank  rank x u64 dims  raw data
//! ```
//!
//! Metadata is advisory; tensors are authoritative.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::store::ParameterStore;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"XATL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: Option<ModelConfig>,
    pub step: u64,
    pub seed: u64,
    pub dtype: DType,
}

impl CheckpointMeta {
    pub fn new(model: Option<ModelConfig>, step: u64, seed: u64, dtype: DType) -> Self {
        CheckpointMeta {
            model,
            step,
            seed,
            dtype,
        }
    }
}

/// A tensor of either element type, for dtype-agnostic tooling.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::Float32,
            TensorData::F64(_) => DType::Float64,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.dims(),
            TensorData::F64(t) => t.dims(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            TensorData::F32(t) => t.to_f64(),
            TensorData::F64(t) => t.clone(),
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => a.bit_eq(b),
            (TensorData::F64(a), TensorData::F64(b)) => a.bit_eq(b),
            _ => false,
        }
    }
}

pub trait IntoTensorData: Scalar {
    fn wrap(t: Tensor<Self>) -> TensorData;
    fn unwrap_data(d: TensorData) -> std::result::Result<Tensor<Self>, DType>;
}

impl IntoTensorData for f32 {
    fn wrap(t: Tensor<f32>) -> TensorData {
        TensorData::F32(t)
    }
    fn unwrap_data(d: TensorData) -> std::result::Result<Tensor<f32>, DType> {
        match d {
            TensorData::F32(t) => Ok(t),
            other => Err(other.dtype()),
        }
    }
}

impl IntoTensorData for f64 {
    fn wrap(t: Tensor<f64>) -> TensorData {
        TensorData::F64(t)
    }
    fn unwrap_data(d: TensorData) -> std::result::Result<Tensor<f64>, DType> {
        match d {
            TensorData::F64(t) => Ok(t),
            other => Err(other.dtype()),
        }
    }
}

/// Checkpoint contents with per-tensor dtypes.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCheckpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, TensorData>,
}

fn write_tensor<F: Scalar>(out: &mut Vec<u8>, t: &Tensor<F>) {
    out.push(F::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(out);
    }
}

pub fn encode(raw: &RawCheckpoint) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&raw.meta)?;
    let mut out = Vec::with_capacity(32 + meta.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(raw.tensors.len() as u64).to_le_bytes());
    for (name, t) in &raw.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        match t {
            TensorData::F32(t) => write_tensor(&mut out, t),
            TensorData::F64(t) => write_tensor(&mut out, t),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, name: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::TruncatedRecord { name: name.to_string() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, name: &str) -> Result<u8> {
        Ok(self.take(1, name)?[0])
    }

    fn u32(&mut self, name: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, name)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, name: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, name)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, name: &str) -> Result<usize> {
        usize::try_from(self.u64(name)?).map_err(|_| Error::TruncatedRecord { name: name.to_string() })
    }
}

fn read_tensor<F: Scalar>(r: &mut Reader<'_>, dims: &[usize], name: &str) -> Result<Tensor<F>> {
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(F::DTYPE.size_in_bytes()).map(|b| (n, b)));
    let Some((numel, bytes)) = numel else {
        return Err(Error::TruncatedRecord { name: name.to_string() });
    };
    let raw = r.take(bytes, name)?;
    let data: Vec<F> = raw.chunks_exact(F::DTYPE.size_in_bytes()).map(F::read_le).collect();
    debug_assert_eq!(data.len(), numel);
    Tensor::from_vec(dims, data)
}

const HEADER: &str = "<header>";

pub fn decode(buf: &[u8]) -> Result<RawCheckpoint> {
    if buf.len() >= 4 && &buf[..4] != MAGIC {
        return Err(Error::BadMagic {
            found: buf[..4].try_into().expect("4 bytes"),
        });
    }
    let mut r = Reader { buf, pos: 0 };
    r.take(4, HEADER)?;
    let version = r.u32(HEADER)?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let meta_len = r.len(HEADER)?;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len, HEADER)?).map_err(|e| Error::BadMetadata(e.to_string()))?;
    let count = r.u64(HEADER)?;
    let mut tensors = BTreeMap::new();
    let mut last = String::new();
    for i in 0..count {
        let placeholder = format!("<record {i}>");
        let name_len = r.u32(&placeholder)? as usize;
        let name = std::str::from_utf8(r.take(name_len, &placeholder)?)
            .map_err(|_| Error::BadMetadata(format!("record {i} has a non UTF-8 name")))?
            .to_string();
        let dtype = DType::from_code(r.u8(&name)?)?;
        let rank = r.u8(&name)? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| r.len(&name)).collect::<Result<_>>()?;
        let t = match dtype {
            DType::Float32 => TensorData::F32(read_tensor(&mut r, &dims, &name)?),
            DType::Float64 => TensorData::F64(read_tensor(&mut r, &dims, &name)?),
        };
        if tensors.contains_key(&name) {
            return Err(Error::DuplicateName { name });
        }
        if i > 0 && name < last {
            return Err(Error::BadMetadata(format!("record `{name}` out of order after `{last}`")));
        }
        last.clone_from(&name);
        tensors.insert(name, t);
    }
    if r.pos != buf.len() {
        return Err(Error::BadMetadata(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(RawCheckpoint { meta, tensors })
}

/// Write `bytes` to `path` via a temporary file in the same directory and an
/// atomic rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn save_raw(raw: &RawCheckpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode(raw)?)
}

pub fn load_raw(path: &Path) -> Result<RawCheckpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

pub fn save_checkpoint<F: IntoTensorData>(store: &ParameterStore<F>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let raw = RawCheckpoint {
        meta: meta.clone(),
        tensors: store.iter().map(|(n, t)| (n.clone(), F::wrap(t.clone()))).collect(),
    };
    save_raw(&raw, path)
}

/// Load a checkpoint whose tensors are all of element type `F`.
pub fn load_checkpoint<F: IntoTensorData>(path: &Path) -> Result<(ParameterStore<F>, CheckpointMeta)> {
    let raw = load_raw(path)?;
    let meta = raw.meta.clone();
    Ok((store_from_raw(raw)?, meta))
}

/// Convert decoded tensors into a store of element type `F`.
pub fn store_from_raw<F: IntoTensorData>(raw: RawCheckpoint) -> Result<ParameterStore<F>> {
    let mut store = ParameterStore::new();
    for (name, t) in raw.tensors {
        match F::unwrap_data(t) {
            Ok(t) => {
                store.insert(name, t);
            }
            Err(found) => {
                return Err(Error::DtypeMismatch {
                    name,
                    expected: F::DTYPE.name(),
                    found: found.name(),
                })
            }
        }
    }
    Ok(store)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChangedTensor {
    pub name: String,
    /// `None` when shapes or dtypes differ.
    pub max_abs_delta: Option<f64>,
}

/// Three-way partition of the names of two checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DiffReport {
    pub identical: Vec<String>,
    pub changed: Vec<ChangedTensor>,
    pub only_a: Vec<String>,
    pub only_b: Vec<String>,
}

impl DiffReport {
    pub fn is_identical(&self) -> bool {
        self.changed.is_empty() && self.only_a.is_empty() && self.only_b.is_empty()
    }

    pub fn changed_names(&self) -> impl Iterator<Item = &str> {
        self.changed.iter().map(|c| c.name.as_str())
    }
}

/// Compare tensors bit-wise; changed entries carry the max absolute delta.
pub fn diff_tensors(a: &BTreeMap<String, TensorData>, b: &BTreeMap<String, TensorData>) -> DiffReport {
    let mut r = DiffReport::default();
    for (name, ta) in a {
        match b.get(name) {
            None => r.only_a.push(name.clone()),
            Some(tb) if ta.bit_eq(tb) => r.identical.push(name.clone()),
            Some(tb) => {
                let delta = (ta.dtype() == tb.dtype() && ta.dims() == tb.dims())
                    .then(|| ta.to_f64().max_abs_diff(&tb.to_f64()));
                r.changed.push(ChangedTensor {
                    name: name.clone(),
                    max_abs_delta: delta,
                });
            }
        }
    }
    r.only_b = b.keys().filter(|n| !a.contains_key(*n)).cloned().collect();
    r
}

pub fn diff_stores<F: IntoTensorData>(a: &ParameterStore<F>, b: &ParameterStore<F>) -> DiffReport {
    let wrap = |s: &ParameterStore<F>| s.iter().map(|(n, t)| (n.clone(), F::wrap(t.clone()))).collect();
    diff_tensors(&wrap(a), &wrap(b))
}

pub fn diff_checkpoints(a: &Path, b: &Path) -> Result<DiffReport> {
    Ok(diff_tensors(&load_raw(a)?.tensors, &load_raw(b)?.tensors))
}
