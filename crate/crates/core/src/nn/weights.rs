//! Portable weight files.
//!
//! Layout: `b"CXRW"`, u32 version, u64 header length, a JSON header, then
//! little-endian tensor data. The header carries an architecture descriptor,
//! free-form metadata and one record per tensor (name, shape, dtype, byte
//! offset and length into the data section).

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::imaging::write_atomic;

pub const MAGIC: &[u8; 4] = b"CXRW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    offset: usize,
    length: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    architecture: Value,
    metadata: Value,
    tensors: Vec<TensorRecord>,
}

/// Contents of a weight file.
#[derive(Debug, Clone)]
pub struct WeightFile {
    pub architecture: Value,
    pub metadata: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl WeightFile {
    pub fn from_store(architecture: Value, metadata: Value, store: &ParamStore) -> Self {
        Self {
            architecture,
            metadata,
            tensors: store
                .entries()
                .iter()
                .map(|e| (e.name.clone(), e.tensor.clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self, dtype: DType) -> Vec<u8> {
        let mut data = Vec::new();
        let mut records = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = data.len();
            for &v in t.data() {
                match dtype {
                    DType::F64 => data.extend_from_slice(&v.to_le_bytes()),
                    DType::F32 => data.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
            records.push(TensorRecord {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype,
                offset,
                length: data.len() - offset,
            });
        }
        let header = serde_json::to_vec(&Header {
            architecture: self.architecture.clone(),
            metadata: self.metadata.clone(),
            tensors: records,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptWeights(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing CXRW magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::CorruptWeights(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let data_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("header runs past end of file"))?;
        let header: Header = serde_json::from_slice(&bytes[16..data_start])
            .map_err(|e| Error::CorruptWeights(format!("header: {e}")))?;
        let data = &bytes[data_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for r in header.tensors {
            let count: usize = r.shape.iter().product();
            if r.length != count * r.dtype.width() {
                return Err(Error::CorruptWeights(format!("tensor {} has wrong length", r.name)));
            }
            let raw = r
                .offset
                .checked_add(r.length)
                .filter(|&e| e <= data.len())
                .map(|e| &data[r.offset..e])
                .ok_or_else(|| Error::CorruptWeights(format!("tensor {} is truncated", r.name)))?;
            let values: Vec<f64> = match r.dtype {
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            tensors.push((r.name, Tensor::new(r.shape, values)));
        }
        Ok(Self {
            architecture: header.architecture,
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path, dtype: DType) -> Result<()> {
        write_atomic(path, &self.to_bytes(dtype))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies tensors into `store` by name. Every store entry must be present
    /// with the same shape; names unknown to the store are skipped when
    /// `allow_extra` is set and rejected otherwise.
    pub fn load_into(&self, store: &mut ParamStore, allow_extra: bool) -> Result<()> {
        self.load_into_where(store, allow_extra, |_| true)
    }

    /// Like [`WeightFile::load_into`], restricted to store entries for which
    /// `required` holds; other entries keep their current values.
    pub fn load_into_where(
        &self,
        store: &mut ParamStore,
        allow_extra: bool,
        required: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let mut seen: Vec<bool> = store.entries().iter().map(|e| !required(&e.name)).collect();
        for (name, t) in &self.tensors {
            match store.id(name).filter(|_| required(name)) {
                Some(id) => {
                    let want = store.get(id).shape();
                    if want != t.shape() {
                        return Err(Error::WeightMismatch(format!(
                            "{name}: expected shape {want:?}, file has {:?}",
                            t.shape()
                        )));
                    }
                    *store.get_mut(id) = t.clone();
                    seen[id] = true;
                }
                None if allow_extra || store.id(name).is_some() => {}
                None => return Err(Error::WeightMismatch(format!("unexpected tensor {name}"))),
            }
        }
        if let Some(id) = seen.iter().position(|s| !s) {
            return Err(Error::WeightMismatch(format!(
                "missing tensor {}",
                store.entries()[id].name
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::EntryKind;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 1e-300]), EntryKind::Param);
        s.add("a.running_mean", Tensor::new(vec![1], vec![0.5]), EntryKind::Buffer);
        s
    }

    #[test]
    fn round_trip_is_bit_exact_in_f64() {
        let s = store();
        let wf = WeightFile::from_store(serde_json::json!({"kind": "x"}), serde_json::json!({"epoch": 3}), &s);
        let back = WeightFile::from_bytes(&wf.to_bytes(DType::F64)).unwrap();
        assert_eq!(back.architecture["kind"], "x");
        assert_eq!(back.metadata["epoch"], 3);
        let mut s2 = store();
        s2.get_mut(0).data_mut()[0] = 9.0;
        back.load_into(&mut s2, false).unwrap();
        assert_eq!(s2.get(0), s.get(0));
    }

    #[test]
    fn f32_storage_rounds_values() {
        let s = store();
        let wf = WeightFile::from_store(Value::Null, Value::Null, &s);
        let back = WeightFile::from_bytes(&wf.to_bytes(DType::F32)).unwrap();
        assert_eq!(back.tensors[0].1.data()[1], -2.5);
        assert_eq!(back.tensors[0].1.data()[3], 0.0);
    }

    #[test]
    fn corrupt_and_mismatched_files_are_rejected() {
        let s = store();
        let bytes = WeightFile::from_store(Value::Null, Value::Null, &s).to_bytes(DType::F64);
        assert!(matches!(WeightFile::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::CorruptWeights(_))));
        assert!(matches!(WeightFile::from_bytes(b"nope"), Err(Error::CorruptWeights(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(WeightFile::from_bytes(&bad), Err(Error::CorruptWeights(_))));

        let mut other = ParamStore::new();
        other.add("a.weight", Tensor::zeros(&[4]), EntryKind::Param);
        other.add("a.running_mean", Tensor::zeros(&[1]), EntryKind::Buffer);
        let wf = WeightFile::from_bytes(&bytes).unwrap();
        assert!(matches!(wf.load_into(&mut other, false), Err(Error::WeightMismatch(_))));

        let mut bigger = store();
        bigger.add("b.weight", Tensor::zeros(&[1]), EntryKind::Param);
        assert!(matches!(wf.load_into(&mut bigger, true), Err(Error::WeightMismatch(_))));

        let mut smaller = ParamStore::new();
        smaller.add("a.weight", Tensor::zeros(&[2, 2]), EntryKind::Param);
        assert!(wf.load_into(&mut smaller, false).is_err());
        assert!(wf.load_into(&mut smaller, true).is_ok());
    }
}
