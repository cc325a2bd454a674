//! Single-file tensor archive used for checkpoints and external prior-branch
//! weights: 8-byte magic, u32 LE manifest length, JSON manifest, then raw
//! little-endian f32 buffers in manifest order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScdError};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DBTACKPT";
pub const DTYPE: &str = "f32le";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: Option<ParamKind>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub arrays: Vec<NamedArray>,
    /// Free-form metadata (config, epoch, history for checkpoints).
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    arrays: Vec<ManifestEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

fn kind_name(kind: ParamKind) -> &'static str {
    match kind {
        ParamKind::Trainable => "trainable",
        ParamKind::Frozen => "frozen",
        ParamKind::Buffer => "buffer",
    }
}

fn parse_kind(s: &str) -> Result<ParamKind> {
    match s {
        "trainable" => Ok(ParamKind::Trainable),
        "frozen" => Ok(ParamKind::Frozen),
        "buffer" => Ok(ParamKind::Buffer),
        other => Err(ScdError::Checkpoint(format!("unknown parameter kind `{other}`"))),
    }
}

impl Archive {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            arrays: self
                .arrays
                .iter()
                .map(|a| {
                    if a.shape.iter().product::<usize>() != a.data.len() {
                        return Err(ScdError::Checkpoint(format!("array `{}` shape {:?} does not match {} values", a.name, a.shape, a.data.len())));
                    }
                    Ok(ManifestEntry { name: a.name.clone(), shape: a.shape.clone(), dtype: DTYPE.into(), kind: a.kind.map(|k| kind_name(k).into()) })
                })
                .collect::<Result<_>>()?,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let len = u32::try_from(json.len()).map_err(|_| ScdError::Checkpoint("manifest exceeds 4 GiB".into()))?;
        let payload: usize = self.arrays.iter().map(|a| a.data.len() * 4).sum();
        let mut out = Vec::with_capacity(12 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| ScdError::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("missing DBTACKPT magic"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = &bytes[12..];
        if body.len() < len {
            return Err(bad("truncated manifest"));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..len])?;
        let mut rest = &body[len..];
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for e in manifest.arrays {
            if e.dtype != DTYPE {
                return Err(ScdError::Checkpoint(format!("array `{}` has unsupported dtype `{}`", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            rest.read_exact(&mut raw).map_err(|_| ScdError::Checkpoint(format!("buffer for `{}` is truncated", e.name)))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let kind = e.kind.as_deref().map(parse_kind).transpose()?;
            arrays.push(NamedArray { name: e.name, shape: e.shape, kind, data });
        }
        if !rest.is_empty() {
            return Err(bad("trailing bytes after the last buffer"));
        }
        Ok(Self { arrays, meta: manifest.meta })
    }

    /// Snapshot every entry of a parameter store.
    pub fn from_store(store: &ParamStore<f32>, meta: serde_json::Value) -> Self {
        let arrays = store
            .entries()
            .iter()
            .map(|e| NamedArray { name: e.name.clone(), shape: e.value.shape().to_vec(), kind: Some(e.kind), data: e.value.data().to_vec() })
            .collect();
        Self { arrays, meta }
    }

    /// Overwrite every store entry from the archive. Names, shapes and
    /// (where recorded) kinds must match exactly.
    pub fn restore_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.arrays.len() != store.len() {
            return Err(ScdError::Checkpoint(format!("archive has {} arrays, model has {}", self.arrays.len(), store.len())));
        }
        for a in &self.arrays {
            let id = store.find(&a.name).ok_or_else(|| ScdError::Checkpoint(format!("model has no parameter `{}`", a.name)))?;
            if store.get(id).shape() != a.shape.as_slice() {
                return Err(ScdError::Checkpoint(format!("`{}` has shape {:?}, model expects {:?}", a.name, a.shape, store.get(id).shape())));
            }
            if a.kind.is_some_and(|k| k != store.kind(id)) {
                return Err(ScdError::Checkpoint(format!("`{}` has a different parameter kind", a.name)));
            }
            *store.get_mut(id) = Tensor::new(&a.shape, a.data.clone())?;
        }
        Ok(())
    }
}

pub fn write_archive(path: &Path, archive: &Archive) -> Result<()> {
    let bytes = archive.to_bytes()?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    Archive::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Archive {
        Archive {
            arrays: vec![
                NamedArray { name: "a".into(), shape: vec![2, 3], kind: Some(ParamKind::Trainable), data: vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, f32::MAX, 1e-30] },
                NamedArray { name: "b".into(), shape: vec![1], kind: None, data: vec![0.25] },
            ],
            meta: json!({"epoch": 3}),
        }
    }

    #[test]
    fn bytes_round_trip_bit_exact() {
        let a = sample();
        let bytes = a.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"DBTACKPT");
        let b = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(a.meta, b.meta);
        for (x, y) in a.arrays.iter().zip(&b.arrays) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.kind, y.kind);
            let xb: Vec<u32> = x.data.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn rejects_corrupt_input() {
        let mut bytes = sample().to_bytes().unwrap();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes.push(0);
        assert!(Archive::from_bytes(&bytes).is_err());
        bytes[0] = b'X';
        assert!(Archive::from_bytes(&bytes).is_err());
    }

    #[test]
    fn store_restore_checks_names_and_shapes() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", ParamKind::Trainable, Tensor::full(&[2], 1.5));
        let ar = Archive::from_store(&store, json!(null));
        let mut other = ParamStore::<f32>::new();
        other.add("w", ParamKind::Trainable, Tensor::zeros(&[2]));
        ar.restore_into(&mut other).unwrap();
        assert_eq!(other.get(other.find("w").unwrap()).data(), &[1.5, 1.5]);
        let mut wrong = ParamStore::<f32>::new();
        wrong.add("w", ParamKind::Trainable, Tensor::zeros(&[3]));
        assert!(ar.restore_into(&mut wrong).is_err());
    }
}
