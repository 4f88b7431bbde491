// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named-tensor files in the safetensors layout (little-endian f32).
//!
//! Weights, image shards, prototypes and probe parameters all go through
//! this one container. Tensors are kept in a `BTreeMap` so that writing the
//! same map twice produces the same bytes.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type TensorMap = BTreeMap<String, Tensor>;
pub type Metadata = BTreeMap<String, String>;

fn container_err(path: &Path, detail: impl ToString) -> Error {
    Error::Container {
        context: path.display().to_string(),
        detail: detail.to_string(),
    }
}

/// Serializes `tensors` (and optional string metadata) to bytes.
pub fn to_bytes(tensors: &TensorMap, metadata: &Metadata) -> Result<Vec<u8>> {
    let raw: Vec<(String, Vec<u8>, Vec<usize>)> = tensors
        .iter()
        .map(|(name, t)| {
            let bytes = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), bytes, t.shape().to_vec())
        })
        .collect();
    let views = raw
        .iter()
        .map(|(name, bytes, shape)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.as_str(), v))
                .map_err(|e| Error::Container {
                    context: name.clone(),
                    detail: e.to_string(),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let info = (!metadata.is_empty())
        .then(|| metadata.iter().map(|(k, v)| (k.clone(), v.clone())).collect::<HashMap<_, _>>());
    safetensors::serialize(views, info).map_err(|e| Error::Container {
        context: "serialize".into(),
        detail: e.to_string(),
    })
}

pub fn write_tensors(path: &Path, tensors: &TensorMap, metadata: &Metadata) -> Result<()> {
    let bytes = to_bytes(tensors, metadata)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a container held in memory. `label` names the source in errors.
pub fn from_bytes(bytes: &[u8], label: &Path) -> Result<(TensorMap, Metadata)> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| container_err(label, e))?;
    let mut tensors = TensorMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(container_err(
                label,
                format!("tensor `{name}` has dtype {:?}, only F32 is supported", view.dtype()),
            ));
        }
        let data: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, Tensor::new(view.shape().to_vec(), data)?);
    }
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| container_err(label, e))?;
    let metadata = meta
        .metadata()
        .as_ref()
        .map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
        .unwrap_or_default();
    Ok((tensors, metadata))
}

pub fn read_tensors(path: &Path) -> Result<(TensorMap, Metadata)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_with_metadata() {
        let mut map = TensorMap::new();
        map.insert("a".into(), Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.0]).unwrap());
        map.insert("s".into(), Tensor::new(vec![], vec![7.0]).unwrap());
        let mut meta = Metadata::new();
        meta.insert("k".into(), "v".into());
        let bytes = to_bytes(&map, &meta).unwrap();
        assert_eq!(bytes, to_bytes(&map, &meta).unwrap());
        let (back, meta_back) = from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, map);
        assert_eq!(meta_back, meta);
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(from_bytes(b"not a container", Path::new("mem")).is_err());
    }
}
