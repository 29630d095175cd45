//! Portable named-array container.
//!
//! On disk this is a safetensors file: a JSON header mapping each array name
//! to dtype, shape and byte range, followed by the little-endian row-major
//! payload. A string manifest rides in the header's `__metadata__` block; the
//! `layer_order` entry lists array names in their logical order because the
//! safetensors header does not preserve insertion order.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, SafeTensors, TensorView, View};
use thiserror::Error;

pub const LAYER_ORDER_KEY: &str = "layer_order";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt container {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        NamedArray { shape, data: ArrayData::F32(data) }
    }

    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        NamedArray { shape, data: ArrayData::F64(data) }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn bytes(&self) -> Vec<u8> {
        match &self.data {
            ArrayData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }
}

struct Payload<'a> {
    dtype: Dtype,
    shape: &'a [usize],
    bytes: Vec<u8>,
}

impl View for &Payload<'_> {
    fn dtype(&self) -> Dtype {
        self.dtype
    }
    fn shape(&self) -> &[usize] {
        self.shape
    }
    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }
    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

/// Ordered named arrays plus a string manifest.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub metadata: BTreeMap<String, String>,
    arrays: Vec<(String, NamedArray)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.metadata.insert(key.to_string(), value.into());
        self
    }

    pub fn push(&mut self, name: impl Into<String>, array: NamedArray) {
        self.arrays.push((name.into(), array));
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _)| n.as_str())
    }

    pub fn arrays(&self) -> &[(String, NamedArray)] {
        &self.arrays
    }

    pub fn into_map(self) -> HashMap<String, NamedArray> {
        self.arrays.into_iter().collect()
    }

    pub fn write(&self, path: &Path) -> Result<(), ContainerError> {
        let payloads: Vec<(String, Payload)> = self
            .arrays
            .iter()
            .map(|(name, a)| {
                let dtype = match a.data {
                    ArrayData::F32(_) => Dtype::F32,
                    ArrayData::F64(_) => Dtype::F64,
                };
                (name.clone(), Payload { dtype, shape: &a.shape, bytes: a.bytes() })
            })
            .collect();
        let mut metadata: HashMap<String, String> =
            self.metadata.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let order: Vec<&str> = self.names().collect();
        metadata.insert(LAYER_ORDER_KEY.to_string(), serde_json::to_string(&order).expect("names serialize"));
        let bytes = safetensors::serialize(payloads.iter().map(|(n, p)| (n.as_str(), p)), &Some(metadata))
            .map_err(|e| ContainerError::Corrupt { path: path.to_path_buf(), message: e.to_string() })?;
        fs::write(path, bytes).map_err(|source| ContainerError::Io { path: path.to_path_buf(), source })
    }

    pub fn read(path: &Path) -> Result<Self, ContainerError> {
        let bytes = fs::read(path).map_err(|source| ContainerError::Io { path: path.to_path_buf(), source })?;
        let corrupt = |message: String| ContainerError::Corrupt { path: path.to_path_buf(), message };
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| corrupt(e.to_string()))?;
        let tensors = SafeTensors::deserialize(&bytes).map_err(|e| corrupt(e.to_string()))?;

        let mut metadata: BTreeMap<String, String> =
            header.metadata().clone().unwrap_or_default().into_iter().collect();
        let order: Vec<String> = match metadata.remove(LAYER_ORDER_KEY) {
            Some(json) => serde_json::from_str(&json).map_err(|e| corrupt(format!("bad layer_order: {e}")))?,
            None => {
                let mut names: Vec<String> = tensors.names().into_iter().cloned().collect();
                names.sort();
                names
            }
        };
        if order.len() != tensors.len() {
            return Err(corrupt(format!("layer_order lists {} arrays, file holds {}", order.len(), tensors.len())));
        }

        let mut arrays = Vec::with_capacity(order.len());
        for name in order {
            let view = tensors.tensor(&name).map_err(|e| corrupt(format!("{name}: {e}")))?;
            arrays.push((name, decode(&view).map_err(corrupt)?));
        }
        Ok(Container { metadata, arrays })
    }
}

fn decode(view: &TensorView<'_>) -> Result<NamedArray, String> {
    let shape = view.shape().to_vec();
    let raw = view.data();
    match view.dtype() {
        Dtype::F32 => Ok(NamedArray::f32(
            shape,
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        )),
        Dtype::F64 => Ok(NamedArray::f64(
            shape,
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        )),
        other => Err(format!("unsupported dtype {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            a in proptest::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 1..40),
            b in proptest::collection::vec(any::<f64>(), 1..40),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.safetensors");
            let mut c = Container::new().with_meta("backbone", "VGG16");
            // names deliberately out of lexical order
            c.push("z/last", NamedArray::f32(vec![a.len()], a.clone()));
            c.push("a/first", NamedArray::f64(vec![1, b.len()], b.clone()));
            c.write(&path).unwrap();
            let back = Container::read(&path).unwrap();
            prop_assert_eq!(back.names().collect::<Vec<_>>(), vec!["z/last", "a/first"]);
            prop_assert_eq!(back.metadata.get("backbone").map(String::as_str), Some("VGG16"));
            match &back.get("a/first").unwrap().data {
                ArrayData::F64(v) => prop_assert!(v.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits())),
                _ => prop_assert!(false),
            }
            prop_assert_eq!(&back.get("z/last").unwrap().data, &ArrayData::F32(a));
        }
    }

    #[test]
    fn garbage_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.safetensors");
        fs::write(&path, b"not a container").unwrap();
        assert!(matches!(Container::read(&path), Err(ContainerError::Corrupt { .. })));
        assert!(matches!(Container::read(&dir.path().join("missing")), Err(ContainerError::Io { .. })));
    }
}
