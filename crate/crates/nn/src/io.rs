//! Tensor archives in the safetensors layout: a JSON header (tensor name,
//! dtype, shape, byte offsets, plus a free-form string map) followed by
//! little-endian tensor bytes.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::error::{NnError, Result};
use crate::float::Float;
use crate::tensor::Tensor;

pub type TensorMap<F> = BTreeMap<String, Tensor<F>>;

pub fn to_bytes<F: Float>(tensors: &TensorMap<F>, metadata: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let raw: Vec<(String, Vec<u8>, Vec<usize>)> = tensors
        .iter()
        .map(|(name, t)| {
            let mut bytes = Vec::with_capacity(t.numel() * std::mem::size_of::<F>());
            for &v in t.data() {
                v.write_le_bytes(&mut bytes);
            }
            (name.clone(), bytes, t.shape().to_vec())
        })
        .collect();
    let views = raw
        .iter()
        .map(|(name, bytes, shape)| {
            TensorView::new(F::DTYPE, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| NnError::Serialize(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta: HashMap<String, String> = metadata.clone().into_iter().collect();
    safetensors::serialize(views, Some(meta)).map_err(|e| NnError::Serialize(e.to_string()))
}

pub fn from_bytes<F: Float>(bytes: &[u8]) -> Result<(TensorMap<F>, BTreeMap<String, String>)> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| NnError::Serialize(e.to_string()))?;
    let mut out = TensorMap::new();
    for (name, view) in st.tensors() {
        let data: Vec<F> = match view.dtype() {
            Dtype::F32 => view
                .data()
                .chunks_exact(4)
                .map(|c| F::of(f32::from_le_bytes(c.try_into().expect("4")) as f64))
                .collect(),
            Dtype::F64 => view
                .data()
                .chunks_exact(8)
                .map(|c| F::of(f64::from_le_bytes(c.try_into().expect("8"))))
                .collect(),
            other => {
                return Err(NnError::Serialize(format!(
                    "tensor `{name}` has unsupported dtype {other:?}"
                )))
            }
        };
        out.insert(name, Tensor::new(view.shape().to_vec(), data)?);
    }
    let (_, header) =
        SafeTensors::read_metadata(bytes).map_err(|e| NnError::Serialize(e.to_string()))?;
    let meta = header
        .metadata()
        .clone()
        .unwrap_or_default()
        .into_iter()
        .collect();
    Ok((out, meta))
}

pub fn save<F: Float>(
    path: &Path,
    tensors: &TensorMap<F>,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    std::fs::write(path, to_bytes(tensors, metadata)?)?;
    Ok(())
}

pub fn load<F: Float>(path: &Path) -> Result<(TensorMap<F>, BTreeMap<String, String>)> {
    from_bytes(&std::fs::read(path)?)
}
