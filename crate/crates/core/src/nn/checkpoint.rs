//! Checkpoint file: 8-byte magic, u64 LE manifest length, JSON manifest of
//! tensor names and shapes (plus free-form metadata), then every parameter
//! followed by every buffer as little-endian f32.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DFTXCKP1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub params: Vec<TensorEntry>,
    pub buffers: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn to_bytes(store: &ParamStore<f32>, meta: &serde_json::Value) -> Vec<u8> {
    let entry = |name: &str, t: &Tensor<f32>| TensorEntry {
        name: name.to_string(),
        shape: t.shape().to_vec(),
    };
    let manifest = Manifest {
        params: store.params().iter().map(|p| entry(&p.name, &p.value)).collect(),
        buffers: store.buffers().iter().map(|b| entry(&b.name, &b.value)).collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * store.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let tensors = store
        .params()
        .iter()
        .map(|p| &p.value)
        .chain(store.buffers().iter().map(|b| &b.value));
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ParamStore<f32>, Manifest)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let mut data = &bytes[16 + len..];
    let mut take = |shape: &[usize]| -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        if data.len() < 4 * n {
            return Err(bad("truncated tensor data"));
        }
        let vals = data[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        data = &data[4 * n..];
        Tensor::new(shape.to_vec(), vals)
    };
    let mut store = ParamStore::new();
    for e in &manifest.params {
        let t = take(&e.shape)?;
        store.add_param(e.name.clone(), t);
    }
    for e in &manifest.buffers {
        let t = take(&e.shape)?;
        store.add_buffer(e.name.clone(), t);
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok((store, manifest))
}

pub fn save(path: &Path, store: &ParamStore<f32>, meta: &serde_json::Value) -> Result<()> {
    std::fs::write(path, to_bytes(store, meta)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ParamStore<f32>, Manifest)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Copies checkpoint values into `target`, which must have the same tensor
/// names and shapes in the same order.
pub fn restore_into(target: &mut ParamStore<f32>, loaded: &ParamStore<f32>) -> Result<()> {
    let same = target.params().len() == loaded.params().len()
        && target.buffers().len() == loaded.buffers().len()
        && target
            .params()
            .iter()
            .zip(loaded.params())
            .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
        && target
            .buffers()
            .iter()
            .zip(loaded.buffers())
            .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
    if !same {
        return Err(Error::Checkpoint("checkpoint layout does not match the model".into()));
    }
    target.load_values_from(loaded);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add_param("a.weight", Tensor::new(vec![2, 3], vec![1.0, -0.0, 3.5, f32::MIN_POSITIVE, 1e-30, -7.25]).unwrap());
        s.add_param("a.bias", Tensor::zeros(vec![2]));
        s.add_buffer("bn.running_var", Tensor::full(vec![4], 0.3));
        s
    }

    #[test]
    fn reload_is_byte_exact() {
        let meta = serde_json::json!({"stage": "modality", "lambda": 1.0});
        let bytes = to_bytes(&store(), &meta);
        let (loaded, manifest) = from_bytes(&bytes).unwrap();
        assert_eq!(manifest.meta, meta);
        assert_eq!(to_bytes(&loaded, &manifest.meta), bytes);
        let mut target = store();
        target.params_mut()[0].value.data_mut()[0] = 99.0;
        restore_into(&mut target, &loaded).unwrap();
        assert_eq!(target.param(crate::nn::ParamId(0)).data()[0], 1.0);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = to_bytes(&store(), &serde_json::Value::Null);
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(from_bytes(b"nonsense").is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(from_bytes(&longer).is_err());
    }
}
