//! Parameter checkpoints: `manifest.json` (names, shapes, dtype, offsets)
//! next to `values.bin`, a concatenation of little-endian `f64` blocks.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::array::DenseArray;
use super::optim::Adam;
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VALUES_FILE: &str = "values.bin";
const FORMAT: &str = "moodgen-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub family: String,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerEntry>,
    /// Model configuration, stored verbatim.
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub family: String,
    pub meta: serde_json::Value,
    pub params: ParamStore,
    pub optimizer: Option<Adam>,
}

pub fn save(
    dir: &Path,
    family: &str,
    meta: serde_json::Value,
    store: &ParamStore,
    optimizer: Option<&Adam>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::with_capacity(store.num_scalars() * 8 * if optimizer.is_some() { 3 } else { 1 });
    let mut tensors = Vec::new();
    let mut push = |name: String, shape: &[usize], values: &[f64], bytes: &mut Vec<u8>| {
        tensors.push(TensorEntry {
            name,
            shape: shape.to_vec(),
            offset: bytes.len() / 8,
            count: values.len(),
        });
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in store.iter() {
        push(p.name.clone(), p.value.shape(), p.value.values(), &mut bytes);
    }
    if let Some(opt) = optimizer {
        for (p, m) in store.iter().zip(&opt.m) {
            push(format!("adam.m/{}", p.name), p.value.shape(), m, &mut bytes);
        }
        for (p, v) in store.iter().zip(&opt.v) {
            push(format!("adam.v/{}", p.name), p.value.shape(), v, &mut bytes);
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        family: family.into(),
        dtype: "f64-le".into(),
        tensors,
        optimizer: optimizer.map(|o| OptimizerEntry {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            step: o.step,
        }),
        meta,
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    let values_path = dir.join(VALUES_FILE);
    fs::write(&values_path, bytes).map_err(|e| Error::io(&values_path, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint manifest", path.display())));
    }
    Ok(manifest)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    if manifest.dtype != "f64-le" {
        return Err(Error::Checkpoint(format!("unsupported dtype {}", manifest.dtype)));
    }
    let values_path = dir.join(VALUES_FILE);
    let bytes = fs::read(&values_path).map_err(|e| Error::io(&values_path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint("value file length is not a multiple of 8".into()));
    }
    let read = |e: &TensorEntry| -> Result<Vec<f64>> {
        let start = e.offset * 8;
        let end = start + e.count * 8;
        let block = bytes
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} exceeds value file", e.name)))?;
        Ok(block
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let mut params = ParamStore::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for e in &manifest.tensors {
        let values = read(e)?;
        if e.name.starts_with("adam.m/") {
            m.push(values);
        } else if e.name.starts_with("adam.v/") {
            v.push(values);
        } else {
            let id = params.zeros(e.name.clone(), e.shape.clone());
            *params.get_mut(id) = DenseArray::new(e.shape.clone(), values)?;
        }
    }
    let optimizer = match manifest.optimizer {
        Some(o) => {
            if m.len() != params.len() || v.len() != params.len() {
                return Err(Error::Checkpoint("optimizer moments do not match parameters".into()));
            }
            Some(Adam {
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                step: o.step,
                m,
                v,
            })
        }
        None => None,
    };
    Ok(Checkpoint {
        family: manifest.family,
        meta: manifest.meta,
        params,
        optimizer,
    })
}

/// Copies values from `source` into `target`, requiring identical names and
/// shapes in identical order.
pub fn assign(target: &mut ParamStore, source: &ParamStore) -> Result<()> {
    if target.len() != source.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: model has {}, checkpoint has {}",
            target.len(),
            source.len()
        )));
    }
    for (t, s) in target.iter_mut().zip(source.iter()) {
        if t.name != s.name || t.value.shape() != s.value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {} {:?} does not match checkpoint entry {} {:?}",
                t.name,
                t.value.shape(),
                s.name,
                s.value.shape()
            )));
        }
        t.value = s.value.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Gradients;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #[test]
        fn values_round_trip_bit_exact(values in proptest::collection::vec(any::<f64>(), 1..40), seed in 0u64..1000) {
            let dir = tempfile::tempdir().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let a = store.zeros("a", vec![values.len()]);
            store.get_mut(a).values_mut().copy_from_slice(&values);
            store.weight("b", vec![2, 3], &mut rng);
            let mut adam = Adam::new(&store, 1e-3);
            let mut g = Gradients::zeros_like(&store);
            g.get_mut(a).fill(0.5);
            adam.update(&mut store.clone(), &g);
            save(dir.path(), "test", serde_json::json!({"k": 1}), &store, Some(&adam)).unwrap();
            let ck = load(dir.path()).unwrap();
            prop_assert_eq!(ck.family.as_str(), "test");
            for (x, y) in ck.params.iter().zip(store.iter()) {
                prop_assert_eq!(&x.name, &y.name);
                let bx: Vec<u64> = x.value.values().iter().map(|v| v.to_bits()).collect();
                let by: Vec<u64> = y.value.values().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bx, by);
            }
            let opt = ck.optimizer.unwrap();
            prop_assert_eq!(opt.step, 1);
            prop_assert_eq!(opt.m, adam.m);
        }
    }

    #[test]
    fn assign_rejects_shape_changes() {
        let mut a = ParamStore::new();
        a.zeros("x", vec![2]);
        let mut b = ParamStore::new();
        b.zeros("x", vec![3]);
        assert!(assign(&mut a, &b).is_err());
    }
}
