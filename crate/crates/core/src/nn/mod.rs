//! Neural-network plumbing shared by the segmentation and classification models:
//! convolution kernels, layer wrappers, parameter bookkeeping and checkpoints.

pub mod conv;
pub mod layers;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use std::sync::Mutex;

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder, VarMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// Buffers tracked in a [`VarMap`] that are not trained by gradient descent.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

/// Variable store whose random initializers draw from a seeded stream, so two
/// models built with the same seed and construction order are bitwise equal.
struct SeededInit {
    varmap: VarMap,
    rng: Mutex<ChaCha8Rng>,
}

impl SeededInit {
    fn sample(&self, shape: &Shape, init: Init) -> candle_core::Result<Vec<f64>> {
        let n = shape.elem_count();
        let mut rng = self.rng.lock().expect("init rng lock poisoned");
        Ok(match init {
            Init::Const(v) => vec![v; n],
            Init::Randn { mean, stdev } => {
                let d = Normal::new(mean, stdev).map_err(candle_core::Error::wrap)?;
                (0..n).map(|_| d.sample(&mut *rng)).collect()
            }
            Init::Uniform { lo, up } => {
                let d = Uniform::new_inclusive(lo, up).map_err(candle_core::Error::wrap)?;
                (0..n).map(|_| d.sample(&mut *rng)).collect()
            }
            Init::Kaiming { .. } => candle_core::bail!("kaiming hints are not used by lungscope layers"),
        })
    }
}

impl SimpleBackend for SeededInit {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let mut data = self.varmap.data().lock().expect("varmap lock poisoned");
        if let Some(v) = data.get(name) {
            let t = v.as_tensor();
            if t.shape() != &s {
                candle_core::bail!("variable {name} requested with shape {s:?}, stored {:?}", t.shape());
            }
            return t.to_dtype(dtype);
        }
        let values = self.sample(&s, h)?;
        let t = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        candle_core::bail!("variable {name} must be requested with a shape")
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.varmap.data().lock().expect("varmap lock poisoned").contains_key(name)
    }
}

/// A [`VarBuilder`] that registers new variables in `varmap`, initialized from `seed`.
pub fn seeded_builder(varmap: &VarMap, seed: u64, dtype: DType) -> VarBuilder<'static> {
    let backend = SeededInit {
        varmap: varmap.clone(),
        rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
    };
    VarBuilder::from_backend(Box::new(backend), dtype, Device::Cpu)
}

/// All variables sorted by name.
pub fn named_vars(varmap: &VarMap) -> Vec<(String, Var)> {
    let data = varmap.data().lock().expect("varmap lock poisoned");
    let mut vars: Vec<_> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    vars
}

/// Trainable variables (buffers excluded), sorted by name.
pub fn trainable_vars(varmap: &VarMap) -> Vec<(String, Var)> {
    named_vars(varmap).into_iter().filter(|(n, _)| !is_buffer(n)).collect()
}

/// Number of trainable scalars, optionally restricted to names with `prefix`.
pub fn param_count(varmap: &VarMap, prefix: Option<&str>) -> usize {
    trainable_vars(varmap)
        .iter()
        .filter(|(n, _)| prefix.is_none_or(|p| n.starts_with(p)))
        .map(|(_, v)| v.as_tensor().elem_count())
        .sum()
}

/// Deep copy of every variable's current value.
pub fn snapshot(varmap: &VarMap) -> Result<BTreeMap<String, Tensor>> {
    named_vars(varmap)
        .into_iter()
        .map(|(n, v)| Ok((n, v.as_tensor().copy()?)))
        .collect()
}

/// Restores values previously captured with [`snapshot`].
pub fn restore(varmap: &VarMap, snap: &BTreeMap<String, Tensor>) -> Result<()> {
    for (name, var) in named_vars(varmap) {
        let t = snap
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("snapshot lacks {name}")))?;
        var.set(t)?;
    }
    Ok(())
}

/// Writes all variables plus string metadata to a single safetensors file.
pub fn save_checkpoint(path: &Path, varmap: &VarMap, metadata: HashMap<String, String>) -> Result<()> {
    let tensors: Vec<(String, Tensor)> = named_vars(varmap)
        .into_iter()
        .map(|(n, v)| (n, v.as_tensor().clone()))
        .collect();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("safetensors.tmp");
    safetensors::serialize_to_file(tensors, Some(metadata), &tmp)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads only the metadata block of a checkpoint.
pub fn read_checkpoint_metadata(bytes: &[u8]) -> Result<HashMap<String, String>> {
    let (_, meta) = safetensors::SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(meta.metadata().clone().unwrap_or_default())
}

/// Loads tensors into an already-built varmap; names and shapes must match exactly.
pub fn load_tensors_into(varmap: &VarMap, bytes: &[u8], dtype: DType) -> Result<()> {
    let tensors = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?;
    let vars = named_vars(varmap);
    if tensors.len() != vars.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model expects {}",
            tensors.len(),
            vars.len()
        )));
    }
    for (name, var) in vars {
        let t = tensors
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks tensor {name}")))?;
        if t.dims() != var.as_tensor().dims() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                t.dims(),
                var.as_tensor().dims()
            )));
        }
        var.set(&t.to_dtype(dtype)?)?;
    }
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(seed: u64) -> VarMap {
        let vm = VarMap::new();
        let vb = seeded_builder(&vm, seed, DType::F32);
        layers::Conv2d::new(2, 3, layers::ConvSpec::k(3), vb.pp("c")).unwrap();
        layers::batch_norm(3, vb.pp("bn")).unwrap();
        vm
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let (a, b, c) = (build(7), build(7), build(8));
        let w = |vm: &VarMap| {
            vm.data().lock().unwrap()["c.weight"].as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        assert_eq!(w(&a), w(&b));
        assert_ne!(w(&a), w(&c));
        assert_eq!(param_count(&a, None), 3 * 2 * 9 + 3 + 3 + 3);
        assert_eq!(named_vars(&a).len(), 6);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let a = build(1);
        let meta = HashMap::from([("kind".to_string(), "test".to_string())]);
        save_checkpoint(&path, &a, meta).unwrap();
        let bytes = read_file(&path).unwrap();
        assert_eq!(read_checkpoint_metadata(&bytes).unwrap()["kind"], "test");
        let b = build(2);
        load_tensors_into(&b, &bytes, DType::F32).unwrap();
        for ((na, va), (nb, vb)) in named_vars(&a).iter().zip(named_vars(&b).iter()) {
            assert_eq!(na, nb);
            let x = va.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let y = vb.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(x, y);
        }
    }
}
