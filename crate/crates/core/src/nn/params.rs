//! Named parameter storage, initialization and safetensors checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Number of scalars in parameters whose name starts with `prefix`.
    pub fn num_scalars_under(&self, prefix: &str) -> usize {
        self.names.iter().zip(&self.values).filter(|(n, _)| n.starts_with(prefix)).map(|(_, v)| v.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), values: self.values.iter().map(Tensor::cast).collect(), index: self.index.clone() }
    }

    /// Serializes every parameter plus string metadata to safetensors bytes.
    pub fn to_safetensors(&self, metadata: BTreeMap<String, String>) -> Result<Vec<u8>> {
        let dtype = dtype_of::<T>();
        let buffers: Vec<Vec<u8>> = self
            .values
            .iter()
            .map(|t| {
                let mut out = Vec::with_capacity(t.numel() * T::BYTES);
                for &v in t.data() {
                    v.write_le(&mut out);
                }
                out
            })
            .collect();
        let mut views = Vec::with_capacity(self.len());
        for ((name, t), buf) in self.names.iter().zip(&self.values).zip(&buffers) {
            let view = TensorView::new(dtype, t.shape().to_vec(), buf).map_err(|e| Error::Checkpoint(e.to_string()))?;
            views.push((name.clone(), view));
        }
        let meta: HashMap<String, String> = metadata.into_iter().collect();
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    /// Overwrites parameters from safetensors bytes. Every parameter of this
    /// store must be present with the same shape; extra tensors are an error.
    /// Returns the file's metadata.
    pub fn load_safetensors(&mut self, bytes: &[u8]) -> Result<BTreeMap<String, String>> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if st.len() != self.len() {
            return Err(Error::Checkpoint(format!("checkpoint has {} tensors, model expects {}", st.len(), self.len())));
        }
        for i in 0..self.len() {
            let name = &self.names[i];
            let view = st.tensor(name).map_err(|_| Error::Checkpoint(format!("missing tensor {name}")))?;
            if view.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    view.shape(),
                    self.values[i].shape()
                )));
            }
            let data: Vec<T> = match view.dtype() {
                Dtype::F32 => view.data().chunks_exact(4).map(|b| T::from_f64(f32::read_le(b) as f64)).collect(),
                Dtype::F64 => view.data().chunks_exact(8).map(|b| T::from_f64(f64::read_le(b))).collect(),
                d => return Err(Error::Checkpoint(format!("tensor {name}: unsupported dtype {d:?}"))),
            };
            self.values[i] = Tensor::from_vec(view.shape(), data)?;
        }
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(meta.metadata().clone().unwrap_or_default().into_iter().collect())
    }

    pub fn save(&self, path: &Path, metadata: BTreeMap<String, String>) -> Result<()> {
        let bytes = self.to_safetensors(metadata)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(&mut self, path: &Path) -> Result<BTreeMap<String, String>> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_safetensors(&bytes)
    }
}

/// Reads only the metadata block of a safetensors file.
pub fn read_checkpoint_metadata(path: &Path) -> Result<BTreeMap<String, String>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(meta.metadata().clone().unwrap_or_default().into_iter().collect())
}

fn dtype_of<T: Scalar>() -> Dtype {
    if T::BYTES == 8 {
        Dtype::F64
    } else {
        Dtype::F32
    }
}

/// Creates parameters under a dotted name prefix.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    /// A builder whose names are nested under `name`.
    pub fn sub(&mut self, name: impl std::fmt::Display) -> ParamBuilder<'_, T> {
        let prefix = self.path(&name.to_string());
        ParamBuilder { store: self.store, rng: self.rng, prefix }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn tensor(&mut self, name: &str, t: Tensor<T>) -> Result<ParamId> {
        let path = self.path(name);
        self.store.add(&path, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..=bound)));
        self.tensor(name, t)
    }

    /// Weight with fan-in taken from all but the first dimension, initialized
    /// uniformly in `+-1/sqrt(fan_in)`.
    pub fn weight(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let fan_in: usize = shape[1..].iter().product();
        self.uniform(name, shape, 1.0 / (fan_in.max(1) as f64).sqrt())
    }

    pub fn full(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        self.tensor(name, Tensor::full(shape, T::from_f64(v)))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.full(name, shape, 0.0)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.full(name, shape, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = ParamBuilder::new(&mut s, &mut rng);
        let mut conv = b.sub("conv");
        conv.weight("w", &[4, 2, 3, 3]).unwrap();
        conv.zeros("b", &[4]).unwrap();
        b.ones("gamma", &[4]).unwrap();
        s
    }

    #[test]
    fn builder_names_are_prefixed() {
        let s = store();
        assert!(s.find("conv.w").is_some());
        assert!(s.find("conv.b").is_some());
        assert!(s.find("gamma").is_some());
        assert_eq!(s.num_scalars(), 72 + 8);
        assert_eq!(s.num_scalars_under("conv."), 76);
    }

    #[test]
    fn weight_init_respects_fan_in_bound() {
        let s = store();
        let w = s.get(s.find("conv.w").unwrap());
        let bound = 1.0 / 18f32.sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn safetensors_round_trip_is_bit_exact() {
        let s = store();
        let mut meta = BTreeMap::new();
        meta.insert("config".to_string(), "{\"a\":1}".to_string());
        let bytes = s.to_safetensors(meta.clone()).unwrap();
        let mut fresh = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut b = ParamBuilder::new(&mut fresh, &mut rng);
        b.sub("conv").weight("w", &[4, 2, 3, 3]).unwrap();
        b.sub("conv").zeros("b", &[4]).unwrap();
        b.zeros("gamma", &[4]).unwrap();
        let got = fresh.load_safetensors(&bytes).unwrap();
        assert_eq!(got, meta);
        for id in s.ids() {
            let a: Vec<u32> = s.get(id).data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = fresh.get(fresh.find(s.name(id)).unwrap()).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let s = store();
        let bytes = s.to_safetensors(BTreeMap::new()).unwrap();
        let mut other = ParamStore::<f32>::new();
        other.add("conv.w", Tensor::zeros(&[4, 2, 1, 1])).unwrap();
        other.add("conv.b", Tensor::zeros(&[4])).unwrap();
        other.add("gamma", Tensor::zeros(&[4])).unwrap();
        assert!(matches!(other.load_safetensors(&bytes), Err(Error::Checkpoint(_))));
    }
}
