use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Ordered, named collection of parameter tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter {name}")));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::Shape(format!(
                "flat vector of {} for {} parameters",
                flat.len(),
                self.parameter_count()
            )));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Places every tensor on the graph as a leaf, in store order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone())).collect()
    }

    /// Flat gradient aligned with [`flatten`](Self::flatten); unreached
    /// parameters get zeros.
    pub fn gradient(&self, grads: &Gradients, bound: &[Var]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for (t, v) in self.tensors.iter().zip(bound) {
            match grads.get(*v) {
                Some(gt) => out.extend_from_slice(gt.data()),
                None => out.extend(std::iter::repeat_n(0.0, t.len())),
            }
        }
        out
    }

    pub fn to_checkpoint(&self, fingerprint: &str) -> Checkpoint {
        Checkpoint {
            fingerprint: fingerprint.to_string(),
            parameter_count: self.parameter_count(),
            tensors: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(n, t)| NamedTensor {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds a store from a checkpoint, checking it against the expected
    /// fingerprint and scalar count.
    pub fn from_checkpoint(ck: &Checkpoint, fingerprint: &str, expected_count: usize) -> Result<Self> {
        if ck.fingerprint != fingerprint {
            return Err(Error::Checkpoint(format!(
                "fingerprint {} does not match {}",
                ck.fingerprint, fingerprint
            )));
        }
        let mut store = Self::new();
        for nt in &ck.tensors {
            store.insert(nt.name.clone(), Tensor::new(nt.shape.clone(), nt.data.clone())?)?;
        }
        if store.parameter_count() != expected_count || ck.parameter_count != expected_count {
            return Err(Error::Checkpoint(format!(
                "expected {expected_count} parameters, header says {}, found {}",
                ck.parameter_count,
                store.parameter_count()
            )));
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// On-disk parameter snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub parameter_count: usize,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]])).unwrap();
        s.insert("b", Tensor::vector(vec![5.0, 6.0])).unwrap();
        s
    }

    #[test]
    fn flatten_roundtrip() {
        let mut s = store();
        let flat = s.flatten();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let shifted: Vec<f64> = flat.iter().map(|v| v + 0.5).collect();
        s.unflatten(&shifted).unwrap();
        assert_eq!(s.flatten(), shifted);
        assert!(s.unflatten(&[1.0]).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store();
        assert!(s.insert("w", Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_validation() {
        let s = store();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        s.to_checkpoint("toy").save(&path).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ParameterStore::from_checkpoint(&ck, "toy", 6).unwrap(), s);
        assert!(ParameterStore::from_checkpoint(&ck, "other", 6).is_err());
        assert!(ParameterStore::from_checkpoint(&ck, "toy", 7).is_err());
    }

    #[test]
    fn gradient_zero_fills_unused() {
        let s = store();
        let mut g = Graph::new();
        let vars = s.bind(&mut g);
        let sq = g.mul(vars[1], vars[1]).unwrap();
        let loss = g.weighted_sum(sq, vec![1.0, 1.0]).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(s.gradient(&grads, &vars), vec![0.0, 0.0, 0.0, 0.0, 10.0, 12.0]);
    }
}
