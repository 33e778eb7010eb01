//! Named parameter storage shared by every learnable module.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Tensor, TensorError};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Ordered collection of uniquely named parameters.
///
/// Parameters are immutable tensors; updates replace the leaf. Frozen
/// parameters are stored as constants so no gradient ever reaches them.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<ParamId, TensorError> {
        if self.index.contains_key(name) {
            return Err(TensorError::InvalidArgument {
                op: "param",
                msg: format!("duplicate parameter name {name:?}"),
            });
        }
        let tensor = Tensor::param(data, shape)?;
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
            frozen: false,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Replaces a parameter's values, keeping its name, shape and frozen state.
    pub fn set_data(&mut self, id: ParamId, data: Vec<f64>) -> Result<(), TensorError> {
        let p = &mut self.params[id.0];
        let shape = p.tensor.shape().to_vec();
        p.tensor = if p.frozen {
            Tensor::new(data, &shape)?
        } else {
            Tensor::param(data, &shape)?
        };
        Ok(())
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            if p.frozen != frozen {
                p.frozen = frozen;
                let (data, shape) = (p.tensor.to_vec(), p.tensor.shape().to_vec());
                p.tensor = if frozen {
                    Tensor::new(data, &shape).expect("shape preserved")
                } else {
                    Tensor::param(data, &shape).expect("shape preserved")
                };
            }
        }
    }

    /// A copy of this store whose tensors are replaced, in order, by `tensors`.
    pub fn with_tensors(&self, tensors: &[Tensor]) -> Self {
        assert_eq!(tensors.len(), self.params.len(), "one tensor per parameter");
        let mut out = self.clone();
        for (p, t) in out.params.iter_mut().zip(tensors) {
            p.tensor = t.clone();
        }
        out
    }

    /// Copies the values of every `prefix` parameter from `other`. Names and
    /// shapes must match one-to-one; returns the number copied.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize, TensorError> {
        let ours: Vec<usize> = (0..self.params.len()).filter(|&i| self.params[i].name.starts_with(prefix)).collect();
        let theirs = other.params.iter().filter(|p| p.name.starts_with(prefix)).count();
        let fail = |msg: String| TensorError::InvalidArgument { op: "copy_prefix_from", msg };
        if ours.len() != theirs {
            return Err(fail(format!("{prefix:?}: {} parameters here, {theirs} in source", ours.len())));
        }
        for i in ours {
            let name = self.params[i].name.clone();
            let src = other.lookup(&name).ok_or_else(|| fail(format!("source lacks {name:?}")))?;
            let src = other.get(src);
            if src.shape() != self.params[i].tensor.shape() {
                return Err(fail(format!("shape mismatch for {name:?}")));
            }
            self.set_data(ParamId(i), src.to_vec())?;
        }
        Ok(theirs)
    }

    pub fn zero_grads(&self) {
        self.params.iter().for_each(|p| p.tensor.zero_grad());
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.tensor.numel()).sum()
    }
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        let dist = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| dist.sample(&mut self.rng)).collect()
    }

    /// Scaled so that a `fan_in -> fan_out` projection roughly preserves variance.
    pub fn linear(&mut self, fan_in: usize, fan_out: usize) -> Vec<f64> {
        self.normal(fan_in * fan_out, 1.0 / (fan_in as f64).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a", vec![1.0], &[1]).unwrap();
        assert!(s.add("a", vec![1.0], &[1]).is_err());
    }

    #[test]
    fn frozen_params_get_no_grad() {
        let mut s = ParamStore::new();
        let a = s.add("backbone.w", vec![2.0], &[1]).unwrap();
        let b = s.add("dfm.w", vec![3.0], &[1]).unwrap();
        s.set_frozen("backbone", true);
        let loss = s.get(a).mul(s.get(b)).unwrap().sum();
        backward(&loss).unwrap();
        assert!(s.get(a).grad().is_none());
        assert_eq!(s.get(b).grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(Init::new(7).normal(4, 1.0), Init::new(7).normal(4, 1.0));
        assert_ne!(Init::new(7).normal(4, 1.0), Init::new(8).normal(4, 1.0));
    }
}
