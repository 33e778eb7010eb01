use crate::params::{ParamId, ParamStore};
use crate::tensor::TensorError;

/// AdamW with an optional linear warm-up of the learning rate.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    step: usize,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, warmup_steps: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            warmup_steps,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn current_lr(&self) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (self.step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    /// Applies one update to every unfrozen parameter holding a gradient,
    /// then clears all gradients.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), TensorError> {
        self.step += 1;
        let lr = self.current_lr();
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let ids: Vec<ParamId> = store.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            let p = store.param(id);
            if p.frozen {
                continue;
            }
            let Some(g) = p.tensor.grad() else { continue };
            let mut w = p.tensor.to_vec();
            let (m, v) = self.moments[slot].get_or_insert_with(|| (vec![0.0; w.len()], vec![0.0; w.len()]));
            for i in 0..w.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * w[i]);
            }
            store.set_data(id, w)?;
        }
        store.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", vec![3.0, -2.0], &[2]).unwrap();
        let mut opt = AdamW::new(0.1, 0.0, 0);
        for _ in 0..300 {
            let x = store.get(id).clone();
            backward(&x.square().sum()).unwrap();
            opt.step(&mut store).unwrap();
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn frozen_untouched() {
        let mut store = ParamStore::new();
        let id = store.add("x", vec![1.0], &[1]).unwrap();
        store.set_frozen("x", true);
        let mut opt = AdamW::new(0.1, 0.0, 0);
        opt.step(&mut store).unwrap();
        assert_eq!(store.get(id).data(), &[1.0]);
    }
}
