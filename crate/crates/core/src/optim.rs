//! Adam with optional global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) {
        self.step += 1;
        let scale = match self.clip_norm {
            Some(max) => {
                let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, param) in store.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            for (((p, &gi), mi), vi) in param.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * scale;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, -1.0]));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.5, -2.0]);
        let mut adam = Adam::new(0.1);
        adam.step(&mut store, &grads);
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![3.0]));
        let mut adam = Adam::new(0.05);
        for _ in 0..2000 {
            let w = store.get("w").unwrap().data()[0];
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), vec![2.0 * (w - 1.0)]);
            adam.step(&mut store, &grads);
        }
        assert!((store.get("w").unwrap().data()[0] - 1.0).abs() < 1e-3);
    }
}
