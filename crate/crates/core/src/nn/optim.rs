use super::params::{EntryKind, ParamStore};
use super::tensor::Tensor;

/// Adam with the L2 term folded into the gradient as `2 * l2 * theta`, which
/// is the exact gradient of `loss + l2 * ||theta||^2`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l2: f64,
    step: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(n_entries: usize, l2: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2,
            step: 0,
            m: vec![None; n_entries],
            v: vec![None; n_entries],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Trainable entries without a gradient still feel the L2 pull.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per entry");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in 0..store.len() {
            if store.entries()[id].kind != EntryKind::Param {
                continue;
            }
            let n = store.get(id).len();
            let m = self.m[id].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[id].get_or_insert_with(|| vec![0.0; n]);
            let g = grads[id].as_ref().map(Tensor::data);
            let theta = store.get_mut(id).data_mut();
            for i in 0..n {
                let gi = g.map_or(0.0, |g| g[i]) + 2.0 * self.l2 * theta[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                theta[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Learning rate at `epoch` (0-based): `lr0 * decay^epoch`.
pub fn exponential_lr(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}
