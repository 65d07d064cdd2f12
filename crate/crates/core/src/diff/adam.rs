use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::params::ParamStore;

/// Adam moments for the parameters it has seen.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    pub step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(base_lr: f64) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            base_lr,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One bias-corrected update of every parameter named in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(self.beta1, t);
        let c2 = 1.0 - libm::pow(self.beta2, t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p.data[i] -= lr * m_hat / (libm::sqrt(v_hat) + self.eps);
            }
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        Some((self.first.get(name)?, self.second.get(name)?))
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm and whether clipping happened.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> (f64, bool) {
    let sq: f64 = grads.values().flatten().map(|g| g * g).sum();
    let norm = libm::sqrt(sq);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
        (norm, true)
    } else {
        (norm, false)
    }
}
