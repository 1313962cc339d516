//! First-order adaptive optimizer with bias correction and a global
//! gradient-norm clip.

use std::collections::BTreeMap;

use crate::numerics::{GradMap, ParamStore};

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every gradient entry, in name order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let entry = store.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                entry.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Scale all gradients so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.values() {
        for v in g {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            for v in g {
                *v *= k;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Ctx;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", vec![2], vec![3.0, -2.0]);
        let mut adam = Adam::new(0.1);
        for _ in 0..200 {
            let grads = {
                let ctx = Ctx::new(&store);
                let x = ctx.param("x");
                let loss = x.mul(&x).sum_all();
                ctx.backward(&loss).unwrap()
            };
            adam.step(&mut store, &grads);
        }
        for v in &store.get("x").data {
            assert!(v.abs() < 1e-2, "x = {v}");
        }
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut grads = GradMap::new();
        grads.insert("a".into(), vec![3.0, 4.0]); // norm 5
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let g = &grads["a"];
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);

        let mut grads = GradMap::new();
        grads.insert("a".into(), vec![0.3, 0.4]);
        clip_global_norm(&mut grads, 1.0);
        assert_eq!(grads["a"], vec![0.3, 0.4]);
    }
}
