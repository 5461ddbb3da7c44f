//! Adam with the `1/√t` learning-rate schedule, optional global-norm
//! gradient clipping, and the temperature floor projection for cosine
//! routers.

use std::collections::{BTreeMap, BTreeSet};

use crate::routing::TAU_FLOOR;
use crate::tensor::ParameterStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Adam state: step counter plus first/second moments per parameter.
/// Moments are allocated lazily on the first gradient a parameter
/// receives, and a parameter whose update is skipped is left completely
/// untouched — data, moments, everything.
#[derive(Debug, Clone)]
pub struct Adam {
    pub base_lr: f64,
    /// Steps taken so far; the next step is `t + 1`.
    pub t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(base_lr: f64) -> Adam {
        Adam { base_lr, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Learning rate at step `t ≥ 1`: `base_lr / √t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        assert!(t >= 1, "steps are 1-based");
        self.base_lr / (t as f64).sqrt()
    }

    /// Scale all gradients in place so their concatenated L2 norm is at
    /// most `max_norm`. Returns the pre-clip norm.
    pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
        let sq: f64 = grads.values().flat_map(|g| g.iter()).map(|g| g * g).sum();
        let norm = sq.sqrt();
        if norm > max_norm {
            let scale = max_norm / norm;
            for g in grads.values_mut() {
                for x in g.iter_mut() {
                    *x *= scale;
                }
            }
        }
        norm
    }

    /// One optimizer step over every gradient present in `grads`, except
    /// names in `skip`. Standard bias-corrected Adam; the learning rate is
    /// `base_lr / √t` for the new step count. After the update, any cosine
    /// router temperature is projected back above its floor.
    pub fn step(
        &mut self,
        params: &mut ParameterStore,
        grads: &BTreeMap<String, Vec<f64>>,
        skip: &BTreeSet<String>,
    ) {
        self.t += 1;
        let lr = self.lr_at(self.t);
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (name, grad) in grads {
            if skip.contains(name) {
                continue;
            }
            let param = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            debug_assert_eq!(param.data.len(), grad.len(), "gradient arity for {name}");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            for i in 0..grad.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * grad[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param.data[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
            }
            if name.ends_with(".router.tau") {
                param.data[0] = param.data[0].max(TAU_FLOOR);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, data: Vec<f64>) -> ParameterStore {
        let mut p = ParameterStore::new();
        let n = data.len();
        p.insert(name, data, vec![n]);
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = store_with("w", vec![1.0, -2.0, 3.0]);
        let mut adam = Adam::new(0.1);
        let grads = BTreeMap::from([("w".to_string(), vec![0.0; 3])]);
        for _ in 0..50 {
            adam.step(&mut params, &grads, &BTreeSet::new());
        }
        assert_eq!(params.get("w").unwrap().data, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_matches_hand_derived_adam() {
        // From zero moments with constant gradient g: m̂ = g, v̂ = g², so
        // the update is lr·g/(|g| + eps) ≈ lr·sign(g).
        let mut params = store_with("w", vec![0.0, 0.0]);
        let mut adam = Adam::new(0.01);
        let grads = BTreeMap::from([("w".to_string(), vec![3.0, -0.25])]);
        adam.step(&mut params, &grads, &BTreeSet::new());
        let data = &params.get("w").unwrap().data;
        let expected0 = -0.01 * 3.0 / (3.0 + EPS);
        let expected1 = 0.01 * 0.25 / (0.25 + EPS);
        assert!((data[0] - expected0).abs() < 1e-15, "got {}", data[0]);
        assert!((data[1] - expected1).abs() < 1e-15, "got {}", data[1]);
    }

    #[test]
    fn quadrupling_t_halves_the_learning_rate() {
        let adam = Adam::new(0.02);
        assert_eq!(adam.lr_at(1), 0.02);
        assert_eq!(adam.lr_at(4), 0.01);
        assert_eq!(adam.lr_at(100), adam.lr_at(25) / 2.0);
    }

    #[test]
    fn skipped_parameters_keep_data_and_moments_untouched() {
        let mut params = store_with("w", vec![1.0]);
        params.insert("frozen", vec![5.0], vec![1]);
        let mut adam = Adam::new(0.1);
        let grads = BTreeMap::from([
            ("w".to_string(), vec![1.0]),
            ("frozen".to_string(), vec![1.0]),
        ]);
        let skip = BTreeSet::from(["frozen".to_string()]);
        adam.step(&mut params, &grads, &skip);
        adam.step(&mut params, &grads, &skip);
        assert_eq!(params.get("frozen").unwrap().data, vec![5.0]);
        assert!(!adam.m.contains_key("frozen"), "moments must stay unallocated");
        assert_ne!(params.get("w").unwrap().data, vec![1.0]);
    }

    #[test]
    fn clip_rescales_only_above_the_threshold() {
        let mut grads = BTreeMap::from([
            ("a".to_string(), vec![3.0, 0.0]),
            ("b".to_string(), vec![0.0, 4.0]),
        ]);
        let norm = Adam::clip_global_norm(&mut grads, 1.0);
        assert_eq!(norm, 5.0);
        let sq: f64 = grads.values().flatten().map(|g| g * g).sum();
        assert!((sq.sqrt() - 1.0).abs() < 1e-12);
        // Below the threshold nothing changes.
        let mut small = BTreeMap::from([("a".to_string(), vec![0.1, 0.2])]);
        Adam::clip_global_norm(&mut small, 1.0);
        assert_eq!(small["a"], vec![0.1, 0.2]);
    }

    #[test]
    fn cosine_temperature_is_projected_above_its_floor() {
        let mut params = store_with("block0.smoe.router.tau", vec![0.002]);
        let mut adam = Adam::new(1.0);
        let grads = BTreeMap::from([("block0.smoe.router.tau".to_string(), vec![10.0])]);
        adam.step(&mut params, &grads, &BTreeSet::new());
        assert_eq!(params.get("block0.smoe.router.tau").unwrap().data[0], TAU_FLOOR);
    }
}
