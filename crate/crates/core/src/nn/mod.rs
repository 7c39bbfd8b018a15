//! Minimal neural-network training machinery: an autodiff [`Graph`], a named
//! parameter store, and an Adam optimizer with multiplicative learning-rate
//! decay. Shared by the codec, the generator, and the HAR classifier.

mod graph;

pub use graph::{Graph, Var};

use ndarray::{Array2, ArrayD};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable arrays.
///
/// Order is creation order and is part of a model's identity: checkpoints
/// store blobs in this order and optimizer state is indexed by it.
#[derive(Default, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    /// Positional access, matching the order of [`ParamSet::iter`].
    pub fn value_at_mut(&mut self, index: usize) -> &mut ArrayD<f64> {
        &mut self.values[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    /// Register every parameter as a graph leaf, in order.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self.values.iter().map(|v| g.leaf(v.clone())).collect();
        Bound { vars }
    }

    /// Replace all values; used when loading a checkpoint. Names and shapes
    /// must match the registration order exactly.
    pub fn load_values(&mut self, blobs: Vec<(String, ArrayD<f64>)>) -> Result<(), String> {
        if blobs.len() != self.values.len() {
            return Err(format!(
                "parameter count mismatch: expected {}, got {}",
                self.values.len(),
                blobs.len()
            ));
        }
        for (i, (name, value)) in blobs.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(format!(
                    "parameter {i} name mismatch: expected {}, got {name}",
                    self.names[i]
                ));
            }
            if value.shape() != self.values[i].shape() {
                return Err(format!(
                    "parameter {name} shape mismatch: expected {:?}, got {:?}",
                    self.values[i].shape(),
                    value.shape()
                ));
            }
            self.values[i] = value;
        }
        Ok(())
    }
}

/// Per-step binding of a [`ParamSet`] onto a [`Graph`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Collect gradients for every parameter after `Graph::backward`.
    pub fn grads(&self, g: &Graph) -> Vec<ArrayD<f64>> {
        self.vars.iter().map(|&v| g.grad(v)).collect()
    }
}

/// Adam with optional per-step multiplicative learning-rate decay.
pub struct Adam {
    lr: f64,
    decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, decay: f64) -> Self {
        let m = params.values.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        let v = params.values.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        Self {
            lr,
            decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.lr * self.decay.powi(self.step as i32)
    }

    #[allow(clippy::needless_range_loop)] // four parallel arrays; indices read clearer
    pub fn apply(&mut self, params: &mut ParamSet, grads: &[ArrayD<f64>]) {
        assert_eq!(grads.len(), params.values.len());
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..grads.len() {
            let g = &grads[i];
            self.m[i].zip_mut_with(g, |m, &gi| *m = self.beta1 * *m + (1.0 - self.beta1) * gi);
            self.v[i]
                .zip_mut_with(g, |v, &gi| *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi);
            let mhat = &self.m[i] / bc1;
            let vhat = &self.v[i] / bc2;
            let eps = self.eps;
            params.values[i].zip_mut_with(
                &(mhat / vhat.mapv(|x| x.sqrt() + eps)),
                |p, &u| *p -= lr * u,
            );
        }
    }
}

/// Gaussian init scaled by `std`.
pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    ArrayD::from_shape_simple_fn(shape.to_vec(), || dist.sample(rng))
}

/// He-style init for a layer with the given fan-in.
pub fn he_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use rand::SeedableRng;

    #[test]
    fn adam_descends_on_quadratic() {
        let mut params = ParamSet::new();
        let id = params.add("x", arr1(&[5.0, -3.0]).into_dyn());
        let mut opt = Adam::new(&params, 0.1, 1.0);
        for _ in 0..500 {
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let x = bound.var(id);
            let sq = g.mul(x, x);
            let loss = g.mean_all(sq);
            g.backward(loss);
            opt.apply(&mut params, &bound.grads(&g));
        }
        for &x in params.value(id).iter() {
            assert!(x.abs() < 1e-2, "did not converge: {x}");
        }
    }

    #[test]
    fn lr_decay_is_multiplicative() {
        let params = ParamSet::new();
        let mut opt = Adam::new(&params, 1e-3, 0.9);
        assert!((opt.current_lr() - 1e-3).abs() < 1e-15);
        opt.step = 2;
        assert!((opt.current_lr() - 1e-3 * 0.81).abs() < 1e-15);
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(randn(&mut a, &[3, 4], 0.5), randn(&mut b, &[3, 4], 0.5));
    }
}
