use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Convolution kernels are L2-regularised; biases are not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Kernel,
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Owns every trainable array of a model. Layers refer to entries by [`ParamId`],
/// so two layers holding the same id share one set of weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            kind,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// He-normal kernel of shape `[cout, cin, k, k, k]`.
    pub fn add_kernel(&mut self, name: impl Into<String>, cout: usize, cin: usize, k: usize, rng: &mut Rng) -> ParamId {
        let fan_in = (cin * k * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let shape = [cout, cin, k, k, k];
        let data = (0..shape.iter().product::<usize>())
            .map(|_| normal.sample(rng))
            .collect();
        self.add(
            name,
            ParamKind::Kernel,
            Tensor::new(shape.to_vec(), data).expect("sized"),
        )
    }

    pub fn add_bias(&mut self, name: impl Into<String>, cout: usize) -> ParamId {
        self.add(name, ParamKind::Bias, Tensor::zeros(&[cout]))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// `Σ ‖kernel‖²` over kernel parameters.
    pub fn kernel_sq_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Kernel)
            .map(|p| p.value.sum_sq())
            .sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            tensors: self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    tensors: Vec<Tensor>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn clear(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.fill(0.0));
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    /// Adds `2 · weight · w` to every kernel gradient (the derivative of `weight · ‖w‖²`).
    pub fn add_l2(&mut self, store: &ParamStore, weight: f64) {
        if weight == 0.0 {
            return;
        }
        for (id, p) in store.iter() {
            if p.kind == ParamKind::Kernel {
                self.tensors[id.0].add_scaled(&p.value, 2.0 * weight);
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            m: store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.params.iter_mut().enumerate() {
            let g = grads.tensors[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamKind::Kernel, Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
        let mut adam = Adam::new(&store, 0.9, 0.999);
        for _ in 0..2000 {
            let mut g = store.zero_grads();
            let w = store.get(id).data().to_vec();
            g.get_mut(id)
                .data_mut()
                .copy_from_slice(&[2.0 * (w[0] - 1.0), 2.0 * (w[1] + 0.5)]);
            adam.step(&mut store, &g, 0.01);
        }
        let w = store.get(id).data();
        assert!((w[0] - 1.0).abs() < 1e-3 && (w[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn l2_only_touches_kernels() {
        let mut store = ParamStore::new();
        let k = store.add("k", ParamKind::Kernel, Tensor::full(&[2], 1.5));
        let b = store.add("b", ParamKind::Bias, Tensor::full(&[2], 4.0));
        let mut g = store.zero_grads();
        g.add_l2(&store, 0.1);
        assert!(g.get(k).data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        assert_eq!(g.get(b).data(), &[0.0, 0.0]);
        assert!((store.kernel_sq_norm() - 4.5).abs() < 1e-12);
    }
}
