//! Named parameter storage. Names are ordered (BTreeMap), so iteration,
//! binding, gradient readout and checkpoint layout are all deterministic.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{GraphRef, Tensor};

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub data: Vec<S>,
    pub shape: Vec<usize>,
}

#[derive(Clone, Default, Debug)]
pub struct ParamStore<S> {
    entries: BTreeMap<String, Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, data: Vec<S>, shape: &[usize]) {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "param {}: {} values for shape {:?}",
            name,
            data.len(),
            shape
        );
        let prev = self.entries.insert(
            name.to_string(),
            Param {
                data,
                shape: shape.to_vec(),
            },
        );
        assert!(prev.is_none(), "duplicate parameter {}", name);
    }

    pub fn register_normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut ChaCha8Rng,
    ) {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                S::from_f64(z * std)
            })
            .collect();
        self.insert(name, data, shape);
    }

    pub fn register_const(&mut self, name: &str, shape: &[usize], value: f64) {
        let n: usize = shape.iter().product();
        self.insert(name, vec![S::from_f64(value); n], shape);
    }

    pub fn get(&self, name: &str) -> &Param<S> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {}", name))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param<S> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {}", name))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }

    /// Create one grad-tracked leaf per parameter on `graph`.
    pub fn bind(&self, graph: &GraphRef<S>, requires_grad: bool) -> BoundParams<S> {
        let mut map = BTreeMap::new();
        for (name, p) in &self.entries {
            let t = graph.leaf(p.data.clone(), &p.shape, requires_grad);
            t.set_label(name);
            map.insert(name.clone(), t);
        }
        BoundParams { map }
    }
}

/// Graph handles for every parameter of one forward/backward pass.
pub struct BoundParams<S: Scalar> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> BoundParams<S> {
    pub fn get(&self, name: &str) -> Tensor<S> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {}", name))
            .clone()
    }

    /// Read accumulated gradients back out, one buffer per parameter that
    /// received any. Missing entries mean a zero gradient.
    pub fn collect_grads(&self) -> BTreeMap<String, Vec<S>> {
        let mut out = BTreeMap::new();
        for (name, t) in &self.map {
            if let Some(g) = t.grad() {
                out.insert(name.clone(), g);
            }
        }
        out
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }
}

/// Decoupled weight-decay Adam. Moments live here, keyed like the store.
pub struct AdamW<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: usize,
    pub m: BTreeMap<String, Vec<S>>,
    pub v: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &BTreeMap<String, Vec<S>>) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one = S::one();
        let bias1 = S::from_f64(1.0 - self.beta1.powf(t));
        let bias2 = S::from_f64(1.0 - self.beta2.powf(t));
        let lr = S::from_f64(self.lr);
        let wd = S::from_f64(self.weight_decay);
        let eps = S::from_f64(self.eps);
        // Iterate the store (sorted) so update order is deterministic.
        let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
        for name in names {
            let g = match grads.get(&name) {
                Some(g) => g,
                None => continue,
            };
            let p = store.get_mut(&name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![S::zero(); g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![S::zero(); g.len()]);
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                let update = m_hat / (v_hat.sqrt() + eps) + wd * p.data[i];
                p.data[i] = p.data[i] - lr * update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_bind_and_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        store.register_normal("b.w", &[2, 3], 0.1, &mut rng);
        store.register_const("a.bias", &[3], 0.0);
        // Names iterate sorted.
        let names: Vec<&str> = store.names().collect();
        assert_eq!(names, vec!["a.bias", "b.w"]);

        let g = GraphRef::<f64>::new();
        let bound = store.bind(&g, true);
        let w = bound.get("b.w");
        let loss = w.mul(&w).unwrap().sum_all();
        loss.backward().unwrap();
        let grads = bound.collect_grads();
        assert!(grads.contains_key("b.w"));
        assert!(!grads.contains_key("a.bias"));
    }

    #[test]
    fn adamw_decreases_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", vec![5.0, -3.0], &[2]);
        let mut opt = AdamW::new(0.1, 0.9, 0.999, 0.0);
        for _ in 0..500 {
            let p = store.get("x");
            let grads: BTreeMap<String, Vec<f64>> =
                [("x".to_string(), p.data.iter().map(|v| 2.0 * v).collect())]
                    .into_iter()
                    .collect();
            opt.step(&mut store, &grads);
        }
        let p = store.get("x");
        assert!(p.data.iter().all(|v| v.abs() < 1e-2), "{:?}", p.data);
    }

    #[test]
    fn weight_decay_shrinks_without_gradient_signal() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", vec![1.0], &[1]);
        let mut opt = AdamW::new(0.01, 0.9, 0.999, 0.5);
        for _ in 0..100 {
            let grads: BTreeMap<String, Vec<f64>> =
                [("x".to_string(), vec![0.0])].into_iter().collect();
            opt.step(&mut store, &grads);
        }
        let v = store.get("x").data[0];
        assert!(v < 0.7, "decay did not act: {v}");
    }
}
