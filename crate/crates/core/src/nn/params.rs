use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{RamError, Result};
use crate::tensor::Tensor;

/// Named trainable parameters plus non-trainable buffers (BN running stats).
///
/// Names are dotted paths whose first segment is the owning group, e.g.
/// `stem.conv0.weight` or `region.1.cls.bias`. `BTreeMap` keeps iteration
/// order, and therefore every derived computation, deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

pub type Gradients = BTreeMap<String, Vec<f64>>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| RamError::Model(format!("missing parameter `{name}`")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| RamError::Model(format!("missing parameter `{name}`")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| RamError::Model(format!("missing buffer `{name}`")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| RamError::Model(format!("missing buffer `{name}`")))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn contains_param(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a gradient-tracking leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), g.param(t.clone())))
            .collect();
        BoundParams { vars }
    }
}

/// Graph handles for the parameters of one forward pass.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| RamError::Model(format!("parameter `{name}` is not bound")))
    }

    /// Collects the gradient of every bound parameter. Parameters the loss
    /// never reached are reported as absent.
    pub fn gradients(&self, g: &Graph) -> Gradients {
        self.vars
            .iter()
            .filter_map(|(name, &v)| g.grad(v).map(|grad| (name.clone(), grad.to_vec())))
            .collect()
    }
}

/// Deterministic per-parameter RNG: the stream depends only on the seed and
/// the parameter name, so adding a branch never perturbs existing inits.
pub fn init_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn init_streams_depend_on_name() {
        let a: f64 = init_rng(7, "conv.fc1.weight").random();
        let b: f64 = init_rng(7, "conv.fc1.weight").random();
        let c: f64 = init_rng(7, "conv.fc2.weight").random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn bound_gradients_skip_unreached_params() {
        let mut store = ParamStore::new();
        store.insert_param("a", Tensor::ones(&[2]));
        store.insert_param("b", Tensor::ones(&[2]));
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let s = g.sum(bound.var("a").unwrap());
        g.backward(s).unwrap();
        let grads = bound.gradients(&g);
        assert_eq!(grads.get("a"), Some(&vec![1.0, 1.0]));
        assert!(!grads.contains_key("b"));
        assert!(bound.var("c").is_err());
    }
}
