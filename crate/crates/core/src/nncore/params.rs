//! Named parameter storage, initialization, graph leafing, and Adam.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};

use super::graph::{Graph, Tensor, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter table. Frozen parameters enter graphs as constants, so no
/// gradient is ever computed for them and their values are bit-stable.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        self.trainable.push(true);
        ParamId(id)
    }

    /// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape, data))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    /// Freeze every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (name, t) in self.names.iter().zip(self.trainable.iter_mut()) {
            if name.starts_with(prefix) && *t {
                *t = false;
                n += 1;
            }
        }
        n
    }

    pub fn set_all_trainable(&mut self) {
        self.trainable.iter_mut().for_each(|t| *t = true);
    }
}

/// Per-graph mapping of parameter leaves, so gradients can be pulled back
/// out after `backward`.
#[derive(Default)]
pub struct ParamBinding {
    pairs: Vec<(ParamId, TensorId)>,
    cache: HashMap<usize, TensorId>,
}

impl ParamBinding {
    pub fn new() -> Self {
        ParamBinding::default()
    }

    /// Insert the parameter into the graph (leaf when trainable, constant
    /// when frozen). Repeated requests return the same node.
    pub fn node(&mut self, g: &mut Graph, params: &ParamSet, id: ParamId) -> TensorId {
        if let Some(&t) = self.cache.get(&id.0) {
            return t;
        }
        let tensor = params.tensor(id).clone();
        let t = if params.is_trainable(id) {
            g.leaf(tensor)
        } else {
            g.constant(tensor)
        };
        self.cache.insert(id.0, t);
        self.pairs.push((id, t));
        t
    }

    /// (param, gradient) pairs for trainable leaves that received gradient.
    pub fn collect_grads(
        &self,
        params: &ParamSet,
        grads: &super::graph::GradStore,
    ) -> Vec<(ParamId, Vec<f64>)> {
        self.pairs
            .iter()
            .filter(|(pid, _)| params.is_trainable(*pid))
            .filter_map(|&(pid, tid)| grads.get(tid).map(|g| (pid, g.to_vec())))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// First/second moment state per parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: HashMap<usize, Vec<f64>>,
    v: HashMap<usize, Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }
}

/// Standard bias-corrected Adam update. Parameters without a gradient entry
/// keep their value but their moments still decay. Non-finite gradients are
/// rejected with the parameter's name.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[(ParamId, Vec<f64>)],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    for (pid, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(params.name(*pid).to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let grad_of: HashMap<usize, &Vec<f64>> = grads.iter().map(|(p, g)| (p.0, g)).collect();
    for pid in params.ids().collect::<Vec<_>>() {
        if !params.is_trainable(pid) {
            continue;
        }
        let n = params.tensor(pid).numel();
        let m = state.m.entry(pid.0).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(pid.0).or_insert_with(|| vec![0.0; n]);
        let zero = vec![0.0; n];
        let g: &[f64] = grad_of.get(&pid.0).map(|g| g.as_slice()).unwrap_or(&zero);
        assert_eq!(g.len(), n, "gradient length mismatch for {}", params.name(pid));
        let data = &mut params.tensor_mut(pid).data;
        for i in 0..n {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut params = ParamSet::new();
        let p = params.add("w", Tensor::new(vec![2], vec![1.0, -2.0]));
        let mut state = AdamState::new();
        let cfg = AdamConfig::default();
        adam_step(&mut params, &[(p, vec![0.0, 0.0])], &mut state, &cfg).unwrap();
        assert_eq!(params.tensor(p).data, vec![1.0, -2.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        // f(w) = w^2 at w=1: g = 2. Bias-corrected first step moves by
        // lr * g / (|g| + eps) ~ lr.
        let mut params = ParamSet::new();
        let p = params.add("w", Tensor::scalar(1.0));
        let mut state = AdamState::new();
        let cfg = AdamConfig::with_lr(0.1);
        adam_step(&mut params, &[(p, vec![2.0])], &mut state, &cfg).unwrap();
        assert!((params.tensor(p).item() - 0.9).abs() < 1e-7);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut params = ParamSet::new();
        let p = params.add("w", Tensor::scalar(1.0));
        let mut state = AdamState::new();
        let cfg = AdamConfig::default();
        let err = adam_step(&mut params, &[(p, vec![f64::NAN])], &mut state, &cfg);
        assert!(matches!(err, Err(Error::NonFiniteGradient(_))));
    }

    #[test]
    fn adam_convex_quadratic_converges() {
        // f(w) = (w - 3)^2, analytic gradient 2(w - 3).
        let mut params = ParamSet::new();
        let p = params.add("w", Tensor::scalar(-2.0));
        let mut state = AdamState::new();
        let cfg = AdamConfig::with_lr(0.08);
        let loss = |w: f64| (w - 3.0) * (w - 3.0);
        let mut losses = Vec::new();
        for _ in 0..100 {
            let w = params.tensor(p).item();
            losses.push(loss(w));
            adam_step(&mut params, &[(p, vec![2.0 * (w - 3.0)])], &mut state, &cfg).unwrap();
        }
        // Strictly decreasing after warmup, until the iterate reaches the
        // basin where Adam's momentum dithers at lr scale.
        for w in losses[5..60].windows(2) {
            assert!(w[1] < w[0], "loss increased: {} -> {}", w[0], w[1]);
        }
        assert!(loss(params.tensor(p).item()) < 0.05);
    }

    #[test]
    fn frozen_params_skip_updates() {
        let mut params = ParamSet::new();
        let p = params.add("prior.w", Tensor::scalar(1.0));
        let q = params.add("recon.w", Tensor::scalar(1.0));
        assert_eq!(params.freeze_prefix("prior."), 1);
        let mut state = AdamState::new();
        let cfg = AdamConfig::with_lr(0.1);
        adam_step(
            &mut params,
            &[(p, vec![1.0]), (q, vec![1.0])],
            &mut state,
            &cfg,
        )
        .unwrap();
        assert_eq!(params.tensor(p).item(), 1.0);
        assert!(params.tensor(q).item() < 1.0);
    }

    #[test]
    fn binding_dedupes_and_freezes() {
        let mut params = ParamSet::new();
        let p = params.add("a", Tensor::scalar(2.0));
        params.freeze_prefix("a");
        let mut g = Graph::new();
        let mut bind = ParamBinding::new();
        let t1 = bind.node(&mut g, &params, p);
        let t2 = bind.node(&mut g, &params, p);
        assert_eq!(t1, t2);
        assert!(!g.requires_grad(t1));
    }
}
