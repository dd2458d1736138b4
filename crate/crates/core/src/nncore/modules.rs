//! Parameter-backed building blocks: sparse conv kernels, MLPs, and the
//! deformable sampling module (shared offsets + softmax weights).

use std::sync::Arc;

use rand::Rng;

use crate::error::Result;

use super::dense::{mlp_forward, Activation, LinearLayer};
use super::graph::{Graph, TensorId};
use super::params::{ParamBinding, ParamId, ParamSet};
use super::sparse::{NeighborTable, SparseConvKernel};

/// 3x3x3 sparse conv parameters.
#[derive(Debug, Clone, Copy)]
pub struct SparseConvParams {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl SparseConvParams {
    pub fn init(params: &mut ParamSet, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let w = params.add_uniform(format!("{name}.w"), vec![27 * cin, cout], 27 * cin, rng);
        let b = params.add_zeros(format!("{name}.b"), vec![cout]);
        SparseConvParams { w, b, cin, cout }
    }

    pub fn kernel(&self, g: &mut Graph, params: &ParamSet, bind: &mut ParamBinding) -> SparseConvKernel {
        SparseConvKernel {
            weights: bind.node(g, params, self.w),
            bias: bind.node(g, params, self.b),
            in_channels: self.cin,
            out_channels: self.cout,
        }
    }

    pub fn apply(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        bind: &mut ParamBinding,
        x: TensorId,
        table: &Arc<NeighborTable>,
    ) -> Result<TensorId> {
        let k = self.kernel(g, params, bind);
        g.sparse_conv(x, &k, table)
    }
}

/// MLP parameters: affine layers with fixed activations.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub layers: Vec<(ParamId, ParamId, Activation)>,
}

impl MlpParams {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        dims: &[usize],
        acts: &[Activation],
        rng: &mut impl Rng,
    ) -> Self {
        assert_eq!(dims.len(), acts.len() + 1);
        let layers = acts
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let w = params.add_uniform(
                    format!("{name}.l{i}.w"),
                    vec![dims[i], dims[i + 1]],
                    dims[i],
                    rng,
                );
                let b = params.add_zeros(format!("{name}.l{i}.b"), vec![dims[i + 1]]);
                (w, b, a)
            })
            .collect();
        MlpParams { layers }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        bind: &mut ParamBinding,
        x: TensorId,
    ) -> Result<TensorId> {
        let layers: Vec<LinearLayer> = self
            .layers
            .iter()
            .map(|&(w, b, activation)| LinearLayer {
                weight: bind.node(g, params, w),
                bias: bind.node(g, params, b),
                activation,
            })
            .collect();
        mlp_forward(g, x, &layers)
    }
}

/// Deformable sampling module: S learnable offsets + softmax sample weights
/// shared across all references.
#[derive(Debug, Clone, Copy)]
pub struct DeformParams {
    pub offsets: ParamId,
    pub weight_logits: ParamId,
    pub samples: usize,
}

impl DeformParams {
    /// Initialize with a small plus-shaped offset pattern and uniform
    /// weights.
    pub fn init(params: &mut ParamSet, name: &str, samples: usize) -> Self {
        let mut offsets = vec![0.0; samples * 2];
        let pattern = [[-0.5, 0.0], [0.5, 0.0], [0.0, -0.5], [0.0, 0.5]];
        for s in 0..samples {
            offsets[s * 2] = pattern[s % 4][0] * (1.0 + (s / 4) as f64);
            offsets[s * 2 + 1] = pattern[s % 4][1] * (1.0 + (s / 4) as f64);
        }
        let offsets = params.add(format!("{name}.offsets"), super::graph::Tensor::new(vec![samples, 2], offsets));
        let weight_logits = params.add_zeros(format!("{name}.wlogits"), vec![1, samples]);
        DeformParams { offsets, weight_logits, samples }
    }

    /// Sample a map at `refs`, returning [len(refs), C].
    pub fn sample(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        bind: &mut ParamBinding,
        map: TensorId,
        h: usize,
        w: usize,
        refs: Arc<Vec<[f64; 2]>>,
    ) -> Result<TensorId> {
        let offsets = bind.node(g, params, self.offsets);
        let logits = bind.node(g, params, self.weight_logits);
        let weights = g.softmax_rows(logits);
        g.deformable_sample(map, h, w, refs, offsets, weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn deform_weights_sum_to_one() {
        let mut params = ParamSet::new();
        let d = DeformParams::init(&mut params, "t.deform", 4);
        let mut g = Graph::new();
        let mut bind = ParamBinding::new();
        let logits = bind.node(&mut g, &params, d.weight_logits);
        let w = g.softmax_rows(logits);
        let sum: f64 = g.value(w).data.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mlp_params_shapes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        let mlp = MlpParams::init(
            &mut params,
            "t.mlp",
            &[8, 16, 1],
            &[Activation::Relu, Activation::Identity],
            &mut rng,
        );
        let mut g = Graph::new();
        let mut bind = ParamBinding::new();
        let x = g.constant(super::super::graph::Tensor::zeros(vec![5, 8]));
        let y = mlp.forward(&mut g, &params, &mut bind, x).unwrap();
        assert_eq!(g.value(y).shape, vec![5, 1]);
    }
}
