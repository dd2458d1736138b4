//! Dense linear algebra ops: matmul variants, affine layers, softmax,
//! layer norm, and the MLP composition helper.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::exec;

use super::graph::{BackwardStep, GradStore, Graph, Tensor, TensorId};

/// out[r*C..] += a_row · B where B is [K, C]. The k-outer loop keeps the
/// inner dimension contiguous for vectorization.
pub(crate) fn gemm_row(a_row: &[f64], b: &[f64], c_cols: usize, out_row: &mut [f64]) {
    for (k, &av) in a_row.iter().enumerate() {
        if av == 0.0 {
            continue;
        }
        let b_row = &b[k * c_cols..(k + 1) * c_cols];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

fn matmul_values(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, k) = (a.rows(), a.cols());
    let c = b.cols();
    assert_eq!(b.rows(), k, "matmul inner dim mismatch");
    let mut data = vec![0.0; r * c];
    exec::for_each_chunk_mut(&mut data, c.max(1), |row, out_row| {
        gemm_row(&a.data[row * k..(row + 1) * k], &b.data, c, out_row);
    });
    Tensor::new(vec![r, c], data)
}

impl Graph {
    /// [R, K] x [K, C] -> [R, C].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let value = matmul_values(self.value(a), self.value(b));
        let requires = self.any_requires(&[a, b]);
        let step = requires.then(|| Box::new(MatmulStep { a, b }) as Box<dyn BackwardStep>);
        self.push(value, requires, step)
    }

    /// [R, K] x [C, K]^T -> [R, C] (dot products of rows against rows).
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, k) = (ta.rows(), ta.cols());
        let c = tb.rows();
        assert_eq!(tb.cols(), k, "matmul_nt inner dim mismatch");
        let a_data = ta.data.clone();
        let b_data = tb.data.clone();
        let mut data = vec![0.0; r * c];
        exec::for_each_chunk_mut(&mut data, c.max(1), |row, out_row| {
            let a_row = &a_data[row * k..(row + 1) * k];
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &b_data[j * k..(j + 1) * k];
                *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            }
        });
        let requires = self.any_requires(&[a, b]);
        let step = requires.then(|| Box::new(MatmulNtStep { a, b }) as Box<dyn BackwardStep>);
        self.push(Tensor::new(vec![r, c], data), requires, step)
    }

    /// x·W + b with W [K, C], b [C].
    pub fn affine(&mut self, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(tx.cols(), tw.rows(), "affine inner dim mismatch");
        assert_eq!(tw.cols(), tb.numel(), "affine bias mismatch");
        let c = tw.cols();
        let mut value = matmul_values(tx, tw);
        for row in value.data.chunks_mut(c) {
            for (v, bias) in row.iter_mut().zip(&tb.data) {
                *v += bias;
            }
        }
        let requires = self.any_requires(&[x, w, b]);
        let step = requires.then(|| Box::new(AffineStep { x, w, b }) as Box<dyn BackwardStep>);
        self.push(value, requires, step)
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, x: TensorId) -> TensorId {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut data = t.data.clone();
        for row in data.chunks_mut(c) {
            softmax_inplace(row);
        }
        let requires = self.requires_grad(x);
        let value = Tensor::new(vec![r, c], data);
        let out = self.push(value, requires, None);
        if requires {
            self.set_step(out, Box::new(SoftmaxStep { x, out, allowed: None }));
        }
        out
    }

    /// Row-wise softmax over an allowed mask (len rows*cols). Excluded
    /// entries are exactly zero in the output; a fully excluded row is all
    /// zeros.
    pub fn masked_softmax_rows(&mut self, x: TensorId, allowed: Arc<Vec<bool>>) -> TensorId {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        assert_eq!(allowed.len(), r * c, "mask length mismatch");
        let mut data = vec![0.0; r * c];
        for row in 0..r {
            let xs = &t.data[row * c..(row + 1) * c];
            let mask = &allowed[row * c..(row + 1) * c];
            let mut mx = f64::NEG_INFINITY;
            for (v, &m) in xs.iter().zip(mask) {
                if m && *v > mx {
                    mx = *v;
                }
            }
            if mx == f64::NEG_INFINITY {
                continue; // fully excluded row stays zero
            }
            let mut sum = 0.0;
            for (i, (&v, &m)) in xs.iter().zip(mask).enumerate() {
                if m {
                    let e = (v - mx).exp();
                    data[row * c + i] = e;
                    sum += e;
                }
            }
            for (i, &m) in mask.iter().enumerate() {
                if m {
                    data[row * c + i] /= sum;
                }
            }
        }
        let requires = self.requires_grad(x);
        let out = self.push(Tensor::new(vec![r, c], data), requires, None);
        if requires {
            self.set_step(out, Box::new(SoftmaxStep { x, out, allowed: Some(allowed) }));
        }
        out
    }

    /// Row-wise layer normalization with learnable gain/bias of width C.
    pub fn layer_norm_rows(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> TensorId {
        const EPS: f64 = 1e-5;
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (r, c) = (tx.rows(), tx.cols());
        assert_eq!(tg.numel(), c);
        assert_eq!(tb.numel(), c);
        let mut data = vec![0.0; r * c];
        for row in 0..r {
            let xs = &tx.data[row * c..(row + 1) * c];
            let mean = xs.iter().sum::<f64>() / c as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            for i in 0..c {
                data[row * c + i] = (xs[i] - mean) * inv * tg.data[i] + tb.data[i];
            }
        }
        let requires = self.any_requires(&[x, gain, bias]);
        let step = requires.then(|| Box::new(LayerNormStep { x, gain, bias, eps: EPS }) as Box<dyn BackwardStep>);
        self.push(Tensor::new(vec![r, c], data), requires, step)
    }

}

fn softmax_inplace(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

struct MatmulStep {
    a: TensorId,
    b: TensorId,
}

impl BackwardStep for MatmulStep {
    fn backward(&self, values: &[Tensor], g: &[f64], grads: &mut GradStore) {
        let ta = &values[self.a.0];
        let tb = &values[self.b.0];
        let (r, k) = (ta.rows(), ta.cols());
        let c = tb.cols();
        if grads.wants(self.a) {
            // gA[r, k] = sum_c g[r, c] * B[k, c]
            let slot = grads.slot(self.a);
            for row in 0..r {
                let g_row = &g[row * c..(row + 1) * c];
                let out = &mut slot[row * k..(row + 1) * k];
                for (kk, o) in out.iter_mut().enumerate() {
                    let b_row = &tb.data[kk * c..(kk + 1) * c];
                    *o += g_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
                }
            }
        }
        if grads.wants(self.b) {
            // gB[k, c] = sum_r A[r, k] * g[r, c]
            let slot = grads.slot(self.b);
            for row in 0..r {
                let g_row = &g[row * c..(row + 1) * c];
                let a_row = &ta.data[row * k..(row + 1) * k];
                for (kk, &av) in a_row.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    for (o, &gv) in slot[kk * c..(kk + 1) * c].iter_mut().zip(g_row) {
                        *o += av * gv;
                    }
                }
            }
        }
    }
}

struct MatmulNtStep {
    a: TensorId,
    b: TensorId,
}

impl BackwardStep for MatmulNtStep {
    fn backward(&self, values: &[Tensor], g: &[f64], grads: &mut GradStore) {
        let ta = &values[self.a.0];
        let tb = &values[self.b.0];
        let (r, k) = (ta.rows(), ta.cols());
        let c = tb.rows();
        if grads.wants(self.a) {
            // gA[r] = sum_j g[r, j] * B[j]
            let slot = grads.slot(self.a);
            for row in 0..r {
                let g_row = &g[row * c..(row + 1) * c];
                let out = &mut slot[row * k..(row + 1) * k];
                for (j, &gv) in g_row.iter().enumerate() {
                    if gv == 0.0 {
                        continue;
                    }
                    for (o, &bv) in out.iter_mut().zip(&tb.data[j * k..(j + 1) * k]) {
                        *o += gv * bv;
                    }
                }
            }
        }
        if grads.wants(self.b) {
            // gB[j] = sum_r g[r, j] * A[r]
            let slot = grads.slot(self.b);
            for row in 0..r {
                let g_row = &g[row * c..(row + 1) * c];
                let a_row = &ta.data[row * k..(row + 1) * k];
                for (j, &gv) in g_row.iter().enumerate() {
                    if gv == 0.0 {
                        continue;
                    }
                    for (o, &av) in slot[j * k..(j + 1) * k].iter_mut().zip(a_row) {
                        *o += gv * av;
                    }
                }
            }
        }
    }
}

struct AffineStep {
    x: TensorId,
    w: TensorId,
    b: TensorId,
}

impl BackwardStep for AffineStep {
    fn backward(&self, values: &[Tensor], g: &[f64], grads: &mut GradStore) {
        MatmulStep { a: self.x, b: self.w }.backward(values, g, grads);
        if grads.wants(self.b) {
            let c = values[self.w.0].cols();
            let slot = grads.slot(self.b);
            for row in g.chunks(c) {
                for (o, &gv) in slot.iter_mut().zip(row) {
                    *o += gv;
                }
            }
        }
    }
}

struct SoftmaxStep {
    x: TensorId,
    out: TensorId,
    allowed: Option<Arc<Vec<bool>>>,
}

impl BackwardStep for SoftmaxStep {
    fn backward(&self, values: &[Tensor], g: &[f64], grads: &mut GradStore) {
        if !grads.wants(self.x) {
            return;
        }
        let y = &values[self.out.0].data;
        let c = values[self.out.0].cols();
        let slot = grads.slot(self.x);
        for row in 0..values[self.out.0].rows() {
            let ys = &y[row * c..(row + 1) * c];
            let gs = &g[row * c..(row + 1) * c];
            let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
            for i in 0..c {
                let include = self
                    .allowed
                    .as_ref()
                    .map(|m| m[row * c + i])
                    .unwrap_or(true);
                if include {
                    slot[row * c + i] += ys[i] * (gs[i] - dot);
                }
            }
        }
    }
}

struct LayerNormStep {
    x: TensorId,
    gain: TensorId,
    bias: TensorId,
    eps: f64,
}

impl BackwardStep for LayerNormStep {
    fn backward(&self, values: &[Tensor], g: &[f64], grads: &mut GradStore) {
        let tx = &values[self.x.0];
        let tg = &values[self.gain.0];
        let (r, c) = (tx.rows(), tx.cols());
        for row in 0..r {
            let xs = &tx.data[row * c..(row + 1) * c];
            let gs = &g[row * c..(row + 1) * c];
            let mean = xs.iter().sum::<f64>() / c as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + self.eps).sqrt();
            let xhat: Vec<f64> = xs.iter().map(|v| (v - mean) * inv).collect();
            if grads.wants(self.gain) {
                let slot = grads.slot(self.gain);
                for i in 0..c {
                    slot[i] += gs[i] * xhat[i];
                }
            }
            if grads.wants(self.bias) {
                let slot = grads.slot(self.bias);
                for i in 0..c {
                    slot[i] += gs[i];
                }
            }
            if grads.wants(self.x) {
                // d/dx of (xhat * gain): project out mean and xhat components.
                let gy: Vec<f64> = (0..c).map(|i| gs[i] * tg.data[i]).collect();
                let mean_gy = gy.iter().sum::<f64>() / c as f64;
                let mean_gy_xhat = gy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                let slot = grads.slot(self.x);
                for i in 0..c {
                    slot[row * c + i] += inv * (gy[i] - mean_gy - xhat[i] * mean_gy_xhat);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// MLP helper
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

/// One affine + activation layer of an MLP.
#[derive(Debug, Clone, Copy)]
pub struct LinearLayer {
    pub weight: TensorId,
    pub bias: TensorId,
    pub activation: Activation,
}

/// Compose affine + activation layers, validating the shape chain.
pub fn mlp_forward(g: &mut Graph, x: TensorId, layers: &[LinearLayer]) -> Result<TensorId> {
    let mut cur = x;
    for (i, layer) in layers.iter().enumerate() {
        let in_dim = g.value(cur).cols();
        let w = g.value(layer.weight);
        if w.rows() != in_dim {
            return Err(Error::ShapeMismatch {
                op: "mlp_forward",
                detail: format!("layer {i}: input width {in_dim} != weight rows {}", w.rows()),
            });
        }
        if g.value(layer.bias).numel() != w.cols() {
            return Err(Error::ShapeMismatch {
                op: "mlp_forward",
                detail: format!("layer {i}: bias length != weight cols"),
            });
        }
        cur = g.affine(cur, layer.weight, layer.bias);
        cur = match layer.activation {
            Activation::Identity => cur,
            Activation::Relu => g.relu(cur),
            Activation::Sigmoid => g.sigmoid(cur),
            Activation::Tanh => g.tanh_act(cur),
        };
    }
    Ok(cur)
}
