//! Image-side ops: 3x3 2D convolution (stride 1 or 2, zero padded), bilinear
//! upsampling, and weighted deformable sampling.
//!
//! Feature maps are stored as [H*W, C] row-major tensors; spatial dims ride
//! along as op arguments. Continuous pixel coordinates put sample (x, y) at
//! integer positions, matching the camera model's pixel convention.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::exec;

use super::graph::{BackwardStep, GradStore, Graph, Tensor, TensorId};

impl Graph {
    /// 3x3 conv over an [H*W, Cin] map, zero padding, stride 1 or 2.
    /// Weights [9*Cin, Cout], bias [Cout]. Output is [(H/s)*(W/s), Cout].
    pub fn conv2d(
        &mut self,
        x: TensorId,
        h: usize,
        w: usize,
        weights: TensorId,
        bias: TensorId,
        stride: usize,
    ) -> Result<TensorId> {
        let (tx, tw, tb) = (self.value(x), self.value(weights), self.value(bias));
        let cin = tx.cols();
        if tw.rows() != 9 * cin {
            return Err(Error::ChannelMismatch { expected: tw.rows() / 9, got: cin });
        }
        if tx.rows() != h * w {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("map rows {} != {h}x{w}", tx.rows()),
            });
        }
        assert!(stride == 1 || stride == 2, "conv2d stride must be 1 or 2");
        if stride == 2 && (h % 2 != 0 || w % 2 != 0) {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("stride-2 needs even dims, got {h}x{w}"),
            });
        }
        let cout = tw.cols();
        let (oh, ow) = (h / stride, w / stride);
        let x_data = tx.data.clone();
        let w_data = tw.data.clone();
        let b_data = tb.data.clone();
        let mut data = vec![0.0; oh * ow * cout];
        exec::for_each_chunk_mut(&mut data, cout, |pix, out_row| {
            let oy = pix / ow;
            let ox = pix % ow;
            out_row.copy_from_slice(&b_data);
            for dy in 0..3usize {
                let y = (stride * oy + dy) as isize - 1;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for dx in 0..3usize {
                    let xx = (stride * ox + dx) as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let in_row = &x_data[(y as usize * w + xx as usize) * cin..][..cin];
                    let w_block = &w_data[(dy * 3 + dx) * cin * cout..][..cin * cout];
                    for (ci, &xv) in in_row.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        for (o, &wv) in out_row.iter_mut().zip(&w_block[ci * cout..(ci + 1) * cout]) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        });
        let requires = self.any_requires(&[x, weights, bias]);
        let step = requires.then(|| {
            Box::new(Conv2dStep { x, weights, bias, h, w, stride }) as Box<dyn BackwardStep>
        });
        Ok(self.push(Tensor::new(vec![oh * ow, cout], data), requires, step))
    }

    /// Bilinear upsample of an [H*W, C] map by an integer factor
    /// (half-pixel-centered sampling, edge clamped).
    pub fn upsample_bilinear(
        &mut self,
        x: TensorId,
        h: usize,
        w: usize,
        factor: usize,
    ) -> TensorId {
        let tx = self.value(x);
        let c = tx.cols();
        assert_eq!(tx.rows(), h * w, "upsample_bilinear: map rows mismatch");
        let (oh, ow) = (h * factor, w * factor);
        let mut data = vec![0.0; oh * ow * c];
        for oy in 0..oh {
            let sy = ((oy as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for ox in 0..ow {
                let sx = ((ox as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                let out = &mut data[(oy * ow + ox) * c..][..c];
                for (corner, wt) in [
                    (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
                    (y0 * w + x1, (1.0 - fy) * fx),
                    (y1 * w + x0, fy * (1.0 - fx)),
                    (y1 * w + x1, fy * fx),
                ] {
                    if wt == 0.0 {
                        continue;
                    }
                    for (o, &v) in out.iter_mut().zip(&tx.data[corner * c..(corner + 1) * c]) {
                        *o += wt * v;
                    }
                }
            }
        }
        let requires = self.requires_grad(x);
        let step = requires.then(|| Box::new(UpsampleStep { x, h, w, factor }) as Box<dyn BackwardStep>);
        self.push(Tensor::new(vec![oh * ow, c], data), requires, step)
    }

    /// Weighted deformable sampling: for each reference pixel r_m,
    /// out[m] = sum_s weights[s] * bilinear(map, r_m + offsets[s]).
    ///
    /// `offsets` is [S, 2] (du, dv), `weights` [S] (callers pass
    /// post-softmax weights). Samples falling outside the map contribute
    /// zero. Differentiable in the map, offsets, and weights.
    pub fn deformable_sample(
        &mut self,
        map: TensorId,
        h: usize,
        w: usize,
        refs: Arc<Vec<[f64; 2]>>,
        offsets: TensorId,
        weights: TensorId,
    ) -> Result<TensorId> {
        let (tm, to, tw) = (self.value(map), self.value(offsets), self.value(weights));
        let c = tm.cols();
        if tm.rows() != h * w {
            return Err(Error::ShapeMismatch {
                op: "deformable_sample",
                detail: format!("map rows {} != {h}x{w}", tm.rows()),
            });
        }
        let s = tw.numel();
        if to.rows() != s || to.cols() != 2 {
            return Err(Error::ShapeMismatch {
                op: "deformable_sample",
                detail: format!("offsets {:?} vs {s} weights", to.shape),
            });
        }
        let m = refs.len();
        let map_data = tm.data.clone();
        let off = to.data.clone();
        let wts = tw.data.clone();
        let refs_cl = refs.clone();
        let mut data = vec![0.0; m * c];
        exec::for_each_chunk_mut(&mut data, c.max(1), |row, out_row| {
            let [ru, rv] = refs_cl[row];
            for si in 0..s {
                let u = ru + off[si * 2];
                let v = rv + off[si * 2 + 1];
                bilinear_accum(&map_data, h, w, c, u, v, wts[si], out_row);
            }
        });
        let requires = self.any_requires(&[map, offsets, weights]);
        let step = requires.then(|| {
            Box::new(DeformableStep { map, offsets, weights, h, w, refs }) as Box<dyn BackwardStep>
        });
        Ok(self.push(Tensor::new(vec![m, c], data), requires, step))
    }
}

/// Bilinear taps of (u, v) on an h x w grid; taps outside the grid are
/// dropped (zero contribution).
fn bilinear_taps(h: usize, w: usize, u: f64, v: f64) -> [(isize, isize, f64); 4] {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let mut taps = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ];
    for t in &mut taps {
        if t.0 < 0 || t.0 >= w as isize || t.1 < 0 || t.1 >= h as isize {
            t.2 = 0.0;
        }
    }
    taps
}

fn bilinear_accum(map: &[f64], h: usize, w: usize, c: usize, u: f64, v: f64, scale: f64, out: &mut [f64]) {
    for (x, y, wt) in bilinear_taps(h, w, u, v) {
        if wt == 0.0 {
            continue;
        }
        let row = &map[(y as usize * w + x as usize) * c..][..c];
        for (o, &m) in out.iter_mut().zip(row) {
            *o += scale * wt * m;
        }
    }
}

/// Plain bilinear map lookup (zero outside), shared with host-side code.
pub fn bilinear_value(map: &[f64], h: usize, w: usize, c: usize, u: f64, v: f64, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    bilinear_accum(map, h, w, c, u, v, 1.0, out);
}

struct Conv2dStep {
    x: TensorId,
    weights: TensorId,
    bias: TensorId,
    h: usize,
    w: usize,
    stride: usize,
}

impl BackwardStep for Conv2dStep {
    fn backward(&self, values: &[Tensor], g: &[f64], grads: &mut GradStore) {
        let tx = &values[self.x.0];
        let tw = &values[self.weights.0];
        let cin = tx.cols();
        let cout = tw.cols();
        let (h, w, s) = (self.h, self.w, self.stride);
        let (oh, ow) = (h / s, w / s);
        if grads.wants(self.bias) {
            let slot = grads.slot(self.bias);
            for row in g.chunks(cout) {
                for (o, &gv) in slot.iter_mut().zip(row) {
                    *o += gv;
                }
            }
        }
        if grads.wants(self.weights) {
            let slot = grads.slot(self.weights);
            for oy in 0..oh {
                for ox in 0..ow {
                    let g_row = &g[(oy * ow + ox) * cout..][..cout];
                    for dy in 0..3usize {
                        let y = (s * oy + dy) as isize - 1;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for dx in 0..3usize {
                            let xx = (s * ox + dx) as isize - 1;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let in_row = &tx.data[(y as usize * w + xx as usize) * cin..][..cin];
                            let w_slot = &mut slot[(dy * 3 + dx) * cin * cout..][..cin * cout];
                            for (ci, &xv) in in_row.iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                for (o, &gv) in w_slot[ci * cout..(ci + 1) * cout].iter_mut().zip(g_row) {
                                    *o += xv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        if grads.wants(self.x) {
            let slot = grads.slot(self.x);
            for y in 0..h {
                for xx in 0..w {
                    let gx_row = &mut slot[(y * w + xx) * cin..][..cin];
                    for dy in 0..3usize {
                        let oy_num = y as isize - (dy as isize - 1);
                        if oy_num < 0 || oy_num % s as isize != 0 {
                            continue;
                        }
                        let oy = (oy_num / s as isize) as usize;
                        if oy >= oh {
                            continue;
                        }
                        for dx in 0..3usize {
                            let ox_num = xx as isize - (dx as isize - 1);
                            if ox_num < 0 || ox_num % s as isize != 0 {
                                continue;
                            }
                            let ox = (ox_num / s as isize) as usize;
                            if ox >= ow {
                                continue;
                            }
                            let g_row = &g[(oy * ow + ox) * cout..][..cout];
                            let w_block = &tw.data[(dy * 3 + dx) * cin * cout..][..cin * cout];
                            for (ci, o) in gx_row.iter_mut().enumerate() {
                                let wr = &w_block[ci * cout..(ci + 1) * cout];
                                *o += wr.iter().zip(g_row).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                }
            }
        }
    }
}

struct UpsampleStep {
    x: TensorId,
    h: usize,
    w: usize,
    factor: usize,
}

impl BackwardStep for UpsampleStep {
    fn backward(&self, values: &[Tensor], g: &[f64], grads: &mut GradStore) {
        if !grads.wants(self.x) {
            return;
        }
        let c = values[self.x.0].cols();
        let (h, w, f) = (self.h, self.w, self.factor);
        let (oh, ow) = (h * f, w * f);
        let slot = grads.slot(self.x);
        for oy in 0..oh {
            let sy = ((oy as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for ox in 0..ow {
                let sx = ((ox as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                let g_row = &g[(oy * ow + ox) * c..][..c];
                for (corner, wt) in [
                    (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
                    (y0 * w + x1, (1.0 - fy) * fx),
                    (y1 * w + x0, fy * (1.0 - fx)),
                    (y1 * w + x1, fy * fx),
                ] {
                    if wt == 0.0 {
                        continue;
                    }
                    for (o, &gv) in slot[corner * c..(corner + 1) * c].iter_mut().zip(g_row) {
                        *o += wt * gv;
                    }
                }
            }
        }
    }
}

struct DeformableStep {
    map: TensorId,
    offsets: TensorId,
    weights: TensorId,
    h: usize,
    w: usize,
    refs: Arc<Vec<[f64; 2]>>,
}

impl BackwardStep for DeformableStep {
    fn backward(&self, values: &[Tensor], g: &[f64], grads: &mut GradStore) {
        let tm = &values[self.map.0];
        let to = &values[self.offsets.0];
        let tw = &values[self.weights.0];
        let c = tm.cols();
        let s = tw.numel();
        let (h, w) = (self.h, self.w);
        for (m, &[ru, rv]) in self.refs.iter().enumerate() {
            let g_row = &g[m * c..(m + 1) * c];
            for si in 0..s {
                let u = ru + to.data[si * 2];
                let v = rv + to.data[si * 2 + 1];
                let taps = bilinear_taps(h, w, u, v);
                if grads.wants(self.map) {
                    let wt_s = tw.data[si];
                    let slot = grads.slot(self.map);
                    for (x, y, wt) in taps {
                        if wt == 0.0 {
                            continue;
                        }
                        let row = &mut slot[(y as usize * w + x as usize) * c..][..c];
                        for (o, &gv) in row.iter_mut().zip(g_row) {
                            *o += wt_s * wt * gv;
                        }
                    }
                }
                if grads.wants(self.weights) || grads.wants(self.offsets) {
                    // Value and spatial derivatives of the bilinear sample.
                    let x0 = u.floor();
                    let y0 = v.floor();
                    let fx = u - x0;
                    let fy = v - y0;
                    let mut value_dot = 0.0;
                    let mut du_dot = 0.0;
                    let mut dv_dot = 0.0;
                    for (x, y, wt, du, dv) in [
                        (x0 as isize, y0 as isize, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
                        (x0 as isize + 1, y0 as isize, fx * (1.0 - fy), 1.0 - fy, -fx),
                        (x0 as isize, y0 as isize + 1, (1.0 - fx) * fy, -fy, 1.0 - fx),
                        (x0 as isize + 1, y0 as isize + 1, fx * fy, fy, fx),
                    ] {
                        if x < 0 || x >= w as isize || y < 0 || y >= h as isize {
                            continue;
                        }
                        let row = &tm.data[(y as usize * w + x as usize) * c..][..c];
                        let dot: f64 = row.iter().zip(g_row).map(|(a, b)| a * b).sum();
                        value_dot += wt * dot;
                        du_dot += du * dot;
                        dv_dot += dv * dot;
                    }
                    if grads.wants(self.weights) {
                        grads.slot(self.weights)[si] += value_dot;
                    }
                    if grads.wants(self.offsets) {
                        let wt_s = tw.data[si];
                        let slot = grads.slot(self.offsets);
                        slot[si * 2] += wt_s * du_dot;
                        slot[si * 2 + 1] += wt_s * dv_dot;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_map(h: usize, w: usize, c: usize) -> Tensor {
        let data = (0..h * w * c).map(|i| i as f64).collect();
        Tensor::new(vec![h * w, c], data)
    }

    #[test]
    fn deformable_zero_offset_integer_pixel() {
        let mut g = Graph::new();
        let map = g.constant(ramp_map(4, 4, 2));
        let offsets = g.constant(Tensor::zeros(vec![1, 2]));
        let weights = g.constant(Tensor::new(vec![1], vec![1.0]));
        let refs = Arc::new(vec![[2.0, 1.0]]);
        let out = g.deformable_sample(map, 4, 4, refs, offsets, weights).unwrap();
        // Pixel (x=2, y=1), c=2: flat index (1*4+2)*2 = 12.
        assert_eq!(g.value(out).data, vec![12.0, 13.0]);
    }

    #[test]
    fn deformable_bilinear_midpoint() {
        let mut g = Graph::new();
        // 1x2 map with values 0 and 1.
        let map = g.constant(Tensor::new(vec![2, 1], vec![0.0, 1.0]));
        let offsets = g.constant(Tensor::new(vec![1, 2], vec![0.5, 0.0]));
        let weights = g.constant(Tensor::new(vec![1], vec![1.0]));
        let refs = Arc::new(vec![[0.0, 0.0]]);
        let out = g.deformable_sample(map, 1, 2, refs, offsets, weights).unwrap();
        assert!((g.value(out).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn deformable_outside_contributes_zero() {
        let mut g = Graph::new();
        let map = g.constant(Tensor::new(vec![4, 1], vec![1.0; 4]));
        let offsets = g.constant(Tensor::new(vec![1, 2], vec![10.0, 0.0]));
        let weights = g.constant(Tensor::new(vec![1], vec![1.0]));
        let refs = Arc::new(vec![[0.0, 0.0]]);
        let out = g.deformable_sample(map, 2, 2, refs, offsets, weights).unwrap();
        assert_eq!(g.value(out).item(), 0.0);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut g = Graph::new();
        let x = g.constant(ramp_map(4, 4, 1));
        // 3x3 kernel with center tap 1.
        let mut wdata = vec![0.0; 9];
        wdata[4] = 1.0;
        let w = g.constant(Tensor::new(vec![9, 1], wdata));
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.conv2d(x, 4, 4, w, b, 1).unwrap();
        assert_eq!(g.value(y).data, g.value(x).data);
    }

    #[test]
    fn conv2d_stride2_shape() {
        let mut g = Graph::new();
        let x = g.constant(ramp_map(4, 8, 2));
        let w = g.constant(Tensor::zeros(vec![18, 3]));
        let b = g.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]));
        let y = g.conv2d(x, 4, 8, w, b, 2).unwrap();
        assert_eq!(g.value(y).shape, vec![8, 3]);
        assert_eq!(&g.value(y).data[..3], &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv2d_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(ramp_map(4, 4, 2));
        let w = g.constant(Tensor::zeros(vec![9, 1]));
        let b = g.constant(Tensor::zeros(vec![1]));
        assert!(g.conv2d(x, 4, 4, w, b, 1).is_err());
    }

    #[test]
    fn upsample_constant_map_stays_constant() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![4, 1], vec![3.0; 4]));
        let y = g.upsample_bilinear(x, 2, 2, 2);
        assert_eq!(g.value(y).shape, vec![16, 1]);
        assert!(g.value(y).data.iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }
}
