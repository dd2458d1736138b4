//! Submanifold sparse 3D convolution and the convolutional GRU fusion cell.
//!
//! The 3x3x3 kernel is evaluated only at active voxels, and the output
//! active set is exactly the input active set (the submanifold property).
//! Neighbor lookups are precomputed into a flat table outside the graph.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::exec;

use super::graph::{BackwardStep, GradStore, Graph, Tensor, TensorId};

pub const ABSENT: u32 = u32::MAX;

/// Per-voxel neighbor rows for each of the 27 kernel taps (ABSENT where the
/// neighbor voxel is inactive). Tap t = (dz+1)*9 + (dy+1)*3 + (dx+1); the
/// center tap is 13.
#[derive(Debug, Clone)]
pub struct NeighborTable {
    pub n_voxels: usize,
    pub nbr: Vec<u32>,
}

/// Build the tap table for a sorted unique coordinate set.
pub fn neighbor_table(coords: &[[i32; 3]]) -> NeighborTable {
    let lookup: std::collections::HashMap<[i32; 3], u32> = coords
        .iter()
        .enumerate()
        .map(|(i, c)| (*c, i as u32))
        .collect();
    let rows = exec::map_slice(coords, |c| {
        let mut row = [ABSENT; 27];
        let mut t = 0;
        for dz in -1i32..=1 {
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    if let Some(&i) = lookup.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        row[t] = i;
                    }
                    t += 1;
                }
            }
        }
        row
    });
    let mut nbr = Vec::with_capacity(coords.len() * 27);
    for r in rows {
        nbr.extend_from_slice(&r);
    }
    NeighborTable {
        n_voxels: coords.len(),
        nbr,
    }
}

/// Handles for one 3x3x3 sparse conv: weights [27*Cin, Cout], bias [Cout].
#[derive(Debug, Clone, Copy)]
pub struct SparseConvKernel {
    pub weights: TensorId,
    pub bias: TensorId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Graph {
    /// Submanifold sparse 3D convolution of per-voxel features [V, Cin].
    pub fn sparse_conv(
        &mut self,
        x: TensorId,
        kernel: &SparseConvKernel,
        table: &Arc<NeighborTable>,
    ) -> Result<TensorId> {
        let tx = self.value(x);
        let cin = kernel.in_channels;
        let cout = kernel.out_channels;
        if tx.cols() != cin {
            return Err(Error::ChannelMismatch { expected: cin, got: tx.cols() });
        }
        let tw = self.value(kernel.weights);
        assert_eq!(tw.rows(), 27 * cin, "sparse_conv weight rows");
        assert_eq!(tw.cols(), cout, "sparse_conv weight cols");
        let v = table.n_voxels;
        assert_eq!(tx.rows(), v, "sparse_conv voxel count mismatch");

        let x_data = tx.data.clone();
        let w_data = tw.data.clone();
        let b_data = self.value(kernel.bias).data.clone();
        let nbr = &table.nbr;
        let mut data = vec![0.0; v * cout];
        exec::for_each_chunk_mut(&mut data, cout.max(1), |row, out_row| {
            out_row.copy_from_slice(&b_data);
            let taps = &nbr[row * 27..row * 27 + 27];
            for (t, &n) in taps.iter().enumerate() {
                if n == ABSENT {
                    continue;
                }
                let in_row = &x_data[n as usize * cin..(n as usize + 1) * cin];
                let w_block = &w_data[t * cin * cout..(t + 1) * cin * cout];
                for (ci, &xv) in in_row.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    for (o, &wv) in out_row.iter_mut().zip(&w_block[ci * cout..(ci + 1) * cout]) {
                        *o += xv * wv;
                    }
                }
            }
        });
        let requires = self.any_requires(&[x, kernel.weights, kernel.bias]);
        let step = requires.then(|| {
            Box::new(SparseConvStep {
                x,
                weights: kernel.weights,
                bias: kernel.bias,
                cin,
                cout,
                table: table.clone(),
            }) as Box<dyn BackwardStep>
        });
        Ok(self.push(Tensor::new(vec![v, cout], data), requires, step))
    }
}

struct SparseConvStep {
    x: TensorId,
    weights: TensorId,
    bias: TensorId,
    cin: usize,
    cout: usize,
    table: Arc<NeighborTable>,
}

impl BackwardStep for SparseConvStep {
    fn backward(&self, values: &[Tensor], g: &[f64], grads: &mut GradStore) {
        let (cin, cout) = (self.cin, self.cout);
        let v = self.table.n_voxels;
        let nbr = &self.table.nbr;
        if grads.wants(self.bias) {
            let slot = grads.slot(self.bias);
            for row in g.chunks(cout) {
                for (o, &gv) in slot.iter_mut().zip(row) {
                    *o += gv;
                }
            }
        }
        if grads.wants(self.x) {
            // The neighbor relation is symmetric over the active set:
            // voxel n sees voxel m at tap t iff m sees n at tap 26-t, so the
            // input gradient is a gather with transposed weight blocks.
            let tw = &values[self.weights.0].data;
            let slot = grads.slot(self.x);
            exec::for_each_chunk_mut(slot, cin.max(1), |row, gx_row| {
                let taps = &nbr[row * 27..row * 27 + 27];
                for (t, &m) in taps.iter().enumerate() {
                    if m == ABSENT {
                        continue;
                    }
                    let g_row = &g[m as usize * cout..(m as usize + 1) * cout];
                    let w_block = &tw[(26 - t) * cin * cout..(27 - t) * cin * cout];
                    for (ci, o) in gx_row.iter_mut().enumerate() {
                        let wr = &w_block[ci * cout..(ci + 1) * cout];
                        *o += wr.iter().zip(g_row).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            });
        }
        if grads.wants(self.weights) {
            let tx = &values[self.x.0].data;
            // Fixed-chunk partials folded in order keep this deterministic.
            let partials = exec::chunk_partials(v, 2048, |range| {
                let mut part = vec![0.0; 27 * cin * cout];
                for row in range {
                    let g_row = &g[row * cout..(row + 1) * cout];
                    let taps = &nbr[row * 27..row * 27 + 27];
                    for (t, &n) in taps.iter().enumerate() {
                        if n == ABSENT {
                            continue;
                        }
                        let in_row = &tx[n as usize * cin..(n as usize + 1) * cin];
                        let w_slot = &mut part[t * cin * cout..(t + 1) * cin * cout];
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
                part
            });
            let slot = grads.slot(self.weights);
            for part in partials {
                for (o, p) in slot.iter_mut().zip(&part) {
                    *o += p;
                }
            }
        }
    }
}

/// Convolutional GRU fusion:
/// z = sigma(conv_z[h, x]), r = sigma(conv_r[h, x]),
/// h~ = tanh(conv_h[r*h, x]), h' = (1 - z)*h + z*h~.
///
/// `hidden` and `input` must be aligned on the same active voxel set
/// (callers zero-fill missing hidden rows).
pub fn gru_fuse(
    g: &mut Graph,
    hidden: TensorId,
    input: TensorId,
    conv_z: &SparseConvKernel,
    conv_r: &SparseConvKernel,
    conv_h: &SparseConvKernel,
    table: &Arc<NeighborTable>,
) -> Result<TensorId> {
    let ch = g.value(hidden).cols();
    let cx = g.value(input).cols();
    if g.value(hidden).rows() != g.value(input).rows() {
        return Err(Error::ShapeMismatch {
            op: "gru_fuse",
            detail: format!(
                "hidden rows {} != input rows {}",
                g.value(hidden).rows(),
                g.value(input).rows()
            ),
        });
    }
    for (name, k) in [("z", conv_z), ("r", conv_r), ("h", conv_h)] {
        if k.in_channels != ch + cx || k.out_channels != ch {
            return Err(Error::ShapeMismatch {
                op: "gru_fuse",
                detail: format!(
                    "conv_{name} expects {}->{} channels, got {}->{}",
                    ch + cx,
                    ch,
                    k.in_channels,
                    k.out_channels
                ),
            });
        }
    }
    let hx = g.concat_cols(&[hidden, input]);
    let z_pre = g.sparse_conv(hx, conv_z, table)?;
    let z = g.sigmoid(z_pre);
    let r_pre = g.sparse_conv(hx, conv_r, table)?;
    let r = g.sigmoid(r_pre);
    let rh = g.mul(r, hidden);
    let rhx = g.concat_cols(&[rh, input]);
    let cand_pre = g.sparse_conv(rhx, conv_h, table)?;
    let cand = g.tanh_act(cand_pre);
    // h' = h - z*h + z*h~
    let zh = g.mul(z, hidden);
    let zc = g.mul(z, cand);
    let keep = g.sub(hidden, zh);
    Ok(g.add(keep, zc))
}
