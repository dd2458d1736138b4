//! Depth-prior estimation in the fragment bounding volume: back-projection
//! of per-view features, masked mean/variance across views, sparse-conv
//! aggregation into occupancy logits, the prior loss, and thresholding.
//!
//! The visibility mask of a voxel in a view is purely geometric: it projects
//! in bounds with positive depth. Voxels visible in no view carry no
//! evidence and are dropped before reconstruction (their count is reported).

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::Vector3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::CameraFrame;
use crate::nncore::{
    Activation, DeformParams, Graph, MlpParams, NeighborTable, ParamBinding, ParamSet,
    SparseConvParams, TensorId,
};

/// Projection bookkeeping for a voxel set against a fragment's views:
/// per-view visible rows and pixel references, plus per-voxel counts.
#[derive(Debug, Clone)]
pub struct ViewGather {
    pub n_voxels: usize,
    pub visible: Vec<Arc<Vec<u32>>>,
    pub refs: Vec<Arc<Vec<[f64; 2]>>>,
    pub counts: Vec<u32>,
}

impl ViewGather {
    pub fn n_views(&self) -> usize {
        self.visible.len()
    }

    /// Per-voxel mask flags, view-major: mask[i][v].
    pub fn mask(&self, view: usize, voxel: usize) -> bool {
        // Only used by tests/diagnostics; visibility lists are sorted.
        self.visible[view].binary_search(&(voxel as u32)).is_ok()
    }

    /// Voxels with at least one visible view.
    pub fn active_mask(&self) -> Vec<bool> {
        self.counts.iter().map(|&c| c > 0).collect()
    }

    pub fn dropped_count(&self) -> usize {
        self.counts.iter().filter(|&&c| c == 0).count()
    }
}

/// Project voxel centers into every view; m_i = 1 iff in bounds with
/// positive depth.
pub fn project_gather(centers: &[Vector3<f64>], frames: &[CameraFrame]) -> ViewGather {
    let mut counts = vec![0u32; centers.len()];
    let per_view: Vec<(Vec<u32>, Vec<[f64; 2]>)> = frames
        .iter()
        .map(|frame| {
            let projections = exec::map_slice(centers, |&p| frame.project(p));
            let mut rows = Vec::new();
            let mut refs = Vec::new();
            for (v, proj) in projections.iter().enumerate() {
                if proj.in_bounds {
                    rows.push(v as u32);
                    refs.push(proj.pixel);
                }
            }
            (rows, refs)
        })
        .collect();
    let mut visible = Vec::with_capacity(frames.len());
    let mut refs = Vec::with_capacity(frames.len());
    for (rows, r) in per_view {
        for &v in &rows {
            counts[v as usize] += 1;
        }
        visible.push(Arc::new(rows));
        refs.push(Arc::new(r));
    }
    ViewGather { n_voxels: centers.len(), visible, refs, counts }
}

/// Scale pixel references into a coarser map's coordinates.
pub fn scaled_refs(gather: &ViewGather, view: usize, inv_scale: f64) -> Arc<Vec<[f64; 2]>> {
    if (inv_scale - 1.0).abs() < 1e-12 {
        return gather.refs[view].clone();
    }
    Arc::new(
        gather.refs[view]
            .iter()
            .map(|&[u, v]| [u * inv_scale, v * inv_scale])
            .collect(),
    )
}

/// Gather per-view features at each visible voxel's projection via the
/// deformable sampler. Returns one [M_i, C] tensor per view.
pub fn gather_views(
    g: &mut Graph,
    params: &ParamSet,
    bind: &mut ParamBinding,
    deform: &DeformParams,
    gather: &ViewGather,
    maps: &[(TensorId, usize, usize)],
    inv_scale: f64,
) -> Result<Vec<TensorId>> {
    assert_eq!(maps.len(), gather.n_views(), "one map per view");
    let mut out = Vec::with_capacity(maps.len());
    for (view, &(map, h, w)) in maps.iter().enumerate() {
        let refs = scaled_refs(gather, view, inv_scale);
        out.push(deform.sample(g, params, bind, map, h, w, refs)?);
    }
    Ok(out)
}

/// Masked mean over views, Eq.-style: mu_v = sum_i m_i p_i / sum_i m_i.
/// Rows with zero visible views come out all-zero (callers drop them).
pub fn masked_mean(g: &mut Graph, samples: &[TensorId], gather: &ViewGather) -> TensorId {
    let stacked = g.concat_rows(samples);
    let idx: Vec<u32> = gather
        .visible
        .iter()
        .flat_map(|rows| rows.iter().copied())
        .collect();
    let summed = g.scatter_add_rows(stacked, Arc::new(idx), gather.n_voxels);
    let inv: Vec<f64> = gather
        .counts
        .iter()
        .map(|&c| if c > 0 { 1.0 / c as f64 } else { 0.0 })
        .collect();
    g.scale_rows(summed, Arc::new(inv))
}

/// Masked variance over views against a given mean:
/// sigma2_v = sum_i m_i (p_i - mu_v)^2 / sum_i m_i.
pub fn masked_variance(
    g: &mut Graph,
    samples: &[TensorId],
    mean: TensorId,
    gather: &ViewGather,
) -> TensorId {
    let mut sq_parts = Vec::with_capacity(samples.len());
    for (view, &s) in samples.iter().enumerate() {
        let mu_rows = g.gather_rows(mean, gather.visible[view].clone());
        let d = g.sub(s, mu_rows);
        sq_parts.push(g.mul(d, d));
    }
    masked_mean(g, &sq_parts, gather)
}

/// Prior head parameters: two submanifold convs then a per-voxel MLP.
#[derive(Debug, Clone)]
pub struct PriorHeadParams {
    pub conv1: SparseConvParams,
    pub conv2: SparseConvParams,
    pub mlp: MlpParams,
}

impl PriorHeadParams {
    pub fn init(params: &mut ParamSet, channels: usize, rng: &mut impl Rng) -> Self {
        PriorHeadParams {
            conv1: SparseConvParams::init(params, "prior.conv1", channels, channels, rng),
            conv2: SparseConvParams::init(params, "prior.conv2", channels, channels, rng),
            mlp: MlpParams::init(
                params,
                "prior.head",
                &[channels, channels, 1],
                &[Activation::Relu, Activation::Identity],
                rng,
            ),
        }
    }

    /// Variance volume [V, C] -> occupancy logits [V, 1].
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        bind: &mut ParamBinding,
        variance: TensorId,
        table: &Arc<NeighborTable>,
    ) -> Result<TensorId> {
        let x = self.conv1.apply(g, params, bind, variance, table)?;
        let x = g.relu(x);
        let x = self.conv2.apply(g, params, bind, x, table)?;
        let x = g.relu(x);
        self.mlp.forward(g, params, bind, x)
    }
}

/// Keep mask: sigma(logit) > tau (strict).
pub fn threshold_occupancy(logits: &[f64], tau: f64) -> Vec<bool> {
    logits
        .iter()
        .map(|&o| crate::depth_prior::sigmoid(o) > tau)
        .collect()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-fragment diagnostic dump:
/// voxel index, visible count, mean variance, occupancy prob, GT 1-|tsdf|.
pub fn write_diagnostics(
    path: &Path,
    coords: &[[i32; 3]],
    gather: &ViewGather,
    variance: &[f64],
    channels: usize,
    logits: &[f64],
    gt_targets: &[f64],
) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "voxel_x,voxel_y,voxel_z,views,mean_variance,occupancy_prob,gt_surface")
        .map_err(|e| Error::io(path, e))?;
    for (i, c) in coords.iter().enumerate() {
        let mv = variance[i * channels..(i + 1) * channels]
            .iter()
            .sum::<f64>()
            / channels as f64;
        writeln!(
            f,
            "{},{},{},{},{:.6},{:.6},{:.6}",
            c[0],
            c[1],
            c[2],
            gather.counts[i],
            mv,
            sigmoid(logits[i]),
            1.0 - gt_targets[i].abs()
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidTransform;
    use crate::nncore::Tensor;
    use nalgebra::Matrix3;
    use rand::SeedableRng;

    fn frame_at(pos: Vector3<f64>, target: Vector3<f64>) -> CameraFrame {
        let k = Matrix3::new(100.0, 0.0, 64.0, 0.0, 100.0, 48.0, 0.0, 0.0, 1.0);
        CameraFrame::new(0, k, RigidTransform::look_at(pos, target), 128, 96).unwrap()
    }

    #[test]
    fn gather_masks_match_projection_oracle() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let frames: Vec<CameraFrame> = (0..4)
            .map(|i| {
                let a = i as f64 * 0.8;
                frame_at(
                    Vector3::new(2.0 * a.cos(), 2.0 * a.sin(), 1.0),
                    Vector3::new(0.0, 0.0, 0.8),
                )
            })
            .collect();
        let centers: Vec<Vector3<f64>> = (0..300)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-1.0..3.0),
                )
            })
            .collect();
        let gather = project_gather(&centers, &frames);
        for (vi, frame) in frames.iter().enumerate() {
            for (i, &p) in centers.iter().enumerate() {
                let expect = frame.project(p).in_bounds;
                assert_eq!(gather.mask(vi, i), expect, "view {vi} voxel {i}");
            }
        }
        // Counts agree with the masks.
        for (i, &c) in gather.counts.iter().enumerate() {
            let n: u32 = (0..frames.len()).map(|v| gather.mask(v, i) as u32).sum();
            assert_eq!(c, n);
        }
    }

    #[test]
    fn voxel_behind_all_cameras_dropped() {
        let frames = vec![frame_at(Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 2.0, 1.0))];
        // Behind the camera (negative y from it).
        let gather = project_gather(&[Vector3::new(0.0, -2.0, 1.0)], &frames);
        assert_eq!(gather.counts, vec![0]);
        assert_eq!(gather.dropped_count(), 1);
        assert_eq!(gather.active_mask(), vec![false]);
    }

    #[test]
    fn voxel_on_principal_axis_of_one_view() {
        let frames = vec![
            frame_at(Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 2.0, 1.0)),
            frame_at(Vector3::new(10.0, 10.0, 1.0), Vector3::new(12.0, 10.0, 1.0)),
        ];
        let gather = project_gather(&[Vector3::new(0.0, 1.0, 1.0)], &frames);
        assert!(gather.mask(0, 0));
        assert!(!gather.mask(1, 0));
        assert_eq!(gather.counts, vec![1]);
    }

    /// Build a synthetic gather with explicit masks for direct mean/variance
    /// testing (no cameras involved).
    fn synthetic_gather(masks: &[Vec<bool>]) -> ViewGather {
        let n_voxels = masks[0].len();
        let mut counts = vec![0u32; n_voxels];
        let mut visible = Vec::new();
        let mut refs = Vec::new();
        for view_mask in masks {
            let rows: Vec<u32> = view_mask
                .iter()
                .enumerate()
                .filter_map(|(i, &m)| m.then_some(i as u32))
                .collect();
            for &r in &rows {
                counts[r as usize] += 1;
            }
            refs.push(Arc::new(vec![[0.0, 0.0]; rows.len()]));
            visible.push(Arc::new(rows));
        }
        ViewGather { n_voxels, visible, refs, counts }
    }

    #[test]
    fn masked_mean_and_variance_hand_cases() {
        // N=2 views, both visible, p = (1,3) and (3,1) per channel.
        let gather = synthetic_gather(&[vec![true], vec![true]]);
        let mut g = Graph::new();
        let s0 = g.constant(Tensor::new(vec![1, 2], vec![1.0, 3.0]));
        let s1 = g.constant(Tensor::new(vec![1, 2], vec![3.0, 1.0]));
        let mean = masked_mean(&mut g, &[s0, s1], &gather);
        assert_eq!(g.value(mean).data, vec![2.0, 2.0]);
        let var = masked_variance(&mut g, &[s0, s1], mean, &gather);
        assert_eq!(g.value(var).data, vec![1.0, 1.0]);
    }

    #[test]
    fn single_view_mean_is_sample_and_variance_zero() {
        let gather = synthetic_gather(&[vec![true], vec![false]]);
        let mut g = Graph::new();
        let s0 = g.constant(Tensor::new(vec![1, 2], vec![0.7, -0.2]));
        let s1 = g.constant(Tensor::new(vec![0, 2], vec![]));
        let mean = masked_mean(&mut g, &[s0, s1], &gather);
        assert_eq!(g.value(mean).data, vec![0.7, -0.2]);
        let var = masked_variance(&mut g, &[s0, s1], mean, &gather);
        assert_eq!(g.value(var).data, vec![0.0, 0.0]);
    }

    #[test]
    fn identical_views_mean_equals_them_variance_zero() {
        let gather = synthetic_gather(&[vec![true; 3], vec![true; 3], vec![true; 3]]);
        let mut g = Graph::new();
        let f = Tensor::new(vec![3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let ids: Vec<TensorId> = (0..3).map(|_| g.constant(f.clone())).collect();
        let mean = masked_mean(&mut g, &ids, &gather);
        assert_eq!(g.value(mean).data, f.data);
        let var = masked_variance(&mut g, &ids, mean, &gather);
        assert!(g.value(var).data.iter().all(|&v| v.abs() < 1e-15));
    }

    /// The paper's stated property: duplicating every visible view leaves
    /// mean and variance unchanged.
    #[test]
    fn view_count_independence() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(43);
        for _ in 0..20 {
            let n_vox = rng.gen_range(1..6);
            let n_views = rng.gen_range(1..4);
            let masks: Vec<Vec<bool>> = (0..n_views)
                .map(|_| (0..n_vox).map(|_| rng.gen_bool(0.7)).collect())
                .collect();
            let samples: Vec<Tensor> = masks
                .iter()
                .map(|m| {
                    let rows = m.iter().filter(|&&b| b).count();
                    Tensor::new(vec![rows, 2], (0..rows * 2).map(|_| rng.gen_range(-1.0..1.0)).collect())
                })
                .collect();

            let run = |masks: &[Vec<bool>], samples: &[Tensor]| {
                let gather = synthetic_gather(masks);
                let mut g = Graph::new();
                let ids: Vec<TensorId> = samples.iter().map(|t| g.constant(t.clone())).collect();
                let mean = masked_mean(&mut g, &ids, &gather);
                let var = masked_variance(&mut g, &ids, mean, &gather);
                (g.value(mean).data.clone(), g.value(var).data.clone())
            };
            let (m1, v1) = run(&masks, &samples);
            // Duplicate every view.
            let masks2: Vec<Vec<bool>> = masks.iter().chain(masks.iter()).cloned().collect();
            let samples2: Vec<Tensor> = samples.iter().chain(samples.iter()).cloned().collect();
            let (m2, v2) = run(&masks2, &samples2);
            for (a, b) in m1.iter().zip(&m2) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in v1.iter().zip(&v2) {
                assert!((a - b).abs() < 1e-12, "variance changed: {a} vs {b}");
            }
        }
    }

    #[test]
    fn variance_nonnegative_and_zero_iff_equal() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(44);
        for _ in 0..50 {
            let gather = synthetic_gather(&[vec![true], vec![true], vec![true]]);
            let vals: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut g = Graph::new();
            let ids: Vec<TensorId> = vals
                .iter()
                .map(|&v| g.constant(Tensor::new(vec![1, 1], vec![v])))
                .collect();
            let mean = masked_mean(&mut g, &ids, &gather);
            let var = masked_variance(&mut g, &ids, mean, &gather);
            let v = g.value(var).data[0];
            assert!(v >= -1e-15);
            let all_equal = vals.iter().all(|&x| (x - vals[0]).abs() < 1e-15);
            assert_eq!(v.abs() < 1e-15, all_equal, "vals {vals:?} var {v}");
        }
    }

    #[test]
    fn threshold_boundary_and_degenerate() {
        // sigma(0) = 0.5 is NOT > 0.5: dropped at the boundary.
        assert_eq!(threshold_occupancy(&[0.0], 0.5), vec![false]);
        // tau -> 0 keeps everything.
        assert_eq!(threshold_occupancy(&[-50.0, 0.0, 50.0], 1e-12), vec![true, true, true]);
    }

    #[test]
    fn prior_head_zero_weights_gives_bias_and_determinism() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(45);
        let mut params = ParamSet::new();
        let head = PriorHeadParams::init(&mut params, 4, &mut rng);
        // Zero everything; logits must equal the final bias (0).
        for id in params.ids().collect::<Vec<_>>() {
            params.tensor_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let coords = vec![[0, 0, 0], [1, 0, 0], [0, 1, 0]];
        let table = Arc::new(crate::nncore::neighbor_table(&coords));
        let mut g = Graph::new();
        let mut bind = ParamBinding::new();
        let x = g.constant(Tensor::new(vec![3, 4], vec![0.3; 12]));
        let logits = head.forward(&mut g, &params, &mut bind, x, &table).unwrap();
        assert!(g.value(logits).data.iter().all(|&v| v == 0.0));

        // Determinism with random weights.
        let mut params = ParamSet::new();
        let head = PriorHeadParams::init(&mut params, 4, &mut rng);
        let run = || {
            let mut g = Graph::new();
            let mut bind = ParamBinding::new();
            let x = g.constant(Tensor::new(vec![3, 4], vec![0.3; 12]));
            let logits = head.forward(&mut g, &params, &mut bind, x, &table).unwrap();
            g.value(logits).data.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn diagnostics_csv_writes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("diag.csv");
        let gather = synthetic_gather(&[vec![true, false]]);
        write_diagnostics(
            &path,
            &[[0, 0, 0], [1, 0, 0]],
            &gather,
            &[0.5, 0.25, 0.1, 0.2],
            2,
            &[0.0, 1.0],
            &[0.0, -0.5],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("voxel_x,"));
        assert_eq!(text.lines().count(), 3);
    }
}
