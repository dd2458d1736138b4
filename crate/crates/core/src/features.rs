//! Per-view multi-scale feature pyramids and the pixel-similarity transform.
//!
//! Two extraction paths share one output contract (three 8-channel maps at
//! relative resolutions 1/2/4):
//!
//! * the deterministic synthetic extractor, a fixed function of rendered
//!   color, world-space normals, and log-depth image gradients (the
//!   desk-scale stand-in for a pretrained backbone — see README), and
//! * a small learnable strided-conv encoder over the color channels.
//!
//! The similarity path applies a learned 2-layer conv transform per scale,
//! upsamples the coarse scales, and sums them into one map used by the
//! depth-prior gather.

use rand::Rng;

use crate::error::Result;
use crate::nncore::{Graph, ParamBinding, ParamId, ParamSet, Tensor, TensorId};
use crate::synth::RenderBundle;

/// Feature channels at every pyramid scale.
pub const FEATURE_CHANNELS: usize = 8;

/// Host-side single-scale feature map, row-major [h*w, channels].
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(h: usize, w: usize, channels: usize) -> Self {
        FeatureMap { h, w, channels, data: vec![0.0; h * w * channels] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        &self.data[(y * self.w + x) * self.channels..(y * self.w + x + 1) * self.channels]
    }

    fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.h * self.w, self.channels], self.data.clone())
    }
}

/// Three feature maps at relative resolutions {1, 2, 4}.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub frame_id: u64,
    pub scales: [FeatureMap; 3],
}

/// Graph-side pyramid handles.
#[derive(Debug, Clone, Copy)]
pub struct PyramidNodes {
    pub scales: [TensorId; 3],
    pub dims: [(usize, usize); 3],
}

/// 2x average pooling.
fn avg_pool2(src: &FeatureMap) -> FeatureMap {
    let (h, w, c) = (src.h / 2, src.w / 2, src.channels);
    let mut out = FeatureMap::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let dst = (y * w + x) * c;
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let s = ((2 * y + dy) * src.w + 2 * x + dx) * c;
                for ch in 0..c {
                    out.data[dst + ch] += 0.25 * src.data[s + ch];
                }
            }
        }
    }
    out
}

/// Deterministic synthetic extractor: channels are
/// [r, g, b, nx, ny, nz, d(log depth)/du, d(log depth)/dv], with the
/// gradients clamped to [-1, 1]. Coarser scales are average-pooled.
pub fn synthetic_pyramid(render: &RenderBundle) -> Result<FeaturePyramid> {
    let (h, w) = (render.height, render.width);
    if h % 4 != 0 || w % 4 != 0 {
        return Err(crate::error::Error::Data(format!(
            "synthetic_pyramid: dimensions {w}x{h} not divisible by 4"
        )));
    }
    let mut fine = FeatureMap::zeros(h, w, FEATURE_CHANNELS);
    let logd: Vec<f64> = render.depth.data.iter().map(|&d| (1.0 + d.min(50.0)).ln()).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let o = i * FEATURE_CHANNELS;
            fine.data[o..o + 3].copy_from_slice(&render.color[i * 3..i * 3 + 3]);
            fine.data[o + 3..o + 6].copy_from_slice(&render.normal[i * 3..i * 3 + 3]);
            let gx = if x == 0 {
                logd[i + 1] - logd[i]
            } else if x == w - 1 {
                logd[i] - logd[i - 1]
            } else {
                (logd[i + 1] - logd[i - 1]) / 2.0
            };
            let gy = if y == 0 {
                logd[i + w] - logd[i]
            } else if y == h - 1 {
                logd[i] - logd[i - w]
            } else {
                (logd[i + w] - logd[i - w]) / 2.0
            };
            fine.data[o + 6] = (gx * 8.0).clamp(-1.0, 1.0);
            fine.data[o + 7] = (gy * 8.0).clamp(-1.0, 1.0);
        }
    }
    let mid = avg_pool2(&fine);
    let coarse = avg_pool2(&mid);
    Ok(FeaturePyramid { frame_id: 0, scales: [fine, mid, coarse] })
}

/// Insert a host pyramid into a graph as constants.
pub fn pyramid_nodes(g: &mut Graph, pyr: &FeaturePyramid) -> PyramidNodes {
    let scales = [
        g.constant(pyr.scales[0].to_tensor()),
        g.constant(pyr.scales[1].to_tensor()),
        g.constant(pyr.scales[2].to_tensor()),
    ];
    PyramidNodes {
        scales,
        dims: [
            (pyr.scales[0].h, pyr.scales[0].w),
            (pyr.scales[1].h, pyr.scales[1].w),
            (pyr.scales[2].h, pyr.scales[2].w),
        ],
    }
}

/// Learnable encoder parameters: three 3x3 conv stages (stride 1, 2, 2).
#[derive(Debug, Clone, Copy)]
pub struct EncoderParams {
    pub stages: [(ParamId, ParamId); 3],
}

impl EncoderParams {
    pub fn init(params: &mut ParamSet, rng: &mut impl Rng) -> Self {
        let c = FEATURE_CHANNELS;
        fn mk(params: &mut ParamSet, name: &str, cin: usize, c: usize, rng: &mut impl Rng) -> (ParamId, ParamId) {
            let w = params.add_uniform(format!("feat.enc.{name}.w"), vec![9 * cin, c], 9 * cin, rng);
            let b = params.add_zeros(format!("feat.enc.{name}.b"), vec![c]);
            (w, b)
        }
        EncoderParams {
            stages: [
                mk(params, "s1", 3, c, rng),
                mk(params, "s2", c, c, rng),
                mk(params, "s4", c, c, rng),
            ],
        }
    }
}

/// Learnable extraction path over a 3-channel color map.
pub fn learned_pyramid(
    g: &mut Graph,
    params: &ParamSet,
    bind: &mut ParamBinding,
    enc: &EncoderParams,
    color: &FeatureMap,
) -> Result<PyramidNodes> {
    if color.h % 4 != 0 || color.w % 4 != 0 {
        return Err(crate::error::Error::Data(format!(
            "learned_pyramid: dimensions {}x{} not divisible by 4",
            color.w, color.h
        )));
    }
    let (h, w) = (color.h, color.w);
    let x = g.constant(color.to_tensor());
    let (w1, b1) = enc.stages[0];
    let (w2, b2) = enc.stages[1];
    let (w4, b4) = enc.stages[2];
    let (w1, b1) = (bind.node(g, params, w1), bind.node(g, params, b1));
    let (w2, b2) = (bind.node(g, params, w2), bind.node(g, params, b2));
    let (w4, b4) = (bind.node(g, params, w4), bind.node(g, params, b4));
    let s1 = g.conv2d(x, h, w, w1, b1, 1)?;
    let s1 = g.relu(s1);
    let s2 = g.conv2d(s1, h, w, w2, b2, 2)?;
    let s2 = g.relu(s2);
    let s4 = g.conv2d(s2, h / 2, w / 2, w4, b4, 2)?;
    let s4 = g.relu(s4);
    Ok(PyramidNodes {
        scales: [s1, s2, s4],
        dims: [(h, w), (h / 2, w / 2), (h / 4, w / 4)],
    })
}

/// Per-scale similarity transform parameters (two 3x3 conv layers each).
#[derive(Debug, Clone, Copy)]
pub struct SimilarityParams {
    pub scales: [[(ParamId, ParamId); 2]; 3],
}

impl SimilarityParams {
    pub fn init(params: &mut ParamSet, rng: &mut impl Rng) -> Self {
        let c = FEATURE_CHANNELS;
        fn mk(params: &mut ParamSet, name: String, c: usize, rng: &mut impl Rng) -> (ParamId, ParamId) {
            let w = params.add_uniform(format!("{name}.w"), vec![9 * c, c], 9 * c, rng);
            let b = params.add_zeros(format!("{name}.b"), vec![c]);
            (w, b)
        }
        let mut scales = [[(ParamId(0), ParamId(0)); 2]; 3];
        for (s, slot) in scales.iter_mut().enumerate() {
            slot[0] = mk(params, format!("prior.sim.s{s}.l0"), c, rng);
            slot[1] = mk(params, format!("prior.sim.s{s}.l1"), c, rng);
        }
        SimilarityParams { scales }
    }
}

/// Transform each scale, upsample the coarse scales to scale 1, and sum into
/// the single-scale similarity map.
pub fn similarity_merge(
    g: &mut Graph,
    params: &ParamSet,
    bind: &mut ParamBinding,
    sim: &SimilarityParams,
    pyr: &PyramidNodes,
) -> Result<(TensorId, usize, usize)> {
    let (h, w) = pyr.dims[0];
    let mut merged: Option<TensorId> = None;
    for s in 0..3 {
        let (sh, sw) = pyr.dims[s];
        let [(w0, b0), (w1, b1)] = sim.scales[s];
        let (w0, b0) = (bind.node(g, params, w0), bind.node(g, params, b0));
        let (w1, b1) = (bind.node(g, params, w1), bind.node(g, params, b1));
        let t = g.conv2d(pyr.scales[s], sh, sw, w0, b0, 1)?;
        let t = g.relu(t);
        let t = g.conv2d(t, sh, sw, w1, b1, 1)?;
        let up = match s {
            0 => t,
            1 => g.upsample_bilinear(t, sh, sw, 2),
            _ => g.upsample_bilinear(t, sh, sw, 4),
        };
        merged = Some(match merged {
            None => up,
            Some(m) => g.add(m, up),
        });
    }
    Ok((merged.unwrap(), h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraFrame, RigidTransform};
    use crate::synth::{generate_scene, render};
    use nalgebra::{Matrix3, Vector3};
    use rand::SeedableRng;

    fn test_render() -> RenderBundle {
        let scene = generate_scene(21, 1);
        let k = Matrix3::new(100.0, 0.0, 64.0, 0.0, 100.0, 48.0, 0.0, 0.0, 1.0);
        let pos = Vector3::new(scene.room[0] / 2.0, scene.room[1] / 2.0, 1.3);
        let target = Vector3::new(scene.room[0] / 2.0, scene.room[1], 0.8);
        let frame = CameraFrame::new(0, k, RigidTransform::look_at(pos, target), 128, 96).unwrap();
        render(&scene, &frame)
    }

    #[test]
    fn synthetic_pyramid_shapes_and_determinism() {
        let r = test_render();
        let a = synthetic_pyramid(&r).unwrap();
        let b = synthetic_pyramid(&r).unwrap();
        assert_eq!(a.scales[0].w, 128);
        assert_eq!(a.scales[1].w, 64);
        assert_eq!(a.scales[2].w, 32);
        for s in 0..3 {
            assert_eq!(a.scales[s].channels, FEATURE_CHANNELS);
            assert_eq!(a.scales[s].data, b.scales[s].data);
            assert!(a.scales[s].data.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn synthetic_pyramid_rejects_indivisible_dims() {
        let mut r = test_render();
        r.width = 126;
        r.depth.width = 126;
        assert!(synthetic_pyramid(&r).is_err());
    }

    #[test]
    fn two_walls_have_distinct_region_features() {
        // Camera looking into a room corner: one wall per half of the image.
        let scene = generate_scene(22, 0);
        let k = Matrix3::new(100.0, 0.0, 64.0, 0.0, 100.0, 48.0, 0.0, 0.0, 1.0);
        let pos = Vector3::new(scene.room[0] * 0.7, scene.room[1] * 0.7, 1.2);
        let corner = Vector3::new(0.0, 0.0, 1.2);
        let frame = CameraFrame::new(0, k, RigidTransform::look_at(pos, corner), 128, 96).unwrap();
        let bundle = render(&scene, &frame);
        let pyr = synthetic_pyramid(&bundle).unwrap();
        let fine = &pyr.scales[0];
        // Region statistics oracle: mean features over each wall's pixels.
        let mut means = [[0.0; FEATURE_CHANNELS]; 2];
        let mut counts = [0usize; 2];
        for y in 0..96 {
            for x in 0..128 {
                let i = y * 128 + x;
                let n = &bundle.normal[i * 3..i * 3 + 3];
                let region = if n[0].abs() > 0.9 {
                    0
                } else if n[1].abs() > 0.9 {
                    1
                } else {
                    continue;
                };
                for c in 0..FEATURE_CHANNELS {
                    means[region][c] += fine.pixel(x, y)[c];
                }
                counts[region] += 1;
            }
        }
        assert!(counts[0] > 200 && counts[1] > 200, "counts {counts:?}");
        let diff: f64 = (0..FEATURE_CHANNELS)
            .map(|c| (means[0][c] / counts[0] as f64 - means[1][c] / counts[1] as f64).abs())
            .sum();
        assert!(diff > 0.3, "wall regions not distinct: {diff}");
    }

    #[test]
    fn translation_consistency_whole_pixel_shift() {
        let r = test_render();
        let pyr = synthetic_pyramid(&r).unwrap();
        // Shift the render 4 pixels right and re-extract.
        let (h, w) = (r.height, r.width);
        let mut shifted = r.clone();
        for y in 0..h {
            for x in 0..w {
                let sx = if x >= 4 { x - 4 } else { 0 };
                let (dst, src) = (y * w + x, y * w + sx);
                shifted.depth.data[dst] = r.depth.data[src];
                for c in 0..3 {
                    shifted.color[dst * 3 + c] = r.color[src * 3 + c];
                    shifted.normal[dst * 3 + c] = r.normal[src * 3 + c];
                }
            }
        }
        let pyr_s = synthetic_pyramid(&shifted).unwrap();
        // Interior check at every scale: feature(x + 4/2^s) == feature(x).
        for s in 0..3 {
            let f = &pyr.scales[s];
            let g = &pyr_s.scales[s];
            let shift = 4 >> s;
            for y in 2..f.h - 2 {
                for x in 2..f.w - 2 - shift {
                    for c in 0..FEATURE_CHANNELS {
                        let a = f.pixel(x, y)[c];
                        let b = g.pixel(x + shift, y)[c];
                        assert!(
                            (a - b).abs() < 1e-12,
                            "scale {s} ({x},{y},{c}): {a} vs {b}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn learned_pyramid_zero_weights_all_bias() {
        let mut params = ParamSet::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let enc = EncoderParams::init(&mut params, &mut rng);
        // Zero all weights, set distinct biases.
        for id in params.ids().collect::<Vec<_>>() {
            let name = params.name(id).to_string();
            let t = params.tensor_mut(id);
            if name.ends_with(".w") {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            } else {
                t.data.iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * (i + 1) as f64);
            }
        }
        let color = FeatureMap { h: 8, w: 8, channels: 3, data: vec![0.5; 8 * 8 * 3] };
        let mut g = Graph::new();
        let mut bind = ParamBinding::new();
        let pyr = learned_pyramid(&mut g, &params, &mut bind, &enc, &color).unwrap();
        // Stage 1 output = relu(bias) per channel at every pixel.
        let v = g.value(pyr.scales[0]);
        for px in v.data.chunks(FEATURE_CHANNELS) {
            for (c, &val) in px.iter().enumerate() {
                assert!((val - 0.1 * (c + 1) as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn similarity_merge_reference_and_zero_coarse() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let mut params = ParamSet::new();
        let sim = SimilarityParams::init(&mut params, &mut rng);
        let r = test_render();
        let pyr_host = synthetic_pyramid(&r).unwrap();

        // Determinism: identical params + input give identical output.
        let run = |pyr: &FeaturePyramid| {
            let mut g = Graph::new();
            let mut bind = ParamBinding::new();
            let nodes = pyramid_nodes(&mut g, pyr);
            let (merged, h, w) = similarity_merge(&mut g, &params, &mut bind, &sim, &nodes).unwrap();
            (g.value(merged).data.clone(), h, w)
        };
        let (a, h, w) = run(&pyr_host);
        let (b, _, _) = run(&pyr_host);
        assert_eq!((h, w), (96, 128));
        assert_eq!(a, b);

        // Zero coarse scales: merged equals the scale-1 transform alone
        // (coarse transform biases are zero-initialized).
        let mut zeroed = pyr_host.clone();
        zeroed.scales[1].data.iter_mut().for_each(|v| *v = 0.0);
        zeroed.scales[2].data.iter_mut().for_each(|v| *v = 0.0);
        let (merged3, _, _) = run(&zeroed);
        let mut g4 = Graph::new();
        let mut bind4 = ParamBinding::new();
        let nodes4 = pyramid_nodes(&mut g4, &zeroed);
        let [(w0, b0), (w1, b1)] = sim.scales[0];
        let (w0, b0) = (bind4.node(&mut g4, &params, w0), bind4.node(&mut g4, &params, b0));
        let (w1, b1) = (bind4.node(&mut g4, &params, w1), bind4.node(&mut g4, &params, b1));
        let t = g4.conv2d(nodes4.scales[0], 96, 128, w0, b0, 1).unwrap();
        let t = g4.relu(t);
        let fine_only = g4.conv2d(t, 96, 128, w1, b1, 1).unwrap();
        for (x, y) in merged3.iter().zip(&g4.value(fine_only).data) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
