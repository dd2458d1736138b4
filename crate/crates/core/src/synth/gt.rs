//! Ground-truth bundles: projective TSDF via the fusion oracle, analytic
//! per-voxel panoptic labels, instance lists, and visibility-filtered
//! surface samples for geometry evaluation.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::Fragment;
use crate::volume::{tsdf_fusion_oracle, DepthImage, Level, SparseVoxelVolume, INSTANCE_NONE, SEMANTIC_VOID};
use crate::geometry::CameraFrame;

use super::render::{cast_ray, primitive_sdf};
use super::{SceneSpec, Shape, CLASS_FLOOR, CLASS_WALL};

/// One ground-truth instance: a voxel set on the global fine lattice.
#[derive(Debug, Clone)]
pub struct GtInstance {
    pub instance_id: u32,
    pub semantic: u16,
    pub voxels: Vec<[i32; 3]>,
}

#[derive(Debug, Clone)]
pub struct GroundTruthBundle {
    /// Oracle TSDF over the fragment's fine lattice, with analytic labels on
    /// voxels within truncation of a surface.
    pub tsdf_fine: SparseVoxelVolume,
    /// Thing instances only, on the global fine lattice.
    pub instances: Vec<GtInstance>,
}

/// Distance from `p` to one room face rectangle. Face order matches
/// `SceneSpec::face_colors`: floor, ceiling, x=0, x=L, y=0, y=L.
fn face_distance(room: &Vector3<f64>, face: usize, p: Vector3<f64>) -> f64 {
    let (axis, plane) = match face {
        0 => (2, 0.0),
        1 => (2, room.z),
        2 => (0, 0.0),
        3 => (0, room.x),
        4 => (1, 0.0),
        _ => (1, room.y),
    };
    let mut q = p;
    q[axis] = plane;
    for a in 0..3 {
        if a != axis {
            q[a] = q[a].clamp(0.0, room[a]);
        }
    }
    (p - q).norm()
}

/// Nearest surface label: (semantic, instance, distance). Ties resolve to
/// the earliest surface in fixed order (faces, then primitives by index).
pub fn nearest_surface(scene: &SceneSpec, p: Vector3<f64>) -> (u16, u32, f64) {
    let room = scene.room_v();
    let mut best = (CLASS_FLOOR, INSTANCE_NONE, face_distance(&room, 0, p));
    for face in 1..6 {
        let d = face_distance(&room, face, p);
        if d < best.2 {
            best = (CLASS_WALL, INSTANCE_NONE, d);
        }
    }
    for prim in &scene.primitives {
        let d = primitive_sdf(prim, p).abs();
        if d < best.2 {
            best = (prim.semantic(), prim.instance_id, d);
        }
    }
    best
}

/// Build the fragment ground truth from rendered depth views.
pub fn ground_truth_bundle(
    scene: &SceneSpec,
    fragment: &Fragment,
    views: &[(CameraFrame, DepthImage)],
    truncation: f64,
) -> GroundTruthBundle {
    let fbv = &fragment.fbv;
    let fine_size = fbv.voxel_size_coarse / 4.0;
    let dims = fbv.side_voxels * 4;
    let mut vol = tsdf_fusion_oracle(
        views,
        Level::Fine,
        fbv.origin,
        [dims, dims, dims],
        fine_size,
        truncation,
    );

    let n = vol.len();
    let mut semantic = vec![SEMANTIC_VOID; n];
    let mut instance = vec![INSTANCE_NONE; n];
    let centers: Vec<Vector3<f64>> = (0..n).map(|i| vol.voxel_center(i)).collect();
    let labels = crate::exec::map_slice(&centers, |&p| {
        let (sem, inst, dist) = nearest_surface(scene, p);
        if dist < truncation {
            (sem, inst)
        } else {
            (SEMANTIC_VOID, INSTANCE_NONE)
        }
    });
    for (i, (sem, inst)) in labels.into_iter().enumerate() {
        semantic[i] = sem;
        instance[i] = inst;
    }
    vol.semantic = semantic;
    vol.instance = instance;

    // Global fine-lattice offset (FBV origins are coarse-lattice aligned, so
    // this is integral).
    let off: [i32; 3] = std::array::from_fn(|a| (fbv.origin[a] / fine_size).round() as i32);
    let mut instances: Vec<GtInstance> = scene
        .primitives
        .iter()
        .map(|p| GtInstance {
            instance_id: p.instance_id,
            semantic: p.semantic(),
            voxels: Vec::new(),
        })
        .collect();
    for (i, &c) in vol.coords().iter().enumerate() {
        let inst = vol.instance[i];
        if inst == INSTANCE_NONE {
            continue;
        }
        if let Some(rec) = instances.iter_mut().find(|r| r.instance_id == inst) {
            rec.voxels.push([c[0] + off[0], c[1] + off[1], c[2] + off[2]]);
        }
    }
    instances.retain(|r| !r.voxels.is_empty());
    GroundTruthBundle { tsdf_fine: vol, instances }
}

/// Area-weighted random surface points, filtered to those actually observed
/// (unoccluded, in bounds, within `d_max`) by at least one frame.
pub fn sample_surface_points(
    scene: &SceneSpec,
    frames: &[CameraFrame],
    n: usize,
    d_max: f64,
    seed: u64,
) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed_5eed);
    let room = scene.room_v();
    // Surface inventory with areas: 6 room faces then primitives.
    let mut areas = vec![
        room.x * room.y,
        room.x * room.y,
        room.y * room.z,
        room.y * room.z,
        room.x * room.z,
        room.x * room.z,
    ];
    for p in &scene.primitives {
        areas.push(match p.shape {
            Shape::Box { half } => {
                8.0 * (half[0] * half[1] + half[0] * half[2] + half[1] * half[2])
            }
            Shape::Sphere { radius } => 4.0 * std::f64::consts::PI * radius * radius,
            Shape::Cylinder { radius, half_height } => {
                let h = 2.0 * half_height;
                std::f64::consts::TAU * radius * h + 2.0 * std::f64::consts::PI * radius * radius
            }
            Shape::Torus { major, minor } => {
                4.0 * std::f64::consts::PI * std::f64::consts::PI * major * minor
            }
        });
    }
    let total: f64 = areas.iter().sum();
    let mut out = Vec::with_capacity(n);
    let mut guard = 0usize;
    while out.len() < n && guard < n * 400 {
        guard += 1;
        let mut pick = rng.gen_range(0.0..total);
        let mut surf = 0;
        while surf + 1 < areas.len() && pick >= areas[surf] {
            pick -= areas[surf];
            surf += 1;
        }
        let p = sample_on_surface(scene, surf, &mut rng);
        if visible_from_any(scene, frames, p, d_max) {
            out.push(p);
        }
    }
    out
}

fn sample_on_surface(scene: &SceneSpec, surf: usize, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let room = scene.room_v();
    if surf < 6 {
        let (u, v) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        return match surf {
            0 => Vector3::new(u * room.x, v * room.y, 0.0),
            1 => Vector3::new(u * room.x, v * room.y, room.z),
            2 => Vector3::new(0.0, u * room.y, v * room.z),
            3 => Vector3::new(room.x, u * room.y, v * room.z),
            4 => Vector3::new(u * room.x, 0.0, v * room.z),
            _ => Vector3::new(u * room.x, room.y, v * room.z),
        };
    }
    let prim = &scene.primitives[surf - 6];
    let c = prim.center_v();
    match prim.shape {
        Shape::Box { half } => {
            let ax = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
            let total = ax.iter().sum::<f64>();
            let mut pick = rng.gen_range(0.0..total);
            let mut axis = 0;
            while axis < 2 && pick >= ax[axis] {
                pick -= ax[axis];
                axis += 1;
            }
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let mut p = Vector3::new(
                rng.gen_range(-half[0]..half[0]),
                rng.gen_range(-half[1]..half[1]),
                rng.gen_range(-half[2]..half[2]),
            );
            p[axis] = sign * half[axis];
            c + p
        }
        Shape::Sphere { radius } => {
            let v = Vector3::new(
                rng.sample::<f64, _>(rand::distributions::Standard) - 0.5,
                rng.sample::<f64, _>(rand::distributions::Standard) - 0.5,
                rng.sample::<f64, _>(rand::distributions::Standard) - 0.5,
            );
            // Rejection to a unit direction.
            let v = if v.norm() < 1e-9 { Vector3::z() } else { v.normalize() };
            c + v * radius
        }
        Shape::Cylinder { radius, half_height } => {
            let h = 2.0 * half_height;
            let side = std::f64::consts::TAU * radius * h;
            let caps = 2.0 * std::f64::consts::PI * radius * radius;
            if rng.gen_range(0.0..side + caps) < side {
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                let z = rng.gen_range(-half_height..half_height);
                c + Vector3::new(radius * a.cos(), radius * a.sin(), z)
            } else {
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = radius * rng.gen_range(0.0f64..1.0).sqrt();
                let z = if rng.gen_bool(0.5) { half_height } else { -half_height };
                c + Vector3::new(r * a.cos(), r * a.sin(), z)
            }
        }
        Shape::Torus { major, minor } => {
            let u = rng.gen_range(0.0..std::f64::consts::TAU);
            // Minor angle with area weight (R + r cos v).
            let v = loop {
                let v = rng.gen_range(0.0..std::f64::consts::TAU);
                let w = (major + minor * v.cos()) / (major + minor);
                if rng.gen_range(0.0..1.0) < w {
                    break v;
                }
            };
            c + Vector3::new(
                (major + minor * v.cos()) * u.cos(),
                (major + minor * v.cos()) * u.sin(),
                minor * v.sin(),
            )
        }
    }
}

fn visible_from_any(scene: &SceneSpec, frames: &[CameraFrame], p: Vector3<f64>, d_max: f64) -> bool {
    for f in frames {
        let proj = f.project(p);
        if !proj.in_bounds {
            continue;
        }
        let cam = f.position();
        let dist = (p - cam).norm();
        if dist > d_max || dist < 1e-6 {
            continue;
        }
        let dir = (p - cam) / dist;
        if let Some(hit) = cast_ray(scene, cam, dir) {
            if (hit.t - dist).abs() < 1e-4 {
                return true;
            }
        }
    }
    false
}
