//! Camera model, projection, keyframe gating, fragment assembly, and
//! fragment-bounding-volume (FBV) construction.
//!
//! Pose convention: `pose` is the world-from-camera rigid transform. The
//! camera looks along +z with x right and y down, so pixel coordinates follow
//! `u = fx * x/z + cx`, `v = fy * y/z + cy`.

use std::io::{Read as _, Write as _};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// World-from-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera position + forward target, with world +z up. The camera y axis
    /// points down (image rows grow downward).
    pub fn look_at(position: Vector3<f64>, target: Vector3<f64>) -> Self {
        let fwd = (target - position).normalize();
        let up = Vector3::new(0.0, 0.0, 1.0);
        let mut right = fwd.cross(&up);
        if right.norm() < 1e-9 {
            // Looking straight up/down; pick an arbitrary horizontal right.
            right = Vector3::new(1.0, 0.0, 0.0);
        }
        let right = right.normalize();
        let down = fwd.cross(&right).normalize();
        let rotation = Matrix3::from_columns(&[right, down, fwd]);
        RigidTransform {
            rotation,
            translation: position,
        }
    }

    /// Map a camera-space point to world space.
    pub fn transform(&self, p_cam: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_cam + self.translation
    }

    /// Map a world-space point to camera space.
    pub fn inverse_transform(&self, p_world: Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p_world - self.translation)
    }

    /// Relative motion taking `other`'s camera frame into `self`'s.
    pub fn relative_to(&self, other: &RigidTransform) -> RigidTransform {
        let rotation = other.rotation.transpose() * self.rotation;
        let translation = other.rotation.transpose() * (self.translation - other.translation);
        RigidTransform {
            rotation,
            translation,
        }
    }

    /// Rotation angle in degrees.
    pub fn rotation_angle_deg(&self) -> f64 {
        let tr = self.rotation.trace();
        let c = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos().to_degrees()
    }

    /// RᵀR = I within `tol` and det(R) = +1.
    pub fn is_valid(&self, tol: f64) -> bool {
        let r = self.rotation;
        let e = (r.transpose() * r - Matrix3::identity()).abs().max();
        e < tol && (r.determinant() - 1.0).abs() < 1e-4 && self.translation.iter().all(|v| v.is_finite())
    }
}

/// One posed view: intrinsics, world-from-camera pose, image size.
#[derive(Debug, Clone)]
pub struct CameraFrame {
    pub frame_id: u64,
    pub intrinsics: Matrix3<f64>,
    pub pose: RigidTransform,
    pub width: u32,
    pub height: u32,
}

/// Result of projecting a world point into a frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: [f64; 2],
    /// Camera-space z.
    pub depth: f64,
    pub in_bounds: bool,
}

impl CameraFrame {
    pub fn new(
        frame_id: u64,
        intrinsics: Matrix3<f64>,
        pose: RigidTransform,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let k = &intrinsics;
        let upper_triangular = k[(1, 0)].abs() < 1e-12 && k[(2, 0)].abs() < 1e-12 && k[(2, 1)].abs() < 1e-12;
        if !upper_triangular || k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(Error::Data(format!(
                "invalid intrinsics for frame {frame_id}: must be upper-triangular with positive focal lengths"
            )));
        }
        if !pose.is_valid(1e-6) {
            return Err(Error::Data(format!(
                "invalid pose for frame {frame_id}: rotation not orthonormal"
            )));
        }
        Ok(CameraFrame {
            frame_id,
            intrinsics,
            pose,
            width,
            height,
        })
    }

    /// Project a world point. Out-of-bounds / behind-camera is reported via
    /// the flag, never as a failure.
    pub fn project(&self, point: Vector3<f64>) -> Projection {
        let p = self.pose.inverse_transform(point);
        let k = &self.intrinsics;
        if p.z <= 0.0 {
            return Projection {
                pixel: [f64::NAN, f64::NAN],
                depth: p.z,
                in_bounds: false,
            };
        }
        let u = k[(0, 0)] * p.x / p.z + k[(0, 2)];
        let v = k[(1, 1)] * p.y / p.z + k[(1, 2)];
        let in_bounds =
            u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64;
        Projection {
            pixel: [u, v],
            depth: p.z,
            in_bounds,
        }
    }

    /// Inverse of [`CameraFrame::project`]: pixel + camera-space depth to a
    /// world point.
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        let x = (u - k[(0, 2)]) / k[(0, 0)] * depth;
        let y = (v - k[(1, 2)]) / k[(1, 1)] * depth;
        self.pose.transform(Vector3::new(x, y, depth))
    }

    /// Unit-depth camera-space ray direction through pixel (u, v).
    pub fn pixel_ray_dir(&self, u: f64, v: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        let x = (u - k[(0, 2)]) / k[(0, 0)];
        let y = (v - k[(1, 2)]) / k[(1, 1)];
        Vector3::new(x, y, 1.0)
    }

    pub fn position(&self) -> Vector3<f64> {
        self.pose.translation
    }
}

/// How translation/rotation gates combine when admitting a keyframe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KeyframeGate {
    /// Both gates must trip (the literal rule this pipeline defaults to).
    #[default]
    And,
    /// Either gate trips.
    Or,
}

/// Fragment assembly parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FragmentConfig {
    /// Keyframes per fragment.
    pub n_keyframes: usize,
    /// Translation gate in meters.
    pub t_max: f64,
    /// Rotation gate in degrees.
    pub r_max: f64,
    /// Maximum visible depth in meters.
    pub d_max: f64,
    /// Near plane for frustum corners, meters.
    pub near_plane: f64,
    /// Coarse voxel size, meters.
    pub voxel_size_coarse: f64,
    /// Cap on coarse voxels per FBV axis.
    pub b_max: usize,
    pub gate: KeyframeGate,
}

impl Default for FragmentConfig {
    fn default() -> Self {
        FragmentConfig {
            n_keyframes: 9,
            t_max: 0.1,
            r_max: 15.0,
            d_max: 3.0,
            near_plane: 0.1,
            voxel_size_coarse: 0.16,
            b_max: 64,
            gate: KeyframeGate::And,
        }
    }
}

impl FragmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_keyframes < 2 {
            return Err(Error::Config("n_keyframes must be >= 2".into()));
        }
        for (name, v) in [
            ("t_max", self.t_max),
            ("r_max", self.r_max),
            ("d_max", self.d_max),
            ("near_plane", self.near_plane),
            ("voxel_size_coarse", self.voxel_size_coarse),
        ] {
            if v <= 0.0 {
                return Err(Error::Config(format!("{name} must be strictly positive")));
            }
        }
        Ok(())
    }
}

/// Cubic voxelized fragment bounding volume at the coarse level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FragmentVolume {
    /// World-space corner, snapped to the coarse world lattice.
    pub origin: Vector3<f64>,
    /// Voxels per axis at the coarse level.
    pub side_voxels: usize,
    pub voxel_size_coarse: f64,
}

impl FragmentVolume {
    /// World-space center of coarse voxel (i, j, k).
    pub fn voxel_center(&self, c: [i32; 3]) -> Vector3<f64> {
        let s = self.voxel_size_coarse;
        self.origin + Vector3::new(c[0] as f64 + 0.5, c[1] as f64 + 0.5, c[2] as f64 + 0.5) * s
    }

    pub fn contains_point(&self, p: Vector3<f64>) -> bool {
        let side = self.side_voxels as f64 * self.voxel_size_coarse;
        (0..3).all(|a| p[a] >= self.origin[a] && p[a] <= self.origin[a] + side)
    }
}

/// N keyframes plus their bounding volume.
#[derive(Debug, Clone)]
pub struct Fragment {
    pub fragment_id: u64,
    pub frames: Vec<CameraFrame>,
    pub fbv: FragmentVolume,
}

/// Keyframe admission rule: relative motion of `candidate` w.r.t. the last
/// keyframe, gated per config.
pub fn select_keyframe(
    candidate: &RigidTransform,
    last_keyframe: &RigidTransform,
    config: &FragmentConfig,
) -> bool {
    let rel = candidate.relative_to(last_keyframe);
    let trans = rel.translation.norm() > config.t_max;
    let rot = rel.rotation_angle_deg() > config.r_max;
    match config.gate {
        KeyframeGate::And => trans && rot,
        KeyframeGate::Or => trans || rot,
    }
}

/// Eight frustum corners of a frame at the near plane and `d_max`, in world
/// space.
fn frustum_corners(frame: &CameraFrame, near: f64, far: f64) -> [Vector3<f64>; 8] {
    let w = frame.width as f64;
    let h = frame.height as f64;
    let px = [[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]];
    let mut out = [Vector3::zeros(); 8];
    for (i, [u, v]) in px.iter().enumerate() {
        out[i] = frame.back_project(*u, *v, near);
        out[i + 4] = frame.back_project(*u, *v, far);
    }
    out
}

/// Build the cubic FBV enclosing every frame's truncated frustum.
///
/// The axis-aligned bound over all frustum corners is cubed on the longest
/// axis, the side is quantized to the coarse lattice, and the origin snaps to
/// world-lattice multiples so fragments share one global grid. If the cube
/// would exceed `b_max` voxels per axis it is clamped and centered on the
/// bound.
pub fn build_fbv(frames: &[CameraFrame], config: &FragmentConfig) -> Result<FragmentVolume> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("build_fbv: no frames"));
    }
    let s = config.voxel_size_coarse;
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for f in frames {
        for c in frustum_corners(f, config.near_plane, config.d_max) {
            lo = lo.inf(&c);
            hi = hi.sup(&c);
        }
    }
    let extent = hi - lo;
    let max_extent = extent.max();
    let mut b = (max_extent / s).ceil() as usize;

    // Snapping the origin down can push the far face short of `hi`; grow by
    // one voxel where needed.
    let mut origin = Vector3::new(
        (lo.x / s).floor() * s,
        (lo.y / s).floor() * s,
        (lo.z / s).floor() * s,
    );
    for a in 0..3 {
        let needed = ((hi[a] - origin[a]) / s).ceil() as usize;
        b = b.max(needed);
    }
    if b > config.b_max {
        b = config.b_max;
        let center = (lo + hi) * 0.5;
        let half = b as f64 * s * 0.5;
        origin = Vector3::new(
            ((center.x - half) / s).floor() * s,
            ((center.y - half) / s).floor() * s,
            ((center.z - half) / s).floor() * s,
        );
    }
    Ok(FragmentVolume {
        origin,
        side_voxels: b.max(1),
        voxel_size_coarse: s,
    })
}

/// Replay a trajectory, admit keyframes, and partition them into consecutive
/// non-overlapping fragments of `n_keyframes`. The first frame is always a
/// keyframe; a final partial window is dropped.
pub fn stream_fragments(trajectory: &[CameraFrame], config: &FragmentConfig) -> Result<Vec<Fragment>> {
    config.validate()?;
    let keys = select_keyframes(trajectory, config);
    let n = config.n_keyframes;
    let mut fragments = Vec::new();
    for (fid, window) in keys.chunks_exact(n).enumerate() {
        let frames: Vec<CameraFrame> = window.iter().map(|&i| trajectory[i].clone()).collect();
        let fbv = build_fbv(&frames, config)?;
        fragments.push(Fragment {
            fragment_id: fid as u64,
            frames,
            fbv,
        });
    }
    Ok(fragments)
}

/// Indices of admitted keyframes (first frame included).
pub fn select_keyframes(trajectory: &[CameraFrame], config: &FragmentConfig) -> Vec<usize> {
    let mut keys = Vec::new();
    let mut last: Option<&RigidTransform> = None;
    for (i, frame) in trajectory.iter().enumerate() {
        let admit = match last {
            None => true,
            Some(prev) => select_keyframe(&frame.pose, prev, config),
        };
        if admit {
            keys.push(i);
            last = Some(&trajectory[i].pose);
        }
    }
    keys
}

// ---------------------------------------------------------------------------
// Trajectory file I/O
// ---------------------------------------------------------------------------

/// One trajectory record: pose is the 4x4 world-from-camera matrix row-major,
/// intrinsics 3x3 row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub frame_id: u64,
    pub pose: Vec<f64>,
    pub intrinsics: Vec<f64>,
    pub width: u32,
    pub height: u32,
}

impl TrajectoryRecord {
    pub fn from_frame(f: &CameraFrame) -> Self {
        let r = &f.pose.rotation;
        let t = &f.pose.translation;
        let mut pose = Vec::with_capacity(16);
        for row in 0..3 {
            for col in 0..3 {
                pose.push(r[(row, col)]);
            }
            pose.push(t[row]);
        }
        pose.extend_from_slice(&[0.0, 0.0, 0.0, 1.0]);
        let k = &f.intrinsics;
        let intrinsics = (0..3)
            .flat_map(|row| (0..3).map(move |col| (row, col)))
            .map(|(row, col)| k[(row, col)])
            .collect();
        TrajectoryRecord {
            frame_id: f.frame_id,
            pose,
            intrinsics,
            width: f.width,
            height: f.height,
        }
    }

    pub fn to_frame(&self) -> Result<CameraFrame> {
        if self.pose.len() != 16 || self.intrinsics.len() != 9 {
            return Err(Error::Data(format!(
                "trajectory record {}: pose must have 16 entries, intrinsics 9",
                self.frame_id
            )));
        }
        let mut rotation = Matrix3::zeros();
        let mut translation = Vector3::zeros();
        for row in 0..3 {
            for col in 0..3 {
                rotation[(row, col)] = self.pose[row * 4 + col];
            }
            translation[row] = self.pose[row * 4 + 3];
        }
        let mut intrinsics = Matrix3::zeros();
        for row in 0..3 {
            for col in 0..3 {
                intrinsics[(row, col)] = self.intrinsics[row * 3 + col];
            }
        }
        CameraFrame::new(
            self.frame_id,
            intrinsics,
            RigidTransform {
                rotation,
                translation,
            },
            self.width,
            self.height,
        )
    }
}

pub fn write_trajectory(path: &Path, frames: &[CameraFrame]) -> Result<()> {
    let records: Vec<TrajectoryRecord> = frames.iter().map(TrajectoryRecord::from_frame).collect();
    let text = serde_json::to_string_pretty(&records)
        .map_err(|e| Error::Data(format!("trajectory serialization: {e}")))?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<CameraFrame>> {
    let mut text = String::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_string(&mut text)
        .map_err(|e| Error::io(path, e))?;
    let records: Vec<TrajectoryRecord> = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
        offset: e.column() as u64,
    })?;
    records.iter().map(|r| r.to_frame()).collect()
}
