//! Seeded camera trajectories: orbits and close-target scan arcs. Both keep
//! translation and rotation growing together so the conjunctive keyframe
//! gate fires regularly.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{CameraFrame, RigidTransform};

use super::SceneSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryStyle {
    /// Wide orbit around the room center.
    Orbit,
    /// Tighter arc around a point near one side of the room.
    Scan,
}

/// Generate a deterministic orbiting trajectory inside the scene. `steps`
/// samples are spaced ~1.5 degrees apart, so a keyframe lands roughly every
/// 11 samples under the default 15-degree/0.1 m conjunctive gate.
pub fn orbit_trajectory(
    scene: &SceneSpec,
    seed: u64,
    style: TrajectoryStyle,
    steps: usize,
    width: u32,
    height: u32,
) -> Vec<CameraFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ee3_3411_0bad_cafe);
    let room = scene.room_v();
    let cx = room.x / 2.0;
    let cy = room.y / 2.0;
    let focal = 0.78 * width as f64; // ~65 degree horizontal FoV
    let k = Matrix3::new(
        focal,
        0.0,
        width as f64 / 2.0,
        0.0,
        focal,
        height as f64 / 2.0,
        0.0,
        0.0,
        1.0,
    );
    let (target, radius) = match style {
        TrajectoryStyle::Orbit => {
            let target = Vector3::new(
                cx + rng.gen_range(-0.2..0.2),
                cy + rng.gen_range(-0.2..0.2),
                rng.gen_range(0.5..0.9),
            );
            let max_r = (room.x.min(room.y) / 2.0 - 0.35).max(0.45);
            (target, rng.gen_range((0.6 * max_r).max(0.42)..max_r))
        }
        TrajectoryStyle::Scan => {
            let target = Vector3::new(
                cx + rng.gen_range(-0.3..0.3),
                cy + rng.gen_range(-0.3..0.3),
                rng.gen_range(0.4..0.8),
            );
            (target, rng.gen_range(0.42..0.6))
        }
    };
    let phase0 = rng.gen_range(0.0..std::f64::consts::TAU);
    let direction = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let step_rad = 1.5f64.to_radians();
    let cam_h = rng.gen_range(1.15..1.5f64).min(room.z - 0.3);
    let bob = rng.gen_range(0.02..0.08);
    let radial_wobble = rng.gen_range(0.0..0.05);
    (0..steps)
        .map(|i| {
            let a = phase0 + direction * i as f64 * step_rad;
            let r = radius + radial_wobble * (3.0 * a).sin();
            let pos = Vector3::new(
                (target.x + r * a.cos()).clamp(0.25, room.x - 0.25),
                (target.y + r * a.sin()).clamp(0.25, room.y - 0.25),
                (cam_h + bob * (2.0 * a).sin()).clamp(0.3, room.z - 0.2),
            );
            let pose = RigidTransform::look_at(pos, target);
            CameraFrame::new(i as u64, k, pose, width, height).expect("orbit pose is valid")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{select_keyframes, FragmentConfig};

    #[test]
    fn orbit_produces_enough_keyframes_for_two_fragments() {
        for seed in 0..10 {
            let scene = super::super::generate_scene(seed, 2);
            let traj = orbit_trajectory(&scene, seed, TrajectoryStyle::Orbit, 260, 128, 96);
            let cfg = FragmentConfig::default();
            let keys = select_keyframes(&traj, &cfg);
            assert!(keys.len() >= 18, "seed {seed}: {} keyframes", keys.len());
            // Cameras stay inside the room.
            for f in &traj {
                let p = f.position();
                assert!(p.x > 0.0 && p.x < scene.room[0]);
                assert!(p.y > 0.0 && p.y < scene.room[1]);
                assert!(p.z > 0.0 && p.z < scene.room[2]);
            }
        }
    }

    #[test]
    fn scan_style_also_triggers_gate() {
        let scene = super::super::generate_scene(3, 1);
        let traj = orbit_trajectory(&scene, 3, TrajectoryStyle::Scan, 150, 128, 96);
        let keys = select_keyframes(&traj, &FragmentConfig::default());
        assert!(keys.len() >= 9, "{} keyframes", keys.len());
    }
}
