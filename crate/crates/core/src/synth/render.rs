//! Analytic ray casting against room planes and primitives.
//!
//! Depth images store ray length (Euclidean distance from the camera
//! center); normals are world-space and face the free-space side. Colors are
//! base colors modulated by a world-anchored procedural pattern so that
//! multi-view photometric consistency carries geometric signal.

use nalgebra::Vector3;

use crate::exec;
use crate::geometry::CameraFrame;
use crate::volume::DepthImage;

use super::{Primitive, SceneSpec, Shape, CLASS_FLOOR, CLASS_WALL};

const T_MIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy)]
pub struct Hit {
    pub t: f64,
    pub normal: Vector3<f64>,
    pub semantic: u16,
    pub instance: u32,
    /// Index into face colors (0..6) or primitive list (6 + i).
    surface: usize,
}

/// Nearest surface along a ray that starts inside the room.
pub fn cast_ray(scene: &SceneSpec, origin: Vector3<f64>, dir: Vector3<f64>) -> Option<Hit> {
    let mut best = room_exit(scene, origin, dir)?;
    for (i, prim) in scene.primitives.iter().enumerate() {
        if let Some((t, normal)) = intersect_primitive(prim, origin, dir) {
            if t > T_MIN && t < best.t {
                best = Hit {
                    t,
                    normal,
                    semantic: prim.semantic(),
                    instance: prim.instance_id,
                    surface: 6 + i,
                };
            }
        }
    }
    Some(best)
}

/// Shaded color at a hit point.
pub fn shade(scene: &SceneSpec, hit: &Hit, point: Vector3<f64>) -> [f64; 3] {
    let (base, tex) = if hit.surface < 6 {
        (scene.face_colors[hit.surface], scene.face_textures[hit.surface])
    } else {
        let p = &scene.primitives[hit.surface - 6];
        (p.color, p.texture)
    };
    let s = scene.texture_strength;
    let pat = 0.5
        * (1.0
            + (tex[0] * point.x + tex[3]).sin()
                * (tex[1] * point.y + tex[4]).sin()
                * (tex[2] * point.z + tex[5]).sin());
    let m = 1.0 - s + s * pat;
    [base[0] * m, base[1] * m, base[2] * m]
}

fn room_exit(scene: &SceneSpec, o: Vector3<f64>, d: Vector3<f64>) -> Option<Hit> {
    // The camera is inside the room box; find the first face crossed.
    let l = scene.room_v();
    let mut best_t = f64::INFINITY;
    let mut best_face = usize::MAX;
    for axis in 0..3 {
        if d[axis] > 1e-12 {
            let t = (l[axis] - o[axis]) / d[axis];
            if t > T_MIN && t < best_t {
                best_t = t;
                best_face = axis * 2 + 1; // +axis face
            }
        } else if d[axis] < -1e-12 {
            let t = -o[axis] / d[axis];
            if t > T_MIN && t < best_t {
                best_t = t;
                best_face = axis * 2; // -axis face
            }
        }
    }
    if best_face == usize::MAX {
        return None;
    }
    // Inward normal (toward the room interior).
    let mut normal = Vector3::zeros();
    normal[best_face / 2] = if best_face % 2 == 1 { -1.0 } else { 1.0 };
    // Face order for colors: [floor(z=0), ceiling(z=L), x=0, x=L, y=0, y=L].
    let (surface, semantic) = match best_face {
        4 => (0, CLASS_FLOOR),
        5 => (1, CLASS_WALL),
        0 => (2, CLASS_WALL),
        1 => (3, CLASS_WALL),
        2 => (4, CLASS_WALL),
        _ => (5, CLASS_WALL),
    };
    Some(Hit { t: best_t, normal, semantic, instance: 0, surface })
}

fn intersect_primitive(prim: &Primitive, o: Vector3<f64>, d: Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    let c = prim.center_v();
    match prim.shape {
        Shape::Box { half } => intersect_box(o - c, d, Vector3::new(half[0], half[1], half[2])),
        Shape::Sphere { radius } => intersect_sphere(o - c, d, radius),
        Shape::Cylinder { radius, half_height } => intersect_cylinder(o - c, d, radius, half_height),
        Shape::Torus { major, minor } => intersect_torus(o - c, d, major, minor),
    }
}

fn intersect_box(o: Vector3<f64>, d: Vector3<f64>, h: Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut near_axis = 0;
    for axis in 0..3 {
        if d[axis].abs() < 1e-12 {
            if o[axis].abs() > h[axis] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[axis];
        let mut t0 = (-h[axis] - o[axis]) * inv;
        let mut t1 = (h[axis] - o[axis]) * inv;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_near {
            t_near = t0;
            near_axis = axis;
        }
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    if t_near <= T_MIN {
        return None; // origin inside or box behind
    }
    let mut normal = Vector3::zeros();
    normal[near_axis] = if d[near_axis] > 0.0 { -1.0 } else { 1.0 };
    Some((t_near, normal))
}

fn intersect_sphere(o: Vector3<f64>, d: Vector3<f64>, r: f64) -> Option<(f64, Vector3<f64>)> {
    let b = o.dot(&d);
    let c = o.dot(&o) - r * r;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    if t <= T_MIN {
        return None;
    }
    let p = o + d * t;
    Some((t, p / r))
}

fn intersect_cylinder(o: Vector3<f64>, d: Vector3<f64>, r: f64, hh: f64) -> Option<(f64, Vector3<f64>)> {
    let mut best: Option<(f64, Vector3<f64>)> = None;
    let mut consider = |t: f64, n: Vector3<f64>| {
        if t > T_MIN && best.map_or(true, |(bt, _)| t < bt) {
            best = Some((t, n));
        }
    };
    // Side surface.
    let a = d.x * d.x + d.y * d.y;
    if a > 1e-14 {
        let b = o.x * d.x + o.y * d.y;
        let c = o.x * o.x + o.y * o.y - r * r;
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let t = (-b - disc.sqrt()) / a;
            let z = o.z + t * d.z;
            if z.abs() <= hh {
                let p = o + d * t;
                consider(t, Vector3::new(p.x / r, p.y / r, 0.0));
            }
        }
    }
    // Caps.
    if d.z.abs() > 1e-12 {
        for (zc, nz) in [(hh, 1.0), (-hh, -1.0)] {
            let t = (zc - o.z) / d.z;
            let p = o + d * t;
            if p.x * p.x + p.y * p.y <= r * r {
                consider(t, Vector3::new(0.0, 0.0, nz));
            }
        }
    }
    best
}

fn intersect_torus(o: Vector3<f64>, d: Vector3<f64>, big_r: f64, r: f64) -> Option<(f64, Vector3<f64>)> {
    // Bounding-sphere reject.
    let bound = big_r + r;
    let b = o.dot(&d);
    if o.dot(&o) - b * b > bound * bound {
        return None;
    }
    // Quartic in ray parameter t:
    // (|p|^2 + R^2 - r^2)^2 = 4 R^2 (p_x^2 + p_y^2),  p = o + t d, |d| = 1.
    let k = o.dot(&o) + big_r * big_r - r * r;
    let od = o.dot(&d);
    let dxy = d.x * d.x + d.y * d.y;
    let oxy = o.x * o.x + o.y * o.y;
    let odxy = o.x * d.x + o.y * d.y;
    let a3 = 4.0 * od;
    let a2 = 4.0 * od * od + 2.0 * k - 4.0 * big_r * big_r * dxy;
    let a1 = 4.0 * od * k - 8.0 * big_r * big_r * odxy;
    let a0 = k * k - 4.0 * big_r * big_r * oxy;
    let mut roots = [0.0; 4];
    let n = solve_quartic(a3, a2, a1, a0, &mut roots);
    let eval = |t: f64| {
        let t2 = t * t;
        t2 * t2 + a3 * t2 * t + a2 * t2 + a1 * t + a0
    };
    let deriv = |t: f64| 4.0 * t * t * t + 3.0 * a3 * t * t + 2.0 * a2 * t + a1;
    let mut best: Option<f64> = None;
    for &t0 in &roots[..n] {
        // Newton polish on the original quartic.
        let mut t = t0;
        for _ in 0..8 {
            let f = eval(t);
            let df = deriv(t);
            if df.abs() < 1e-14 {
                break;
            }
            let step = f / df;
            t -= step;
            if step.abs() < 1e-14 {
                break;
            }
        }
        if t > T_MIN && eval(t).abs() < 1e-7 && best.map_or(true, |b| t < b) {
            best = Some(t);
        }
    }
    let t = best?;
    let p = o + d * t;
    let lxy = (p.x * p.x + p.y * p.y).sqrt();
    if lxy < 1e-12 {
        return None;
    }
    let ring = Vector3::new(p.x / lxy * big_r, p.y / lxy * big_r, 0.0);
    Some((t, (p - ring).normalize()))
}

/// Real roots of t^4 + a t^3 + b t^2 + c t + d (Ferrari). Returns the count;
/// roots are unordered and unpolished.
fn solve_quartic(a: f64, b: f64, c: f64, d: f64, out: &mut [f64; 4]) -> usize {
    // Depress: t = u - a/4.
    let a2 = a * a;
    let p = b - 3.0 * a2 / 8.0;
    let q = c - a * b / 2.0 + a2 * a / 8.0;
    let r = d - a * c / 4.0 + a2 * b / 16.0 - 3.0 * a2 * a2 / 256.0;
    let shift = -a / 4.0;
    let mut n = 0;
    if q.abs() < 1e-12 {
        // Biquadratic: u^4 + p u^2 + r = 0.
        let disc = p * p - 4.0 * r;
        if disc < 0.0 {
            return 0;
        }
        let s = disc.sqrt();
        for y in [(-p + s) / 2.0, (-p - s) / 2.0] {
            if y >= 0.0 {
                let u = y.sqrt();
                out[n] = u + shift;
                n += 1;
                out[n] = -u + shift;
                n += 1;
            }
        }
        return n;
    }
    // Resolvent cubic: y^3 + 2p y^2 + (p^2 - 4r) y - q^2 = 0 has a positive
    // root because the product of roots is q^2 > 0.
    let y = largest_cubic_root(2.0 * p, p * p - 4.0 * r, -q * q);
    if y <= 0.0 {
        return 0;
    }
    let sy = y.sqrt();
    // Factor into two quadratics: u^2 +- sy u + (p + y)/2 -+ q/(2 sy).
    let half = (p + y) / 2.0;
    let qs = q / (2.0 * sy);
    for (lin, konst) in [(sy, half - qs), (-sy, half + qs)] {
        let disc = lin * lin - 4.0 * konst;
        if disc >= 0.0 {
            let sd = disc.sqrt();
            out[n] = (-lin + sd) / 2.0 + shift;
            n += 1;
            out[n] = (-lin - sd) / 2.0 + shift;
            n += 1;
        }
    }
    n
}

/// Largest real root of y^3 + a y^2 + b y + c.
fn largest_cubic_root(a: f64, b: f64, c: f64) -> f64 {
    // Depress: y = z - a/3.
    let p = b - a * a / 3.0;
    let q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
    let shift = -a / 3.0;
    let disc = q * q / 4.0 + p * p * p / 27.0;
    if disc > 0.0 {
        let s = disc.sqrt();
        let u = cbrt(-q / 2.0 + s);
        let v = cbrt(-q / 2.0 - s);
        u + v + shift
    } else {
        // Three real roots; take the largest via the trigonometric form.
        let m = 2.0 * (-p / 3.0).max(0.0).sqrt();
        if m < 1e-300 {
            return shift;
        }
        let arg = (3.0 * q / (p * m)).clamp(-1.0, 1.0);
        let theta = arg.acos() / 3.0;
        m * theta.cos() + shift
    }
}

fn cbrt(x: f64) -> f64 {
    x.signum() * x.abs().powf(1.0 / 3.0)
}

/// Per-view rendering output. Channel layout is row-major with x fastest.
#[derive(Debug, Clone)]
pub struct RenderBundle {
    pub width: usize,
    pub height: usize,
    pub depth: DepthImage,
    /// RGB, 3 per pixel.
    pub color: Vec<f64>,
    /// World-space unit normals, 3 per pixel.
    pub normal: Vec<f64>,
    pub semantic: Vec<u16>,
    pub instance: Vec<u32>,
}

/// Ray-cast one frame. Rays pass through integer pixel coordinates,
/// matching the camera model's continuous pixel convention.
pub fn render(scene: &SceneSpec, frame: &CameraFrame) -> RenderBundle {
    let w = frame.width as usize;
    let h = frame.height as usize;
    let origin = frame.position();
    let rows = exec::map_range(h, |y| {
        let mut depth = vec![f64::INFINITY; w];
        let mut color = vec![0.0; w * 3];
        let mut normal = vec![0.0; w * 3];
        let mut semantic = vec![crate::volume::SEMANTIC_VOID; w];
        let mut instance = vec![0u32; w];
        for x in 0..w {
            let dir_cam = frame.pixel_ray_dir(x as f64, y as f64);
            let dir = (frame.pose.rotation * dir_cam).normalize();
            if let Some(hit) = cast_ray(scene, origin, dir) {
                let point = origin + dir * hit.t;
                depth[x] = hit.t;
                let c = shade(scene, &hit, point);
                color[x * 3..x * 3 + 3].copy_from_slice(&c);
                normal[x * 3] = hit.normal.x;
                normal[x * 3 + 1] = hit.normal.y;
                normal[x * 3 + 2] = hit.normal.z;
                semantic[x] = hit.semantic;
                instance[x] = hit.instance;
            }
        }
        (depth, color, normal, semantic, instance)
    });
    let mut out = RenderBundle {
        width: w,
        height: h,
        depth: DepthImage { width: w, height: h, data: Vec::with_capacity(w * h) },
        color: Vec::with_capacity(w * h * 3),
        normal: Vec::with_capacity(w * h * 3),
        semantic: Vec::with_capacity(w * h),
        instance: Vec::with_capacity(w * h),
    };
    for (depth, color, normal, semantic, instance) in rows {
        out.depth.data.extend(depth);
        out.color.extend(color);
        out.normal.extend(normal);
        out.semantic.extend(semantic);
        out.instance.extend(instance);
    }
    out
}

/// Signed distance to a primitive's surface (negative inside).
pub fn primitive_sdf(prim: &Primitive, p: Vector3<f64>) -> f64 {
    let q = p - prim.center_v();
    match prim.shape {
        Shape::Box { half } => {
            let d = Vector3::new(q.x.abs() - half[0], q.y.abs() - half[1], q.z.abs() - half[2]);
            let outside = Vector3::new(d.x.max(0.0), d.y.max(0.0), d.z.max(0.0)).norm();
            let inside = d.x.max(d.y).max(d.z).min(0.0);
            outside + inside
        }
        Shape::Sphere { radius } => q.norm() - radius,
        Shape::Cylinder { radius, half_height } => {
            let dx = (q.x * q.x + q.y * q.y).sqrt() - radius;
            let dz = q.z.abs() - half_height;
            let outside = (dx.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt();
            let inside = dx.max(dz).min(0.0);
            outside + inside
        }
        Shape::Torus { major, minor } => {
            let lxy = (q.x * q.x + q.y * q.y).sqrt();
            ((lxy - major).powi(2) + q.z * q.z).sqrt() - minor
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidTransform;
    use nalgebra::Matrix3;

    fn frame_at(pos: Vector3<f64>, target: Vector3<f64>) -> CameraFrame {
        let k = Matrix3::new(100.0, 0.0, 64.0, 0.0, 100.0, 48.0, 0.0, 0.0, 1.0);
        CameraFrame::new(0, k, RigidTransform::look_at(pos, target), 128, 96).unwrap()
    }

    fn empty_room() -> SceneSpec {
        let mut s = super::super::generate_scene(0, 0);
        s.room = [4.0, 4.0, 3.0];
        s
    }

    #[test]
    fn principal_ray_wall_depth() {
        let scene = empty_room();
        // Camera 2 m from the y = 4 wall, looking straight at it.
        let frame = frame_at(Vector3::new(2.0, 2.0, 1.5), Vector3::new(2.0, 4.0, 1.5));
        let b = render(&scene, &frame);
        let d = b.depth.at(64, 48);
        assert!((d - 2.0).abs() < 1e-9, "depth {d}");
        assert_eq!(b.semantic[48 * 128 + 64], CLASS_WALL);
    }

    #[test]
    fn oblique_ray_depth_is_ray_length() {
        let scene = empty_room();
        let origin = Vector3::new(2.0, 2.0, 1.5);
        // Ray at 45 degrees toward the y = 4 wall (perpendicular distance 2):
        // expected hit distance 2 sqrt(2).
        let dir = Vector3::new(1.0, 1.0, 0.0).normalize();
        let hit = cast_ray(&scene, origin, dir).unwrap();
        assert!((hit.t - 2.0 * 2f64.sqrt()).abs() < 1e-9, "t {}", hit.t);
    }

    #[test]
    fn sphere_dead_center_depth() {
        let mut scene = empty_room();
        scene.primitives.push(Primitive {
            instance_id: 1,
            shape: Shape::Sphere { radius: 0.3 },
            center: [2.0, 3.0, 1.5],
            color: [0.5, 0.2, 0.2],
            texture: [10.0, 11.0, 12.0, 0.1, 0.2, 0.3],
        });
        let frame = frame_at(Vector3::new(2.0, 1.0, 1.5), Vector3::new(2.0, 3.0, 1.5));
        let b = render(&scene, &frame);
        let d = b.depth.at(64, 48);
        // Distance 2.0 minus radius 0.3.
        assert!((d - 1.7).abs() < 1e-9, "depth {d}");
        assert_eq!(b.instance[48 * 128 + 64], 1);
    }

    /// Sphere-tracing oracle on the exact SDF; independent of the quartic /
    /// quadratic intersection route.
    fn sphere_trace(prim: &Primitive, o: Vector3<f64>, d: Vector3<f64>) -> Option<f64> {
        let mut t = 1e-6;
        for _ in 0..2000 {
            let s = primitive_sdf(prim, o + d * t);
            if s < 1e-10 {
                return Some(t);
            }
            t += s;
            if t > 50.0 {
                return None;
            }
        }
        None
    }

    #[test]
    fn renderer_matches_sphere_trace_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let shapes = [
            Shape::Box { half: [0.2, 0.25, 0.15] },
            Shape::Sphere { radius: 0.22 },
            Shape::Cylinder { radius: 0.15, half_height: 0.2 },
            Shape::Torus { major: 0.2, minor: 0.07 },
        ];
        for shape in shapes {
            let prim = Primitive {
                instance_id: 1,
                shape,
                center: [0.0, 0.0, 0.0],
                color: [0.5; 3],
                texture: [10.0; 6],
            };
            let mut hits = 0;
            for _ in 0..4000 {
                let o = Vector3::new(
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                );
                if primitive_sdf(&prim, o) < 0.05 {
                    continue; // keep origins clearly outside
                }
                let target = Vector3::new(
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                );
                let d = (target - o).normalize();
                let ours = intersect_primitive(&prim, o, d).map(|(t, _)| t);
                let oracle = sphere_trace(&prim, o, d);
                match (ours, oracle) {
                    (Some(a), Some(b)) => {
                        assert!((a - b).abs() < 1e-6, "{shape:?}: {a} vs {b}");
                        hits += 1;
                    }
                    (None, None) => {}
                    // Sphere tracing can stall on exact tangencies; treat a
                    // sub-micron graze disagreement as a miss for both.
                    (Some(a), None) => {
                        let p = o + d * a;
                        panic!("{shape:?}: renderer hit t={a} at {p:?}, oracle missed");
                    }
                    (None, Some(b)) => {
                        let p = o + d * b;
                        let s = primitive_sdf(&prim, p);
                        panic!("{shape:?}: oracle hit t={b} (sdf {s}) at {p:?}, renderer missed");
                    }
                }
            }
            assert!(hits > 200, "{shape:?}: only {hits} hits sampled");
        }
    }

    #[test]
    fn render_deterministic() {
        let scene = super::super::generate_scene(5, 2);
        let frame = frame_at(
            Vector3::new(scene.room[0] / 2.0, scene.room[1] / 2.0 - 0.5, 1.4),
            Vector3::new(scene.room[0] / 2.0, scene.room[1], 1.0),
        );
        let a = render(&scene, &frame);
        let b = render(&scene, &frame);
        assert_eq!(a.depth.data, b.depth.data);
        assert_eq!(a.color, b.color);
    }
}
