//! Procedural analytic scenes: hollow-box rooms built from soft-edged
//! density primitives, with an optional low-texture variant and a separate
//! smooth blob family used as a quadrature oracle. Scenes are pure functions
//! of their seed and evaluate to (density, color) at any 3D point, so they
//! double as reference fields for ground-truth rendering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::geometry::{Pose, Quaternion};
use crate::radiance::Field;

/// Half-extent of the world box every primitive stays inside.
pub const SCENE_HALF: f64 = 0.5;
/// Distance from the origin to the inner face of each room wall.
pub const WALL_INNER: f64 = 0.42;
/// Half-extent of the box camera centers are drawn from.
pub const CAMERA_HALF: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneMode {
    Textured,
    Textureless,
    /// Gentle overlapping blobs with everywhere-smooth density; the family
    /// quadrature accuracy is certified against.
    Smooth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    Cuboid { min: [f64; 3], max: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Albedo {
    Flat([f64; 3]),
    /// 3D checkerboard between two colors, brightness-ramped along one axis
    /// so absolute position leaves a cue in the image.
    Checker {
        color_a: [f64; 3],
        color_b: [f64; 3],
        cell: f64,
        ramp_axis: usize,
        ramp_lo: f64,
        ramp_hi: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub sigma0: f64,
    /// Width of the smooth density falloff band around the surface.
    pub falloff: f64,
    pub albedo: Albedo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub seed: u64,
    pub mode: SceneMode,
    pub primitives: Vec<Primitive>,
}

/// C2 step: 0 below 0, 1 above 1, 6t^5 - 15t^4 + 10t^3 between.
fn smootherstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

impl Shape {
    /// Signed distance to the surface, negative inside.
    pub fn sdf(&self, p: [f64; 3]) -> f64 {
        match self {
            Shape::Sphere { center, radius } => norm3(sub3(p, *center)) - radius,
            Shape::Cuboid { min, max } => {
                let c = [(min[0] + max[0]) / 2.0, (min[1] + max[1]) / 2.0, (min[2] + max[2]) / 2.0];
                let h = [(max[0] - min[0]) / 2.0, (max[1] - min[1]) / 2.0, (max[2] - min[2]) / 2.0];
                let q = [
                    (p[0] - c[0]).abs() - h[0],
                    (p[1] - c[1]).abs() - h[1],
                    (p[2] - c[2]).abs() - h[2],
                ];
                let outside = norm3([q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)]);
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                outside + inside
            }
        }
    }
}

impl Albedo {
    pub fn at(&self, p: [f64; 3]) -> [f64; 3] {
        match self {
            Albedo::Flat(c) => *c,
            Albedo::Checker { color_a, color_b, cell, ramp_axis, ramp_lo, ramp_hi } => {
                let parity = (p[0] / cell).floor() as i64
                    + (p[1] / cell).floor() as i64
                    + (p[2] / cell).floor() as i64;
                let base = if parity.rem_euclid(2) == 0 { color_a } else { color_b };
                let t = ((p[*ramp_axis] + SCENE_HALF) / (2.0 * SCENE_HALF)).clamp(0.0, 1.0);
                let f = ramp_lo + (ramp_hi - ramp_lo) * t;
                [base[0] * f, base[1] * f, base[2] * f]
            }
        }
    }
}

impl Primitive {
    pub fn density(&self, p: [f64; 3]) -> f64 {
        let t = -self.shape.sdf(p) / self.falloff + 0.5;
        self.sigma0 * smootherstep(t)
    }
}

impl AnalyticScene {
    /// Total density and the density-weighted mixture color at a point.
    pub fn sigma_color(&self, p: [f64; 3]) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut color = [0.0; 3];
        for prim in &self.primitives {
            let s = prim.density(p);
            if s > 0.0 {
                let a = prim.albedo.at(p);
                sigma += s;
                for k in 0..3 {
                    color[k] += s * a[k];
                }
            }
        }
        if sigma > 1e-12 {
            for c in &mut color {
                *c /= sigma;
            }
        } else {
            color = [0.0; 3];
        }
        (sigma, color)
    }
}

impl<T: Real> Field<T> for AnalyticScene {
    fn eval_batch(&self, points: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let n = points.rows();
        let mut sigma = Tensor::zeros(&[n]);
        let mut rgb = Tensor::zeros(&[n, 3]);
        for i in 0..n {
            let p = [
                points.data()[i * 3].to_f64(),
                points.data()[i * 3 + 1].to_f64(),
                points.data()[i * 3 + 2].to_f64(),
            ];
            let (s, c) = self.sigma_color(p);
            sigma.data_mut()[i] = T::from_f64(s);
            for k in 0..3 {
                rgb.data_mut()[i * 3 + k] = T::from_f64(c[k]);
            }
        }
        (sigma, rgb)
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as i64;
    let f = h - i as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i.rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, q, t],
    }
}

const WALL_SIGMA: f64 = 200.0;
const WALL_FALLOFF: f64 = 0.02;

/// The six wall slabs of the hollow room, in a fixed order:
/// x-, x+, y-, y+, z-, z+.
fn wall_shapes() -> Vec<(Shape, usize)> {
    let mut walls = Vec::new();
    for axis in 0..3 {
        for (side, lo, hi) in [(0usize, -SCENE_HALF, -WALL_INNER), (1, WALL_INNER, SCENE_HALF)] {
            let mut min = [-SCENE_HALF; 3];
            let mut max = [SCENE_HALF; 3];
            min[axis] = lo;
            max[axis] = hi;
            walls.push((Shape::Cuboid { min, max }, axis * 2 + side));
        }
    }
    walls
}

/// Deterministic procedural room. Textured mode paints every wall with a
/// distinctly hued, brightness-ramped checkerboard and scatters a few small
/// objects between the camera volume and the walls; textureless mode uses at
/// most three flat wall colors and no objects.
pub fn generate_scene(seed: u64, mode: SceneMode) -> AnalyticScene {
    match mode {
        SceneMode::Smooth => return generate_smooth_scene(seed),
        SceneMode::Textured | SceneMode::Textureless => {}
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut primitives = Vec::new();
    let hue0: f64 = rng.gen();
    const GOLDEN: f64 = 0.618_033_988_749_894_9;

    match mode {
        SceneMode::Textured => {
            for (shape, wall_id) in wall_shapes() {
                let hue = hue0 + wall_id as f64 * GOLDEN;
                let cell = rng.gen_range(0.10..0.14);
                // Ramp along a tangent axis of the wall (any axis except the
                // wall's normal).
                let normal_axis = wall_id / 2;
                let ramp_axis = (normal_axis + 1 + rng.gen_range(0..2usize)) % 3;
                primitives.push(Primitive {
                    shape,
                    sigma0: WALL_SIGMA,
                    falloff: WALL_FALLOFF,
                    albedo: Albedo::Checker {
                        color_a: hsv_to_rgb(hue, 0.80, 0.95),
                        color_b: hsv_to_rgb(hue + 0.5 * GOLDEN, 0.45, 0.40),
                        cell,
                        ramp_axis,
                        ramp_lo: 0.55,
                        ramp_hi: 1.0,
                    },
                });
            }
            let objects = rng.gen_range(3..=5usize);
            for i in 0..objects {
                let axis = rng.gen_range(0..3usize);
                let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let mut center = [0.0; 3];
                for (k, c) in center.iter_mut().enumerate() {
                    *c = if k == axis {
                        side * rng.gen_range(0.30..0.36)
                    } else {
                        rng.gen_range(-0.30..0.30)
                    };
                }
                let size = rng.gen_range(0.04..0.08);
                let shape = if rng.gen::<bool>() {
                    Shape::Sphere { center, radius: size }
                } else {
                    Shape::Cuboid {
                        min: [center[0] - size, center[1] - size, center[2] - size],
                        max: [center[0] + size, center[1] + size, center[2] + size],
                    }
                };
                let hue = hue0 + (7 + i) as f64 * GOLDEN;
                primitives.push(Primitive {
                    shape,
                    sigma0: WALL_SIGMA,
                    falloff: 0.012,
                    albedo: Albedo::Flat(hsv_to_rgb(hue, 0.85, 0.95)),
                });
            }
        }
        SceneMode::Textureless => {
            // Three flat colors: floor+ceiling, x walls, z walls.
            let colors = [
                hsv_to_rgb(hue0, 0.25, 0.85),
                hsv_to_rgb(hue0 + GOLDEN, 0.25, 0.55),
                hsv_to_rgb(hue0 + 2.0 * GOLDEN, 0.25, 0.70),
            ];
            for (shape, wall_id) in wall_shapes() {
                let normal_axis = wall_id / 2;
                primitives.push(Primitive {
                    shape,
                    sigma0: WALL_SIGMA,
                    falloff: WALL_FALLOFF,
                    albedo: Albedo::Flat(colors[normal_axis]),
                });
            }
        }
        SceneMode::Smooth => unreachable!(),
    }
    AnalyticScene { seed, mode, primitives }
}

/// Overlapping soft spheres with wide falloff bands: density is C2 along
/// every ray, which is what the quadrature-convergence certificates assume.
pub fn generate_smooth_scene(seed: u64) -> AnalyticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs = rng.gen_range(3..=6usize);
    let primitives = (0..blobs)
        .map(|_| {
            let center = [
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
            ];
            let radius = rng.gen_range(0.05..0.12);
            let falloff = rng.gen_range(0.25..0.40);
            let sigma0 = rng.gen_range(2.0..6.0);
            let color = [
                rng.gen_range(0.15..0.95),
                rng.gen_range(0.15..0.95),
                rng.gen_range(0.15..0.95),
            ];
            Primitive {
                shape: Shape::Sphere { center, radius },
                sigma0,
                falloff,
                albedo: Albedo::Flat(color),
            }
        })
        .collect();
    AnalyticScene { seed, mode: SceneMode::Smooth, primitives }
}

/// Samples `n` camera-to-world poses for dataset rendering: centers uniform
/// in the interior camera box, aimed at random points on the inner wall
/// surfaces, with +y kept up (no roll).
pub fn sample_cameras(seed: u64, n: usize) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let pos = [
                rng.gen_range(-CAMERA_HALF..CAMERA_HALF),
                rng.gen_range(-CAMERA_HALF..CAMERA_HALF),
                rng.gen_range(-CAMERA_HALF..CAMERA_HALF),
            ];
            let axis = rng.gen_range(0..3usize);
            let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let mut target = [0.0; 3];
            for (k, t) in target.iter_mut().enumerate() {
                *t = if k == axis { side * WALL_INNER } else { rng.gen_range(-0.32..0.32) };
            }
            Pose { translation: pos, rotation: look_at_rotation(pos, target) }
        })
        .collect()
}

/// Rotation of a camera at `eye` looking at `target` under the looks-down-minus-z
/// convention, roll-free with respect to +y (falls back to +x when the view
/// direction is vertical).
pub fn look_at_rotation(eye: [f64; 3], target: [f64; 3]) -> Quaternion {
    let f = sub3(target, eye);
    let fn_ = norm3(f);
    assert!(fn_ > 1e-12, "look_at target coincides with eye");
    let f = [f[0] / fn_, f[1] / fn_, f[2] / fn_];
    let up = if f[1].abs() > 0.99 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let b = [-f[0], -f[1], -f[2]];
    let r = cross(up, b);
    let rn = norm3(r);
    let r = [r[0] / rn, r[1] / rn, r[2] / rn];
    let u = cross(b, r);
    let m = [
        [r[0], u[0], b[0]],
        [r[1], u[1], b[1]],
        [r[2], u[2], b[2]],
    ];
    Quaternion::from_matrix(&m).normalized()
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}
