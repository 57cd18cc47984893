//! Rigid camera poses, pinhole cameras, and ray generation.
//!
//! Conventions used throughout the crate:
//! * quaternions store their components scalar-last as `(x, y, z, w)`,
//! * camera-to-world transforms follow the OpenGL convention: the camera
//!   looks along its local `-z` axis with `+y` up,
//! * translations live in normalized scene coordinates.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("pixel ({row}, {col}) outside {width}x{height} image")]
    PixelOutOfBounds { row: usize, col: usize, width: usize, height: usize },
    #[error("invalid camera intrinsics: {0}")]
    BadIntrinsics(String),
}

/// Unit quaternion with scalar-last component order `(x, y, z, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { x: 0.0, y: 0.0, z: 0.0, w: 1.0 };

    pub fn new(x: f64, y: f64, z: f64, w: f64) -> Self {
        Quaternion { x, y, z, w }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z + self.w * self.w).sqrt()
    }

    /// Returns the unit-norm version, falling back to identity for a
    /// degenerate (near-zero) input.
    pub fn normalized(&self) -> Quaternion {
        let n = self.norm();
        if n < 1e-12 {
            return Quaternion::IDENTITY;
        }
        Quaternion::new(self.x / n, self.y / n, self.z / n, self.w / n)
    }

    pub fn dot(&self, other: &Quaternion) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z + self.w * other.w
    }

    /// Hamilton product `self * other` (apply `other` first, then `self`).
    pub fn mul(&self, other: &Quaternion) -> Quaternion {
        let (ax, ay, az, aw) = (self.x, self.y, self.z, self.w);
        let (bx, by, bz, bw) = (other.x, other.y, other.z, other.w);
        Quaternion::new(
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        )
    }

    /// Rotates a vector by this quaternion.
    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        // v' = v + 2*qv x (qv x v + w*v)
        let qv = [self.x, self.y, self.z];
        let t = cross(qv, v);
        let t = [t[0] + self.w * v[0], t[1] + self.w * v[1], t[2] + self.w * v[2]];
        let u = cross(qv, t);
        [v[0] + 2.0 * u[0], v[1] + 2.0 * u[1], v[2] + 2.0 * u[2]]
    }

    /// Rotation matrix, row-major, columns are the rotated basis vectors.
    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        let (x, y, z, w) = (self.x, self.y, self.z, self.w);
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
            [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
            [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    /// Recovers a unit quaternion from a rotation matrix (Shepperd's method).
    pub fn from_matrix(m: &[[f64; 3]; 3]) -> Quaternion {
        let trace = m[0][0] + m[1][1] + m[2][2];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quaternion::new(
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
                0.25 * s,
            )
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            Quaternion::new(
                0.25 * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[2][1] - m[1][2]) / s,
            )
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            Quaternion::new(
                (m[0][1] + m[1][0]) / s,
                0.25 * s,
                (m[1][2] + m[2][1]) / s,
                (m[0][2] - m[2][0]) / s,
            )
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            Quaternion::new(
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                0.25 * s,
                (m[1][0] - m[0][1]) / s,
            )
        };
        q.normalized()
    }

    /// Exponential of a rotation vector (axis * angle, radians).
    pub fn from_rotation_vector(v: [f64; 3]) -> Quaternion {
        let angle = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if angle < 1e-12 {
            // First-order expansion keeps the map smooth through zero.
            return Quaternion::new(v[0] * 0.5, v[1] * 0.5, v[2] * 0.5, 1.0).normalized();
        }
        let (s, c) = ((angle * 0.5).sin(), (angle * 0.5).cos());
        let k = s / angle;
        Quaternion::new(v[0] * k, v[1] * k, v[2] * k, c)
    }

    /// Flips the sign so the scalar component is non-negative. Both signs
    /// encode the same rotation; a canonical hemisphere keeps regression
    /// targets single-valued.
    pub fn canonicalized(&self) -> Quaternion {
        if self.w < 0.0 || (self.w == 0.0 && (self.x < 0.0 || (self.x == 0.0 && (self.y < 0.0 || (self.y == 0.0 && self.z < 0.0))))) {
            Quaternion::new(-self.x, -self.y, -self.z, -self.w)
        } else {
            *self
        }
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub translation: [f64; 3],
    pub rotation: Quaternion,
}

impl Pose {
    pub const IDENTITY: Pose =
        Pose { translation: [0.0; 3], rotation: Quaternion::IDENTITY };

    pub fn new(translation: [f64; 3], rotation: Quaternion) -> Self {
        Pose { translation, rotation }
    }

    /// `self * other`: applies `other` in the frame of `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let t = self.rotation.rotate(other.translation);
        Pose::new(
            [
                self.translation[0] + t[0],
                self.translation[1] + t[1],
                self.translation[2] + t[2],
            ],
            self.rotation.mul(&other.rotation),
        )
    }

    /// Flattens to `[tx, ty, tz, qx, qy, qz, qw]`.
    pub fn to_vec7(&self) -> [f64; 7] {
        [
            self.translation[0],
            self.translation[1],
            self.translation[2],
            self.rotation.x,
            self.rotation.y,
            self.rotation.z,
            self.rotation.w,
        ]
    }

    /// Rebuilds a pose from a flat 7-vector, renormalizing the rotation block.
    pub fn from_vec7(v: &[f64; 7]) -> Pose {
        Pose::new(
            [v[0], v[1], v[2]],
            Quaternion::new(v[3], v[4], v[5], v[6]).normalized(),
        )
    }
}

/// Draws a pose uniformly: translation is uniform in `[-0.5, 0.5]^3` and the
/// rotation is uniform over the rotation group via the subgroup algorithm
/// `(sqrt(1-u) sin 2πv, sqrt(1-u) cos 2πv, sqrt(u) sin 2πw, sqrt(u) cos 2πw)`.
/// The construction yields unit norm without renormalization.
pub fn sample_pose_uniform<R: Rng>(rng: &mut R) -> Pose {
    let tx = rng.gen::<f64>() - 0.5;
    let ty = rng.gen::<f64>() - 0.5;
    let tz = rng.gen::<f64>() - 0.5;
    let u = rng.gen::<f64>();
    let v = rng.gen::<f64>();
    let w = rng.gen::<f64>();
    let two_pi = 2.0 * std::f64::consts::PI;
    let (a, b) = ((1.0 - u).sqrt(), u.sqrt());
    let q = Quaternion::new(
        a * (two_pi * v).sin(),
        a * (two_pi * v).cos(),
        b * (two_pi * w).sin(),
        b * (two_pi * w).cos(),
    );
    Pose::new([tx, ty, tz], q)
}

/// Angular distance between two rotations in degrees, invariant to the
/// quaternion double cover. Range `[0, 180]`.
pub fn rotation_error_deg(a: &Quaternion, b: &Quaternion) -> f64 {
    let d = a.dot(b).abs().min(1.0);
    2.0 * d.acos().to_degrees()
}

/// Euclidean distance between camera centers.
pub fn translation_error(a: &Pose, b: &Pose) -> f64 {
    let d = [
        a.translation[0] - b.translation[0],
        a.translation[1] - b.translation[1],
        a.translation[2] - b.translation[2],
    ];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::BadIntrinsics(format!("fx={fx}, fy={fy}")));
        }
        if width == 0 || height == 0 || cx < 0.0 || cy < 0.0 || cx >= width as f64 || cy >= height as f64 {
            return Err(GeometryError::BadIntrinsics(format!(
                "cx={cx}, cy={cy} for {width}x{height}"
            )));
        }
        Ok(CameraModel { fx, fy, cx, cy, width, height })
    }

    /// Square-pixel camera with centered principal point, defined by the
    /// horizontal field of view in radians.
    pub fn from_angle_x(angle_x: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        if !(angle_x > 0.0 && angle_x < std::f64::consts::PI) {
            return Err(GeometryError::BadIntrinsics(format!("angle_x={angle_x}")));
        }
        let fx = 0.5 * width as f64 / (0.5 * angle_x).tan();
        CameraModel::new(fx, fx, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    pub fn angle_x(&self) -> f64 {
        2.0 * (0.5 * self.width as f64 / self.fx).atan()
    }

    /// Unit-norm view direction of a pixel in the camera frame.
    /// Pixel `(row, col)` maps through `((col - cx)/fx, -(row - cy)/fy, -1)`.
    pub fn pixel_direction(&self, row: usize, col: usize) -> [f64; 3] {
        let x = (col as f64 - self.cx) / self.fx;
        let y = -((row as f64 - self.cy) / self.fy);
        let n = (x * x + y * y + 1.0).sqrt();
        [x / n, y / n, -1.0 / n]
    }
}

/// Rays stored as parallel origin/direction arrays; directions are unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct RayBatch {
    pub origins: Vec<[f64; 3]>,
    pub directions: Vec<[f64; 3]>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

/// Builds world-space rays for the given pixels of a posed camera.
pub fn generate_rays(
    pose: &Pose,
    camera: &CameraModel,
    pixels: &[(usize, usize)],
) -> Result<RayBatch, GeometryError> {
    let mut origins = Vec::with_capacity(pixels.len());
    let mut directions = Vec::with_capacity(pixels.len());
    for &(row, col) in pixels {
        if row >= camera.height || col >= camera.width {
            return Err(GeometryError::PixelOutOfBounds {
                row,
                col,
                width: camera.width,
                height: camera.height,
            });
        }
        origins.push(pose.translation);
        directions.push(pose.rotation.rotate(camera.pixel_direction(row, col)));
    }
    Ok(RayBatch { origins, directions })
}

/// All pixels of a `width x height` image in row-major order.
pub fn full_image_pixels(width: usize, height: usize) -> Vec<(usize, usize)> {
    let mut px = Vec::with_capacity(width * height);
    for r in 0..height {
        for c in 0..width {
            px.push((r, c));
        }
    }
    px
}
