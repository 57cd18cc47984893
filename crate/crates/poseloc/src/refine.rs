//! Photometric pose refinement against a trained radiance field: gradient
//! keypoint masks for pixel subsampling, masked photometric scoring, a
//! 6-DoF local pose optimizer, and best-candidate selection.
//!
//! The optimizer works in a local chart about the initial pose: three
//! translation offsets plus three rotation exponential coordinates, composed
//! onto the initial quaternion by right-multiplication and renormalized at
//! every step. Scoring and optimization share one tape construction, so the
//! scalar error reported by [`photometric_error`] is bit-identical to the
//! value the optimizer differentiates.

use rayon::prelude::*;
use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamState, Graph, NodeId, Real, Tensor};
use crate::geometry::{CameraModel, Pose, Quaternion};
use crate::posediff::ParticleSet;
use crate::radiance::{stratified_ts, ImageBuffer, RadianceField};

#[derive(Debug, thiserror::Error)]
pub enum RefineError {
    #[error("pixel mask is empty")]
    EmptyMask,
    #[error("mask pixel ({row}, {col}) outside {width}x{height} image")]
    PixelOutOfBounds { row: usize, col: usize, width: usize, height: usize },
    #[error("camera is {cam_w}x{cam_h} but target image is {img_w}x{img_h}")]
    CameraMismatch { cam_w: usize, cam_h: usize, img_w: usize, img_h: usize },
    #[error("subset of {requested} requested from {available} particles")]
    SubsetTooLarge { requested: usize, available: usize },
    #[error("no candidates to refine")]
    EmptyCandidates,
}

/// Deduplicated, row-major-sorted `(row, col)` pixel indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelMask {
    pub pixels: Vec<(usize, usize)>,
}

impl PixelMask {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RefinementConfig {
    pub lr: f64,
    pub steps: usize,
    pub keypoints: usize,
    pub dilation_radius: usize,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig { lr: 0.007, steps: 300, keypoints: 100, dilation_radius: 5 }
    }
}

/// Mean of the three channels, as f64, with zero outside the image.
fn luminance(image: &ImageBuffer, row: isize, col: isize) -> f64 {
    if row < 0 || col < 0 || row as usize >= image.height() || col as usize >= image.width() {
        return 0.0;
    }
    let p = image.pixel(row as usize, col as usize);
    (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0
}

/// Picks the top-K local maxima of the (3x3 box-summed) Sobel gradient
/// magnitude after 3x3 non-maximum suppression, dilates each winner by a
/// square of the given radius, and returns the clipped, deduplicated union.
/// The box sum makes the response peak at a feature's center rather than on
/// the ring around it, so an isolated bright pixel selects itself. Constant
/// images (no gradient anywhere) fall back to exactly K uniformly drawn
/// pixels seeded from the image dimensions alone.
pub fn keypoint_mask(image: &ImageBuffer, k: usize, radius: usize) -> PixelMask {
    assert!(k >= 1, "need at least one keypoint");
    let (w, h) = (image.width(), image.height());

    // Sobel magnitude (squared), zero on the border.
    let mut mag = vec![0.0f64; w * h];
    for r in 1..h.saturating_sub(1) {
        for c in 1..w.saturating_sub(1) {
            let l = |dr: isize, dc: isize| luminance(image, r as isize + dr, c as isize + dc);
            let gx = (l(-1, 1) + 2.0 * l(0, 1) + l(1, 1))
                - (l(-1, -1) + 2.0 * l(0, -1) + l(1, -1));
            let gy = (l(1, -1) + 2.0 * l(1, 0) + l(1, 1))
                - (l(-1, -1) + 2.0 * l(-1, 0) + l(-1, 1));
            mag[r * w + c] = gx * gx + gy * gy;
        }
    }

    // 3x3 box sum re-centers the response on the feature.
    let boxed: Vec<f64> = (0..h)
        .flat_map(|r| {
            let mag = &mag;
            (0..w).map(move |c| {
                let mut s = 0.0;
                for dr in -1isize..=1 {
                    for dc in -1isize..=1 {
                        let (nr, nc) = (r as isize + dr, c as isize + dc);
                        if nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w {
                            s += mag[nr as usize * w + nc as usize];
                        }
                    }
                }
                s
            })
        })
        .collect();

    // Non-maximum suppression: a pixel survives if no neighbor beats it;
    // equal-magnitude ties go to the earlier pixel in row-major order.
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for r in 0..h {
        'pixel: for c in 0..w {
            let v = boxed[r * w + c];
            if v <= 0.0 {
                continue;
            }
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr as usize >= h || nc as usize >= w {
                        continue;
                    }
                    let nv = boxed[nr as usize * w + nc as usize];
                    if nv > v || (nv == v && (nr as usize, nc as usize) < (r, c)) {
                        continue 'pixel;
                    }
                }
            }
            candidates.push((v, r, c));
        }
    }

    if candidates.is_empty() {
        // Constant (or gradient-free) image: K uniform pixels, seeded from
        // the dimensions so the fallback is reproducible across runs.
        let mut rng = ChaCha8Rng::seed_from_u64(((w as u64) << 32) | h as u64);
        let want = k.min(w * h);
        let mut chosen = BTreeSet::new();
        while chosen.len() < want {
            let r = rng.gen_range(0..h);
            let c = rng.gen_range(0..w);
            chosen.insert((r, c));
        }
        return PixelMask { pixels: chosen.into_iter().collect() };
    }

    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| (a.1, a.2).cmp(&(b.1, b.2))));
    let rad = radius as isize;
    let mut pixels = BTreeSet::new();
    for &(_, r, c) in candidates.iter().take(k) {
        for dr in -rad..=rad {
            for dc in -rad..=rad {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w {
                    pixels.insert((nr as usize, nc as usize));
                }
            }
        }
    }
    PixelMask { pixels: pixels.into_iter().collect() }
}

/// One masked-photometric-error problem instance: everything constant across
/// optimizer steps (camera rays, target values, strata, the initial pose's
/// left-multiplication matrix) precomputed once.
struct PhotoProblem<'a, T: Real> {
    field: &'a RadianceField<T>,
    origin0: [f64; 3],
    q0: Quaternion,
    /// 4x4 matrix `M` with `e_row · M = q0 ⊗ e` in (x, y, z, w) layout.
    left_mul: Tensor<T>,
    dirs_cam: Tensor<T>,
    target_vals: Tensor<T>,
    tvals: Vec<T>,
    delta: T,
    rays: usize,
}

impl<'a, T: Real> PhotoProblem<'a, T> {
    fn new(
        field: &'a RadianceField<T>,
        pose: &Pose,
        target: &ImageBuffer,
        mask: &PixelMask,
        camera: &CameraModel,
    ) -> Result<Self, RefineError> {
        if camera.width != target.width() || camera.height != target.height() {
            return Err(RefineError::CameraMismatch {
                cam_w: camera.width,
                cam_h: camera.height,
                img_w: target.width(),
                img_h: target.height(),
            });
        }
        if mask.is_empty() {
            return Err(RefineError::EmptyMask);
        }
        // Canonical pixel order makes the error independent of mask order.
        let mut pixels = mask.pixels.clone();
        pixels.sort_unstable();
        pixels.dedup();
        for &(row, col) in &pixels {
            if row >= target.height() || col >= target.width() {
                return Err(RefineError::PixelOutOfBounds {
                    row,
                    col,
                    width: target.width(),
                    height: target.height(),
                });
            }
        }

        let n = pixels.len();
        let mut dirs_cam = Tensor::zeros(&[n, 3]);
        let mut target_vals = Tensor::zeros(&[n, 3]);
        for (i, &(row, col)) in pixels.iter().enumerate() {
            let d = camera.pixel_direction(row, col);
            let p = target.pixel(row, col);
            for kx in 0..3 {
                dirs_cam.data_mut()[i * 3 + kx] = T::from_f64(d[kx]);
                target_vals.data_mut()[i * 3 + kx] = T::from_f64(p[kx] as f64);
            }
        }

        let q = pose.rotation;
        let (x0, y0, z0, w0) = (q.x, q.y, q.z, q.w);
        let left_mul = Tensor::from_f64_slice(
            &[4, 4],
            &[
                w0, z0, -y0, -x0, //
                -z0, w0, x0, -y0, //
                y0, -x0, w0, -z0, //
                x0, y0, z0, w0,
            ],
        );

        Ok(PhotoProblem {
            field,
            origin0: pose.translation,
            q0: q,
            left_mul,
            dirs_cam,
            target_vals,
            tvals: stratified_ts(field.near, field.far, field.samples, None),
            delta: T::from_f64((field.far - field.near) / field.samples as f64),
            rays: n,
        })
    }

    /// Builds the error graph for local parameters `theta` (a (1,6) node:
    /// translation offsets then rotation exponential coordinates) and
    /// returns the scalar root.
    fn build(&self, g: &mut Graph<T>, theta: NodeId) -> NodeId {
        let dt = g.slice_cols(theta, 0, 3);
        let t0 = g.constant(Tensor::from_f64_slice(&[1, 3], &self.origin0));
        let origin = g.add(dt, t0);

        let wv = g.slice_cols(theta, 3, 6);
        let dq = g.rotvec_to_quat(wv);
        let lm = g.constant(self.left_mul.clone());
        let q_raw = g.matmul(dq, lm);
        let q = g.normalize_rows(q_raw);

        let dirs = g.rotate_vecs(q, self.dirs_cam.clone());
        let pts = g.ray_points(origin, dirs, self.tvals.clone());
        let enc = g.posenc(pts, self.field.l_pos);
        let params = self.field.mlp.push_graph_params(g, false);
        let raw = self.field.mlp.graph_forward(g, enc, &params);

        let sigma_raw = g.slice_cols(raw, 0, 1);
        let sigma_act = g.softplus(sigma_raw);
        let sigma = g.reshape(sigma_act, &[self.rays, self.field.samples]);
        let rgb_raw = g.slice_cols(raw, 1, 4);
        let rgb = g.sigmoid(rgb_raw);
        let rendered = g.composite(sigma, rgb, self.delta);

        let tgt = g.constant(self.target_vals.clone());
        let diff = g.sub(rendered, tgt);
        let sq = g.mul(diff, diff);
        g.mean_all(sq)
    }

    /// Applies local parameters to the initial pose in plain arithmetic.
    fn compose(&self, theta: &Tensor<T>) -> Pose {
        let th = theta.to_f64_vec();
        let t = [
            self.origin0[0] + th[0],
            self.origin0[1] + th[1],
            self.origin0[2] + th[2],
        ];
        let dq = Quaternion::from_rotation_vector([th[3], th[4], th[5]]);
        Pose::new(t, self.q0.mul(&dq).normalized())
    }
}

/// Mean over masked pixels and channels of the squared difference between
/// the field's render at `pose` and the target. Deterministic midpoint
/// strata; invariant to mask ordering.
pub fn photometric_error<T: Real>(
    field: &RadianceField<T>,
    pose: &Pose,
    target: &ImageBuffer,
    mask: &PixelMask,
    camera: &CameraModel,
) -> Result<f64, RefineError> {
    let prob = PhotoProblem::new(field, pose, target, mask, camera)?;
    let mut g = Graph::new();
    let theta = g.constant(Tensor::zeros(&[1, 6]));
    let root = prob.build(&mut g, theta);
    Ok(g.value(root).data()[0].to_f64())
}

/// Photometric error and its gradient with respect to the 6 local pose
/// parameters, evaluated at the unperturbed pose.
pub fn photometric_gradient<T: Real>(
    field: &RadianceField<T>,
    pose: &Pose,
    target: &ImageBuffer,
    mask: &PixelMask,
    camera: &CameraModel,
) -> Result<([f64; 6], f64), RefineError> {
    let prob = PhotoProblem::new(field, pose, target, mask, camera)?;
    let mut g = Graph::new();
    let theta = g.leaf(Tensor::zeros(&[1, 6]));
    let root = prob.build(&mut g, theta);
    let err = g.value(root).data()[0].to_f64();
    let grads = g.backward(root).expect("scalar root");
    let gt = grads.get(theta).expect("theta is trainable");
    let v = gt.to_f64_vec();
    Ok((std::array::from_fn(|i| v[i]), err))
}

/// A particle scored (or refined) against the target, tagged with its index
/// in the originating set.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredCandidate {
    pub index: usize,
    pub pose: Pose,
    pub error: f64,
}

/// Scores every particle photometrically and returns the `b` best in
/// ascending error order; ties break toward the lower particle index.
pub fn select_subset<T: Real>(
    field: &RadianceField<T>,
    particles: &ParticleSet,
    target: &ImageBuffer,
    mask: &PixelMask,
    camera: &CameraModel,
    b: usize,
) -> Result<Vec<ScoredCandidate>, RefineError> {
    if b > particles.poses.len() {
        return Err(RefineError::SubsetTooLarge {
            requested: b,
            available: particles.poses.len(),
        });
    }
    let errors: Vec<f64> = particles
        .poses
        .par_iter()
        .map(|p| photometric_error(field, p, target, mask, camera))
        .collect::<Result<_, _>>()?;
    let mut scored: Vec<ScoredCandidate> = errors
        .into_iter()
        .enumerate()
        .map(|(index, error)| ScoredCandidate { index, pose: particles.poses[index], error })
        .collect();
    scored.sort_by(|a, b| a.error.total_cmp(&b.error).then(a.index.cmp(&b.index)));
    scored.truncate(b);
    Ok(scored)
}

/// Runs `steps` Adam iterations on the 6 local pose parameters and returns
/// the iterate with the lowest recorded error (the initialization counts as
/// an iterate, so the result is never worse than the starting pose).
pub fn refine_pose<T: Real>(
    field: &RadianceField<T>,
    pose: &Pose,
    target: &ImageBuffer,
    mask: &PixelMask,
    camera: &CameraModel,
    config: &RefinementConfig,
) -> Result<(Pose, f64), RefineError> {
    let prob = PhotoProblem::new(field, pose, target, mask, camera)?;
    let mut theta = Tensor::<T>::zeros(&[1, 6]);
    let mut adam = AdamState::new(&[&[1usize, 6]], T::from_f64(config.lr));
    let mut best_err = f64::INFINITY;
    let mut best_theta = theta.clone();
    for step in 0..=config.steps {
        let mut g = Graph::new();
        let th = g.leaf(theta.clone());
        let root = prob.build(&mut g, th);
        let err = g.value(root).data()[0].to_f64();
        if err < best_err {
            best_err = err;
            best_theta = theta.clone();
        }
        if step == config.steps {
            break;
        }
        let grads = g.backward(root).expect("scalar root");
        adam.step(&mut [&mut theta], &[grads.get(th)]).expect("shape fixed at init");
    }
    Ok((prob.compose(&best_theta), best_err))
}

/// Exactly `m` optimizer steps from the given pose, returning the final
/// iterate (not the best one); `m = 0` returns the pose unchanged. This is
/// the inner-loop flavor of refinement used between reverse-diffusion steps.
pub fn refine_steps<T: Real>(
    field: &RadianceField<T>,
    pose: &Pose,
    target: &ImageBuffer,
    mask: &PixelMask,
    camera: &CameraModel,
    lr: f64,
    m: usize,
) -> Result<Pose, RefineError> {
    if m == 0 {
        return Ok(*pose);
    }
    let prob = PhotoProblem::new(field, pose, target, mask, camera)?;
    let mut theta = Tensor::<T>::zeros(&[1, 6]);
    let mut adam = AdamState::new(&[&[1usize, 6]], T::from_f64(lr));
    for _ in 0..m {
        let mut g = Graph::new();
        let th = g.leaf(theta.clone());
        let root = prob.build(&mut g, th);
        let grads = g.backward(root).expect("scalar root");
        adam.step(&mut [&mut theta], &[grads.get(th)]).expect("shape fixed at init");
    }
    Ok(prob.compose(&theta))
}

/// Refines every candidate independently (parallel across candidates, merged
/// by index so worker count cannot affect the result).
pub fn refine_all<T: Real>(
    field: &RadianceField<T>,
    candidates: &[Pose],
    target: &ImageBuffer,
    mask: &PixelMask,
    camera: &CameraModel,
    config: &RefinementConfig,
) -> Result<Vec<ScoredCandidate>, RefineError> {
    candidates
        .par_iter()
        .enumerate()
        .map(|(index, pose)| {
            refine_pose(field, pose, target, mask, camera, config)
                .map(|(pose, error)| ScoredCandidate { index, pose, error })
        })
        .collect()
}

/// Refines every candidate and returns the one with the lowest final error
/// (ties toward the lowest candidate index).
pub fn refine_best<T: Real>(
    field: &RadianceField<T>,
    candidates: &[Pose],
    target: &ImageBuffer,
    mask: &PixelMask,
    camera: &CameraModel,
    config: &RefinementConfig,
) -> Result<ScoredCandidate, RefineError> {
    if candidates.is_empty() {
        return Err(RefineError::EmptyCandidates);
    }
    let refined = refine_all(field, candidates, target, mask, camera, config)?;
    Ok(refined
        .into_iter()
        .min_by(|a, b| a.error.total_cmp(&b.error).then(a.index.cmp(&b.index)))
        .expect("nonempty by check above"))
}
