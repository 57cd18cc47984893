//! Scene model and volume renderer: a positional-encoded MLP that maps 3D
//! points to density and color, plus emission–absorption quadrature along
//! camera rays. The same quadrature runs in three places — over analytic
//! scenes to make ground-truth data, over the MLP for fast scoring, and on
//! the autodiff tape for training and pose refinement — so all of them call
//! the shared helpers in this module and agree on the arithmetic.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde_json::json;
use std::path::Path;

use crate::autodiff::{
    load_checkpoint, save_checkpoint, AdamState, CheckpointError, Graph, Real, Tensor,
};
use crate::datasets::{PosedDataset, SceneNormalization};
use crate::geometry::{CameraModel, Pose, RayBatch};
use crate::nn::Mlp;

#[derive(Debug, thiserror::Error)]
pub enum RadianceError {
    #[error("degenerate ray bounds: near {near} >= far {far}")]
    DegenerateBounds { near: f64, far: f64 },
    #[error("need at least 2 samples per ray, got {0}")]
    TooFewSamples(usize),
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("dataset has no training frames")]
    EmptyDataset,
    #[error("training poses are not normalized (dataset carries no normalization)")]
    NotNormalized,
    #[error("non-finite loss at iteration {iter}")]
    NonFiniteLoss { iter: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

/// Row-major RGB image with channels in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        ImageBuffer { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height * 3, "pixel buffer length mismatch");
        ImageBuffer { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn mean_squared_error(&self, other: &ImageBuffer) -> Result<f64, RadianceError> {
        if self.width != other.width || self.height != other.height {
            return Err(RadianceError::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        let mut acc = 0.0f64;
        for (a, b) in self.data.iter().zip(&other.data) {
            let d = *a as f64 - *b as f64;
            acc += d * d;
        }
        Ok(acc / self.data.len() as f64)
    }
}

/// Peak signal-to-noise ratio in dB for unit-range images, capped at 99.0
/// (the sentinel for identical inputs).
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, RadianceError> {
    let mse = a.mean_squared_error(b)?;
    if mse == 0.0 {
        return Ok(99.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(99.0))
}

/// Anything the volume renderer can march rays through: maps a batch of 3D
/// points `(n, 3)` to densities `(n)` and colors `(n, 3)`.
pub trait Field<T: Real> {
    fn eval_batch(&self, points: &Tensor<T>) -> (Tensor<T>, Tensor<T>);
}

/// Positional-encoded MLP radiance field. The MLP output is 4 channels:
/// raw density (softplus applied) followed by raw RGB (sigmoid applied).
#[derive(Clone)]
pub struct RadianceField<T: Real> {
    pub mlp: Mlp<T>,
    pub l_pos: usize,
    pub near: f64,
    pub far: f64,
    pub samples: usize,
}

impl<T: Real> RadianceField<T> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        l_pos: usize,
        hidden: &[usize],
        near: f64,
        far: f64,
        samples: usize,
    ) -> Self {
        let mut dims = vec![3 * (1 + 2 * l_pos)];
        dims.extend_from_slice(hidden);
        dims.push(4);
        RadianceField { mlp: Mlp::new(rng, &dims), l_pos, near, far, samples }
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.mlp.layers[..self.mlp.layers.len() - 1]
            .iter()
            .map(|l| l.out_dim())
            .collect()
    }
}

impl<T: Real> Field<T> for RadianceField<T> {
    fn eval_batch(&self, points: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let feats = posenc_plain(points, self.l_pos);
        let raw = self.mlp.plain_forward(&feats);
        let n = raw.rows();
        let mut sigma = Tensor::zeros(&[n]);
        let mut rgb = Tensor::zeros(&[n, 3]);
        for i in 0..n {
            sigma.data_mut()[i] = softplus_scalar(raw.data()[i * 4]);
            for k in 0..3 {
                rgb.data_mut()[i * 3 + k] = sigmoid_scalar(raw.data()[i * 4 + 1 + k]);
            }
        }
        (sigma, rgb)
    }
}

/// Numerically stable softplus, mirroring the tape primitive exactly.
pub fn softplus_scalar<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic sigmoid, mirroring the tape primitive exactly.
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Sinusoidal position features: each coordinate is kept raw and followed by
/// interleaved sin/cos blocks at frequencies `2^k * pi`. Identical layout and
/// arithmetic to the tape's positional-encoding primitive.
pub fn posenc_plain<T: Real>(points: &Tensor<T>, freqs: usize) -> Tensor<T> {
    let (m, d) = (points.rows(), points.cols());
    let out_w = d * (1 + 2 * freqs);
    let mut out = Tensor::zeros(&[m, out_w]);
    for r in 0..m {
        let src = &points.data()[r * d..(r + 1) * d];
        let dst = &mut out.data_mut()[r * out_w..(r + 1) * out_w];
        dst[..d].copy_from_slice(src);
        for k in 0..freqs {
            let scale = T::from_f64(std::f64::consts::PI * (1u64 << k) as f64);
            for j in 0..d {
                let v = src[j] * scale;
                dst[d + 2 * k * d + j] = v.sin();
                dst[d + (2 * k + 1) * d + j] = v.cos();
            }
        }
    }
    out
}

/// Stratified sample positions along [near, far]: midpoints when `jitter` is
/// `None` (evaluation, refinement), one uniform draw per stratum otherwise
/// (training). The same offsets apply to every ray in the batch.
pub fn stratified_ts<T: Real>(
    near: f64,
    far: f64,
    s: usize,
    mut jitter: Option<&mut ChaCha8Rng>,
) -> Vec<T> {
    let span = far - near;
    (0..s)
        .map(|j| {
            let u = match jitter.as_deref_mut() {
                Some(rng) => rng.gen::<f64>(),
                None => 0.5,
            };
            T::from_f64(near + span * ((j as f64 + u) / s as f64))
        })
        .collect()
}

/// Sample points `(rays * s, 3)` for a ray batch: `p = o + t * d`, same
/// arithmetic as the tape's ray-point primitive.
pub fn ray_sample_points<T: Real>(rays: &RayBatch, ts: &[T]) -> Tensor<T> {
    let n = rays.origins.len();
    let s = ts.len();
    let mut pts = Tensor::zeros(&[n * s, 3]);
    for i in 0..n {
        let o: [T; 3] = std::array::from_fn(|k| T::from_f64(rays.origins[i][k]));
        let d: [T; 3] = std::array::from_fn(|k| T::from_f64(rays.directions[i][k]));
        for j in 0..s {
            let row = (i * s + j) * 3;
            for k in 0..3 {
                pts.data_mut()[row + k] = o[k] + ts[j] * d[k];
            }
        }
    }
    pts
}

/// Plain (tape-free) emission–absorption compositing; mirrors the tape
/// primitive's loop exactly. `sigma` is `(rays, s)`, `rgb` is `(rays*s, 3)`.
pub fn composite_plain<T: Real>(sigma: &Tensor<T>, rgb: &Tensor<T>, delta: T) -> Tensor<T> {
    let (rays, samples) = (sigma.rows(), sigma.cols());
    assert_eq!(rgb.rows(), rays * samples);
    let mut out = Tensor::zeros(&[rays, 3]);
    for r in 0..rays {
        let (mut cr, mut cg, mut cb) = (T::ZERO, T::ZERO, T::ZERO);
        let mut trans = T::ONE;
        for j in 0..samples {
            let s = sigma.data()[r * samples + j];
            let att = (-(s * delta)).exp();
            let w = trans * (T::ONE - att);
            let base = (r * samples + j) * 3;
            cr += w * rgb.data()[base];
            cg += w * rgb.data()[base + 1];
            cb += w * rgb.data()[base + 2];
            trans = trans * att;
        }
        out.data_mut()[r * 3] = cr;
        out.data_mut()[r * 3 + 1] = cg;
        out.data_mut()[r * 3 + 2] = cb;
    }
    out
}

/// Renders a ray batch through any field. Returns per-ray RGB `(n, 3)`.
pub fn render_rays<T: Real, F: Field<T>>(
    field: &F,
    rays: &RayBatch,
    near: f64,
    far: f64,
    s: usize,
    jitter: Option<&mut ChaCha8Rng>,
) -> Result<Tensor<T>, RadianceError> {
    if near >= far {
        return Err(RadianceError::DegenerateBounds { near, far });
    }
    if s < 2 {
        return Err(RadianceError::TooFewSamples(s));
    }
    let ts = stratified_ts::<T>(near, far, s, jitter);
    let pts = ray_sample_points(rays, &ts);
    let (sigma_flat, rgb) = field.eval_batch(&pts);
    let n = rays.origins.len();
    let sigma = sigma_flat.reshaped(&[n, s]);
    let delta = T::from_f64((far - near) / s as f64);
    Ok(composite_plain(&sigma, &rgb, delta))
}

/// Renders a full image from a camera pose using deterministic midpoint
/// strata. Rays are processed in row-major pixel order.
pub fn render_image<T: Real, F: Field<T> + Sync>(
    field: &F,
    camera: &CameraModel,
    pose: &Pose,
    near: f64,
    far: f64,
    s: usize,
) -> Result<ImageBuffer, RadianceError> {
    let (w, h) = (camera.width, camera.height);
    let mut img = ImageBuffer::new(w, h);
    // Chunk by rows to bound the point-buffer size.
    for row in 0..h {
        let pixels: Vec<(usize, usize)> = (0..w).map(|c| (row, c)).collect();
        let rays = crate::geometry::generate_rays(pose, camera, &pixels)
            .expect("pixel grid is in bounds by construction");
        let colors = render_rays(field, &rays, near, far, s, None)?;
        for c in 0..w {
            let rgb: [f32; 3] = std::array::from_fn(|k| {
                (colors.data()[c * 3 + k].to_f64() as f32).clamp(0.0, 1.0)
            });
            img.set_pixel(row, c, rgb);
        }
    }
    Ok(img)
}

/// Configuration for NeRF training; mirrored by the `[nerf]` config section.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct NerfTrainConfig {
    pub l_pos: usize,
    pub hidden: Vec<usize>,
    pub near: f64,
    pub far: f64,
    pub samples: usize,
    pub iters: usize,
    pub rays_per_batch: usize,
    pub lr: f64,
    /// When positive, the learning rate decays exponentially from `lr` at the
    /// first iteration to `lr_final` at the last one. Zero keeps `lr` fixed.
    pub lr_final: f64,
    pub seed: u64,
}

impl Default for NerfTrainConfig {
    fn default() -> Self {
        NerfTrainConfig {
            l_pos: 6,
            hidden: vec![128, 128, 128, 128],
            near: 0.05,
            far: 2.5,
            samples: 48,
            iters: 20_000,
            rays_per_batch: 64,
            lr: 5e-4,
            lr_final: 0.0,
            seed: 0,
        }
    }
}

pub struct TrainedNerf<T: Real> {
    pub field: RadianceField<T>,
    pub normalization: SceneNormalization,
    /// (iteration, loss) pairs, one per iteration.
    pub loss_log: Vec<(usize, f64)>,
}

/// Trains the radiance field on normalized poses by minimizing mean squared
/// photometric error over ray minibatches. Each iteration draws one random
/// training image and a set of random pixels from it. Deterministic given
/// the config seed; runs on a single logical thread.
pub fn train_nerf<T: Real>(
    dataset: &PosedDataset,
    images: &[ImageBuffer],
    cfg: &NerfTrainConfig,
) -> Result<TrainedNerf<T>, RadianceError> {
    if dataset.train_idx.is_empty() {
        return Err(RadianceError::EmptyDataset);
    }
    let normalization = dataset.normalization.ok_or(RadianceError::NotNormalized)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut field =
        RadianceField::<T>::new(&mut rng, cfg.l_pos, &cfg.hidden, cfg.near, cfg.far, cfg.samples);
    let shapes = field.mlp.param_shapes();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut adam = AdamState::<T>::new(&shape_refs, T::from_f64(cfg.lr));
    let delta = T::from_f64((cfg.far - cfg.near) / cfg.samples as f64);
    let mut loss_log = Vec::with_capacity(cfg.iters);

    let decay = cfg.lr_final > 0.0 && cfg.lr > 0.0 && cfg.iters > 1;
    let (w, h) = (dataset.camera.width, dataset.camera.height);
    for iter in 0..cfg.iters {
        if decay {
            let f = iter as f64 / (cfg.iters - 1) as f64;
            adam.set_lr(T::from_f64(cfg.lr * (cfg.lr_final / cfg.lr).powf(f)));
        }
        let frame_pos = rng.gen_range(0..dataset.train_idx.len());
        let frame = dataset.train_idx[frame_pos];
        let pose = dataset.frames[frame].pose;
        let image = &images[frame];

        let pixels: Vec<(usize, usize)> = (0..cfg.rays_per_batch)
            .map(|_| (rng.gen_range(0..h), rng.gen_range(0..w)))
            .collect();
        let rays = crate::geometry::generate_rays(&pose, &dataset.camera, &pixels)
            .expect("sampled pixels are in bounds");
        let ts = stratified_ts::<T>(cfg.near, cfg.far, cfg.samples, Some(&mut rng));
        let pts = ray_sample_points(&rays, &ts);
        let feats = posenc_plain(&pts, cfg.l_pos);

        let mut target = Tensor::<T>::zeros(&[pixels.len(), 3]);
        for (i, &(r, c)) in pixels.iter().enumerate() {
            let px = image.pixel(r, c);
            for k in 0..3 {
                target.data_mut()[i * 3 + k] = T::from_f64(px[k] as f64);
            }
        }

        let mut g = Graph::new();
        let params = field.mlp.push_graph_params(&mut g, true);
        let x = g.constant(feats);
        let raw = field.mlp.graph_forward(&mut g, x, &params);
        let sigma_raw = g.slice_cols(raw, 0, 1);
        let sigma = g.softplus(sigma_raw);
        let sigma = g.reshape(sigma, &[pixels.len(), cfg.samples]);
        let rgb_raw = g.slice_cols(raw, 1, 4);
        let rgb = g.sigmoid(rgb_raw);
        let rendered = g.composite(sigma, rgb, delta);
        let tgt = g.constant(target);
        let diff = g.sub(rendered, tgt);
        let sq = g.mul(diff, diff);
        let root = g.mean_all(sq);

        let loss = g.value(root).data()[0].to_f64();
        if !loss.is_finite() {
            return Err(RadianceError::NonFiniteLoss { iter });
        }
        loss_log.push((iter, loss));

        let grads = g.backward(root).expect("scalar root");
        let grad_refs: Vec<Option<&Tensor<T>>> = params.iter().map(|&p| grads.get(p)).collect();
        let mut param_refs = field.mlp.params_mut();
        adam.step(&mut param_refs, &grad_refs).expect("shapes fixed at init");
    }

    Ok(TrainedNerf { field, normalization, loss_log })
}

/// Writes the field and its scene normalization to the shared checkpoint
/// container. The header carries everything needed to rebuild the model.
pub fn save_nerf_checkpoint<T: Real>(
    path: &Path,
    field: &RadianceField<T>,
    normalization: &SceneNormalization,
) -> Result<(), RadianceError> {
    let header = json!({
        "kind": "nerf",
        "l_pos": field.l_pos,
        "hidden": field.hidden_dims(),
        "near": field.near,
        "far": field.far,
        "samples": field.samples,
        "normalization": {
            "scale": normalization.scale,
            "offset": normalization.offset,
        },
    });
    let params = field.mlp.named_params("nerf");
    save_checkpoint(path, &header, &params)?;
    Ok(())
}

pub fn load_nerf_checkpoint<T: Real>(
    path: &Path,
) -> Result<(RadianceField<T>, SceneNormalization), RadianceError> {
    let (header, params) = load_checkpoint(path)?;
    if header["kind"] != "nerf" {
        return Err(RadianceError::BadCheckpoint(format!(
            "expected kind \"nerf\", found {}",
            header["kind"]
        )));
    }
    let bad = |what: &str| RadianceError::BadCheckpoint(format!("header field {what} invalid"));
    let l_pos = header["l_pos"].as_u64().ok_or_else(|| bad("l_pos"))? as usize;
    let hidden: Vec<usize> = header["hidden"]
        .as_array()
        .ok_or_else(|| bad("hidden"))?
        .iter()
        .map(|v| v.as_u64().map(|u| u as usize).ok_or_else(|| bad("hidden")))
        .collect::<Result<_, _>>()?;
    let near = header["near"].as_f64().ok_or_else(|| bad("near"))?;
    let far = header["far"].as_f64().ok_or_else(|| bad("far"))?;
    let samples = header["samples"].as_u64().ok_or_else(|| bad("samples"))? as usize;
    let normalization = SceneNormalization {
        scale: header["normalization"]["scale"].as_f64().ok_or_else(|| bad("normalization.scale"))?,
        offset: {
            let arr = header["normalization"]["offset"]
                .as_array()
                .ok_or_else(|| bad("normalization.offset"))?;
            if arr.len() != 3 {
                return Err(bad("normalization.offset"));
            }
            let mut o = [0.0; 3];
            for (k, v) in arr.iter().enumerate() {
                o[k] = v.as_f64().ok_or_else(|| bad("normalization.offset"))?;
            }
            o
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut field = RadianceField::<T>::new(&mut rng, l_pos, &hidden, near, far, samples);
    field
        .mlp
        .load_named(&params, "nerf")
        .map_err(RadianceError::BadCheckpoint)?;
    Ok((field, normalization))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_scene, sample_cameras, Frame, SceneMode};
    use crate::geometry::{generate_rays, Pose, Quaternion};

    fn small_camera(side: usize) -> CameraModel {
        CameraModel::from_angle_x(70f64.to_radians(), side, side).unwrap()
    }

    #[test]
    fn psnr_hits_reference_points() {
        let a = ImageBuffer::from_data(2, 2, vec![0.25; 12]);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);

        let zeros = ImageBuffer::from_data(2, 2, vec![0.0; 12]);
        let ones = ImageBuffer::from_data(2, 2, vec![1.0; 12]);
        // MSE 1.0 is 0 dB.
        assert!((psnr(&zeros, &ones).unwrap() - 0.0).abs() < 1e-12);
        // MSE 0.01 is 20 dB.
        let tenth = ImageBuffer::from_data(2, 2, vec![0.1; 12]);
        assert!((psnr(&zeros, &tenth).unwrap() - 20.0).abs() < 1e-6);

        let wide = ImageBuffer::new(3, 2);
        assert!(matches!(
            psnr(&a, &wide),
            Err(RadianceError::DimensionMismatch(2, 2, 3, 2))
        ));
    }

    /// Empty space colored white: any rendered ray must stay black.
    struct ZeroDensity;
    impl Field<f64> for ZeroDensity {
        fn eval_batch(&self, points: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
            let n = points.rows();
            (Tensor::zeros(&[n]), Tensor::from_elem(&[n, 3], 1.0))
        }
    }

    #[test]
    fn zero_density_renders_black_background() {
        let cam = small_camera(6);
        let img = render_image(&ZeroDensity, &cam, &Pose::IDENTITY, 0.05, 2.0, 16).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0), "background must be black");
    }

    /// A solid red wall filling z < -0.5.
    struct RedWall;
    impl Field<f64> for RedWall {
        fn eval_batch(&self, points: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
            let n = points.rows();
            let mut sigma = Tensor::zeros(&[n]);
            let mut rgb = Tensor::zeros(&[n, 3]);
            for i in 0..n {
                if points.data()[i * 3 + 2] < -0.5 {
                    sigma.data_mut()[i] = 1e4;
                }
                rgb.data_mut()[i * 3] = 1.0;
            }
            (sigma, rgb)
        }
    }

    #[test]
    fn opaque_wall_saturates_to_its_surface_color() {
        let cam = small_camera(4);
        let img = render_image(&RedWall, &cam, &Pose::IDENTITY, 0.05, 2.5, 64).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let px = img.pixel(r, c);
                assert!((px[0] - 1.0).abs() < 1e-3, "red channel {}", px[0]);
                assert!(px[1].abs() < 1e-3 && px[2].abs() < 1e-3);
            }
        }
    }

    #[test]
    fn composited_weights_never_exceed_unit_sum() {
        // Compositing an all-white field bounds each channel by the weight
        // sum, which absorption keeps at or below one.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let rays = 3;
            let s = 17;
            let sigma = Tensor::<f64>::from_vec(
                &[rays, s],
                (0..rays * s).map(|_| rng.gen::<f64>() * 30.0).collect(),
            );
            let white = Tensor::from_elem(&[rays * s, 3], 1.0);
            let out = composite_plain(&sigma, &white, 0.05);
            for &v in out.data() {
                assert!((0.0..=1.0 + 1e-12).contains(&v), "weight sum escaped: {v}");
            }
        }
    }

    #[test]
    fn coarse_quadrature_stays_near_reference_on_smooth_scene() {
        // Down-sized version of the renderer-correctness gate: on a smooth
        // scene, 64 samples per ray land within 0.02 per channel of a
        // 4096-sample reference.
        let cam = small_camera(8);
        let scene = generate_scene(31, SceneMode::Smooth);
        let pose = sample_cameras(13, 1)[0];
        let coarse = render_image::<f64, _>(&scene, &cam, &pose, 0.02, 1.6, 64).unwrap();
        let fine = render_image::<f64, _>(&scene, &cam, &pose, 0.02, 1.6, 4096).unwrap();
        let mut worst = 0.0f32;
        for (a, b) in coarse.data().iter().zip(fine.data()) {
            worst = worst.max((a - b).abs());
        }
        assert!(worst < 0.02, "coarse quadrature off by {worst}");
    }

    #[test]
    fn render_rays_validates_inputs() {
        let rays = RayBatch { origins: vec![[0.0; 3]], directions: vec![[0.0, 0.0, -1.0]] };
        assert!(matches!(
            render_rays::<f64, _>(&ZeroDensity, &rays, 1.0, 1.0, 8, None),
            Err(RadianceError::DegenerateBounds { .. })
        ));
        assert!(matches!(
            render_rays::<f64, _>(&ZeroDensity, &rays, 0.1, 1.0, 1, None),
            Err(RadianceError::TooFewSamples(1))
        ));
    }

    #[test]
    fn midpoint_strata_are_exact() {
        let ts = stratified_ts::<f64>(0.0, 1.0, 4, None);
        assert_eq!(ts, vec![0.125, 0.375, 0.625, 0.875]);
    }

    #[test]
    fn jittered_strata_stay_inside_their_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (near, far, s) = (0.3, 1.7, 9);
            let ts = stratified_ts::<f64>(near, far, s, Some(&mut rng));
            let cell = (far - near) / s as f64;
            for (j, t) in ts.iter().enumerate() {
                let lo = near + cell * j as f64;
                assert!((lo..lo + cell).contains(t), "t {t} escaped stratum {j}");
            }
        }
    }

    #[test]
    fn plain_and_tape_rendering_agree_bitwise() {
        // The fast scoring path (plain loops) and the training path (tape)
        // must compute the same function down to the last bit.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let field = RadianceField::<f32>::new(&mut rng, 3, &[20, 20], 0.1, 1.4, 7);
        let cam = small_camera(5);
        let pose = sample_cameras(21, 1)[0];
        let pixels: Vec<(usize, usize)> = (0..5).map(|c| (2, c)).collect();
        let rays = generate_rays(&pose, &cam, &pixels).unwrap();

        let plain = render_rays(&field, &rays, 0.1, 1.4, 7, None).unwrap();

        let ts = stratified_ts::<f32>(0.1, 1.4, 7, None);
        let pts = ray_sample_points(&rays, &ts);
        let feats = posenc_plain(&pts, 3);
        let mut g = Graph::new();
        let params = field.mlp.push_graph_params(&mut g, false);
        let x = g.constant(feats);
        let raw = field.mlp.graph_forward(&mut g, x, &params);
        let sigma_raw = g.slice_cols(raw, 0, 1);
        let sigma = g.softplus(sigma_raw);
        let sigma = g.reshape(sigma, &[rays.len(), 7]);
        let rgb_raw = g.slice_cols(raw, 1, 4);
        let rgb = g.sigmoid(rgb_raw);
        // Same f64-then-round delta computation as the plain renderer.
        let delta = f32::from_f64((1.4f64 - 0.1) / 7.0);
        let rendered = g.composite(sigma, rgb, delta);
        assert_eq!(g.value(rendered).data(), plain.data());
    }

    fn constant_image_dataset(gray: f32) -> (PosedDataset, Vec<ImageBuffer>) {
        let camera = small_camera(12);
        let poses = [
            Pose::new([0.0, 0.0, 0.0], Quaternion::IDENTITY),
            Pose::new([0.15, 0.0, 0.05], Quaternion::IDENTITY),
        ];
        let frames: Vec<Frame> = poses
            .iter()
            .enumerate()
            .map(|(i, p)| Frame { file_path: format!("images/frame_{i:04}.png"), pose: *p })
            .collect();
        let images: Vec<ImageBuffer> = (0..2)
            .map(|_| ImageBuffer::from_data(12, 12, vec![gray; 12 * 12 * 3]))
            .collect();
        let dataset = PosedDataset {
            root: std::path::PathBuf::new(),
            camera,
            frames,
            train_idx: vec![0, 1],
            test_idx: Vec::new(),
            normalization: Some(SceneNormalization::identity()),
        };
        (dataset, images)
    }

    fn tiny_train_config(iters: usize) -> NerfTrainConfig {
        NerfTrainConfig {
            l_pos: 2,
            hidden: vec![24, 24],
            near: 0.1,
            far: 1.0,
            samples: 6,
            iters,
            rays_per_batch: 24,
            lr: 1e-2,
            lr_final: 0.0,
            seed: 1,
        }
    }

    #[test]
    fn training_reduces_photometric_loss() {
        let (dataset, images) = constant_image_dataset(0.35);
        let trained = train_nerf::<f32>(&dataset, &images, &tiny_train_config(200)).unwrap();
        let mean = |w: &[(usize, f64)]| w.iter().map(|&(_, l)| l).sum::<f64>() / w.len() as f64;
        let first = mean(&trained.loss_log[..20]);
        let last = mean(&trained.loss_log[180..]);
        assert!(
            last < 0.5 * first && last < 5e-3,
            "loss went {first:.5} -> {last:.5}"
        );
    }

    #[test]
    fn training_is_seed_deterministic() {
        let (dataset, images) = constant_image_dataset(0.6);
        let cfg = tiny_train_config(30);
        let a = train_nerf::<f32>(&dataset, &images, &cfg).unwrap();
        let b = train_nerf::<f32>(&dataset, &images, &cfg).unwrap();
        assert_eq!(a.loss_log, b.loss_log);
        for (la, lb) in a.field.mlp.layers.iter().zip(&b.field.mlp.layers) {
            assert_eq!(la.weight.data(), lb.weight.data());
            assert_eq!(la.bias.data(), lb.bias.data());
        }
    }

    #[test]
    fn training_requires_normalized_poses() {
        let (mut dataset, images) = constant_image_dataset(0.5);
        dataset.normalization = None;
        assert!(matches!(
            train_nerf::<f32>(&dataset, &images, &tiny_train_config(1)),
            Err(RadianceError::NotNormalized)
        ));
        let (mut dataset, images) = constant_image_dataset(0.5);
        dataset.train_idx.clear();
        assert!(matches!(
            train_nerf::<f32>(&dataset, &images, &tiny_train_config(1)),
            Err(RadianceError::EmptyDataset)
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nerf.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let field = RadianceField::<f32>::new(&mut rng, 3, &[16, 16], 0.1, 1.5, 12);
        let norm = SceneNormalization { scale: 1.25, offset: [0.1, -0.2, 0.05] };
        save_nerf_checkpoint(&path, &field, &norm).unwrap();
        let (loaded, norm2) = load_nerf_checkpoint::<f32>(&path).unwrap();
        assert_eq!(norm2, norm);
        assert_eq!(loaded.l_pos, field.l_pos);
        assert_eq!(loaded.samples, field.samples);
        assert_eq!(loaded.hidden_dims(), field.hidden_dims());
        for (la, lb) in field.mlp.layers.iter().zip(&loaded.mlp.layers) {
            assert_eq!(la.weight.data(), lb.weight.data());
            assert_eq!(la.bias.data(), lb.bias.data());
        }
        // Same model, same render.
        let cam = small_camera(4);
        let pose = sample_cameras(8, 1)[0];
        let a = render_image(&field, &cam, &pose, 0.1, 1.5, 12).unwrap();
        let b = render_image(&loaded, &cam, &pose, 0.1, 1.5, 12).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rendering_is_deterministic() {
        let scene = generate_scene(3, SceneMode::Textured);
        let cam = small_camera(6);
        let pose = sample_cameras(4, 1)[0];
        let a = render_image::<f64, _>(&scene, &cam, &pose, 0.02, 1.6, 32).unwrap();
        let b = render_image::<f64, _>(&scene, &cam, &pose, 0.02, 1.6, 32).unwrap();
        assert_eq!(a, b);
    }
}
