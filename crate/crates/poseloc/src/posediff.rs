//! Pose diffusion: noise schedule, sinusoidal embeddings, forward pose
//! corruption, the conditioned reverse (denoising) step, joint training of
//! the denoiser and the image encoder, and reverse sampling over particle
//! sets.
//!
//! A pose is treated as a flat 7-vector `[tx, ty, tz, qx, qy, qz, qw]`.
//! Corrupted intermediate states live off the unit-quaternion manifold by
//! design; the reverse step renormalizes the quaternion block after every
//! update so the states handed to downstream consumers are valid poses.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use std::path::Path;

use crate::autodiff::{
    load_checkpoint, save_checkpoint, AdamState, CheckpointError, Graph, Real, Tensor,
};
use crate::conditioning::{resize_bilinear, ConditioningEncoder, ConditioningError, PoolMode};
use crate::datasets::{PosedDataset, SceneNormalization};
use crate::geometry::{sample_pose_uniform, Pose};
use crate::nn::Mlp;
use crate::radiance::ImageBuffer;

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("timestep {t} outside 1..={n}")]
    BadTimestep { t: usize, n: usize },
    #[error("reverse step requires particles at timestep >= 1, got 0")]
    AlreadyClean,
    #[error("feature vector has dimension {got}, model expects {expected}")]
    FeatureDimMismatch { expected: usize, got: usize },
    #[error("need at least one particle")]
    NoParticles,
    #[error("dataset has no training frames")]
    EmptyDataset,
    #[error("training poses are not normalized (dataset carries no normalization)")]
    NotNormalized,
    #[error("non-finite loss at iteration {iter}")]
    NonFiniteLoss { iter: usize },
    #[error(transparent)]
    Conditioning(#[from] ConditioningError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

/// Linear noise schedule. Timesteps are 1-based: `t ∈ {1, …, N}` are
/// corrupted states and `t = 0` is clean, with `ᾱ_0 = 1` by convention.
#[derive(Clone, Debug, PartialEq)]
pub struct BetaSchedule {
    beta0: f64,
    beta_n: f64,
    /// `beta[t]` for t in 0..=N; index 0 is unused and holds 0.
    beta: Vec<f64>,
    /// `ᾱ[t] = Π_{i<=t} (1 - β_i)`, cached; `ᾱ[0] = 1`.
    alpha_bar: Vec<f64>,
}

impl BetaSchedule {
    /// `β_t = β0 + t·(βN − β0)/N`. Every β_t must land in (0, 1).
    pub fn linear(beta0: f64, beta_n: f64, n: usize) -> Self {
        assert!(n >= 1, "schedule needs at least one step");
        let betas: Vec<f64> = (1..=n)
            .map(|t| beta0 + t as f64 * (beta_n - beta0) / n as f64)
            .collect();
        assert!(
            betas.iter().all(|&b| b > 0.0 && b < 1.0),
            "linear schedule leaves (0,1): beta0={beta0}, betaN={beta_n}, N={n}"
        );
        Self::from_betas(beta0, beta_n, betas)
    }

    /// Builds a schedule from explicit per-step betas in `[0, 1)`. Exists for
    /// degenerate-schedule tests; production code uses [`BetaSchedule::linear`].
    pub fn from_betas(beta0: f64, beta_n: f64, betas: Vec<f64>) -> Self {
        assert!(!betas.is_empty());
        assert!(betas.iter().all(|&b| (0.0..1.0).contains(&b)));
        let mut beta = Vec::with_capacity(betas.len() + 1);
        beta.push(0.0);
        beta.extend_from_slice(&betas);
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut prod = 1.0;
        for &b in &beta {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        BetaSchedule { beta0, beta_n: beta_n, beta, alpha_bar }
    }

    pub fn n(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta0(&self) -> f64 {
        self.beta0
    }

    pub fn beta_n(&self) -> f64 {
        self.beta_n
    }

    /// β_t for t in 1..=N.
    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.n()).contains(&t), "beta({t}) out of range");
        self.beta[t]
    }

    /// α_t = 1 − β_t for t in 1..=N.
    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// ᾱ_t for t in 0..=N (cached cumulative product; ᾱ_0 = 1).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.n(), "alpha_bar({t}) out of range");
        self.alpha_bar[t]
    }
}

/// `(sin(2⁰πv), cos(2⁰πv), …, sin(2^{L−1}πv), cos(2^{L−1}πv))`.
pub fn sinusoidal_embed(v: f64, l_emb: usize) -> Vec<f64> {
    assert!(l_emb >= 1);
    let mut out = Vec::with_capacity(2 * l_emb);
    for k in 0..l_emb {
        let arg = std::f64::consts::PI * (1u64 << k) as f64 * v;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

/// Embedding block fed to the denoiser next to the image feature: the seven
/// pose scalars followed by the normalized timestep `t/N`, each through
/// [`sinusoidal_embed`]. Length `7·2L + 2L`.
pub fn embed_pose_and_time(p: &[f64; 7], t: usize, n: usize, l_emb: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(16 * l_emb);
    for &v in p {
        out.extend(sinusoidal_embed(v, l_emb));
    }
    out.extend(sinusoidal_embed(t as f64 / n as f64, l_emb));
    out
}

/// Seven standard-normal draws via Box–Muller (four pairs, last value of the
/// fourth pair discarded), so noise is a pure function of the RNG stream.
pub fn normal7(rng: &mut ChaCha8Rng) -> [f64; 7] {
    let mut out = [0.0; 7];
    let mut i = 0;
    while i < 7 {
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - rng.gen::<f64>();
        let u2 = rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let th = 2.0 * std::f64::consts::PI * u2;
        out[i] = r * th.cos();
        i += 1;
        if i < 7 {
            out[i] = r * th.sin();
            i += 1;
        }
    }
    out
}

/// `√ᾱ · p0 + √(1−ᾱ) · ε` — the affine corruption with explicit ᾱ.
pub fn forward_diffuse_with(p0: &[f64; 7], eps: &[f64; 7], alpha_bar: f64) -> [f64; 7] {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    std::array::from_fn(|k| a * p0[k] + b * eps[k])
}

/// Corrupts a clean pose vector to timestep `t`. No normalization: the
/// corrupted state is off-manifold by design.
pub fn forward_diffuse(
    p0: &[f64; 7],
    t: usize,
    schedule: &BetaSchedule,
    eps: &[f64; 7],
) -> Result<[f64; 7], DiffusionError> {
    if t < 1 || t > schedule.n() {
        return Err(DiffusionError::BadTimestep { t, n: schedule.n() });
    }
    Ok(forward_diffuse_with(p0, eps, schedule.alpha_bar(t)))
}

/// Deterministic part of the reverse update:
/// `(P_t − ((1−α_t)/√(1−ᾱ_t))·ψ) / √α_t`.
pub fn reverse_mean(p_t: &[f64; 7], psi: &[f64; 7], alpha_t: f64, alpha_bar_t: f64) -> [f64; 7] {
    let coef = (1.0 - alpha_t) / (1.0 - alpha_bar_t).sqrt();
    let inv_sqrt_a = 1.0 / alpha_t.sqrt();
    std::array::from_fn(|k| inv_sqrt_a * (p_t[k] - coef * psi[k]))
}

/// A group of candidate poses at a common diffusion timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSet {
    pub poses: Vec<Pose>,
    pub t: usize,
}

/// The pose denoiser with its attached image encoder and noise schedule.
#[derive(Clone)]
pub struct DiffusionModel<T: Real> {
    /// ψ: maps `[feature | γ(pose) | γ(t/N)]` to a 7-vector.
    pub denoiser: Mlp<T>,
    pub encoder: ConditioningEncoder<T>,
    pub l_emb: usize,
    pub schedule: BetaSchedule,
}

impl<T: Real> DiffusionModel<T> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        encoder_input: usize,
        encoder_channels: &[usize],
        feature_dim: usize,
        hidden: &[usize],
        l_emb: usize,
        schedule: BetaSchedule,
    ) -> Self {
        Self::new_with_pool(
            rng,
            encoder_input,
            encoder_channels,
            feature_dim,
            hidden,
            l_emb,
            schedule,
            PoolMode::Avg,
        )
    }

    /// [`Self::new`] with an explicit encoder pooling mode.
    #[allow(clippy::too_many_arguments)]
    pub fn new_with_pool(
        rng: &mut ChaCha8Rng,
        encoder_input: usize,
        encoder_channels: &[usize],
        feature_dim: usize,
        hidden: &[usize],
        l_emb: usize,
        schedule: BetaSchedule,
        pool: PoolMode,
    ) -> Self {
        let encoder = ConditioningEncoder::new_with_pool(
            rng,
            encoder_input,
            encoder_channels,
            feature_dim,
            pool,
        );
        let mut dims = vec![feature_dim + 7 * 2 * l_emb + 2 * l_emb];
        dims.extend_from_slice(hidden);
        dims.push(7);
        let denoiser = Mlp::new(rng, &dims);
        DiffusionModel { denoiser, encoder, l_emb, schedule }
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.feature_dim
    }

    /// Resizes (bilinear) if needed and encodes the target image once.
    pub fn encode_target(&self, target: &ImageBuffer) -> Result<Vec<T>, ConditioningError> {
        let s = self.encoder.input_size;
        if target.width() == s && target.height() == s {
            self.encoder.encode(target)
        } else {
            self.encoder.encode(&resize_bilinear(target, s, s))
        }
    }

    /// Runs ψ over every particle in one batched pass. `poses` are flat
    /// 7-vectors (possibly off-manifold mid-diffusion).
    pub fn denoise_batch(&self, f: &[T], poses: &[[f64; 7]], t: usize) -> Vec<[f64; 7]> {
        let n = self.schedule.n();
        let d = self.feature_dim();
        let in_dim = self.denoiser.in_dim();
        let mut x = Tensor::zeros(&[poses.len(), in_dim]);
        for (i, p) in poses.iter().enumerate() {
            let row = &mut x.data_mut()[i * in_dim..(i + 1) * in_dim];
            row[..d].copy_from_slice(f);
            for (dst, v) in row[d..].iter_mut().zip(embed_pose_and_time(p, t, n, self.l_emb)) {
                *dst = T::from_f64(v);
            }
        }
        let y = self.denoiser.plain_forward(&x);
        (0..poses.len())
            .map(|i| std::array::from_fn(|k| y.data()[i * 7 + k].to_f64()))
            .collect()
    }
}

/// One RNG per particle, on separate streams of the master seed, so noise
/// draws are reproducible regardless of how particles are scheduled.
pub fn particle_rngs(seed: u64, count: usize) -> Vec<ChaCha8Rng> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1 + i as u64);
            rng
        })
        .collect()
}

/// Applies one conditioned reverse-diffusion step to every particle,
/// moving the set from timestep `t` to `t − 1`. Stochastic noise
/// `(1−α_t)·ε` is added only while `t > 1`, so the final step is clean.
/// The quaternion block is renormalized after the update.
pub fn reverse_step<T: Real>(
    model: &DiffusionModel<T>,
    particles: &ParticleSet,
    f: &[T],
    schedule: &BetaSchedule,
    rngs: &mut [ChaCha8Rng],
) -> Result<ParticleSet, DiffusionError> {
    let t = particles.t;
    if t == 0 {
        return Err(DiffusionError::AlreadyClean);
    }
    if t > schedule.n() {
        return Err(DiffusionError::BadTimestep { t, n: schedule.n() });
    }
    if f.len() != model.feature_dim() {
        return Err(DiffusionError::FeatureDimMismatch {
            expected: model.feature_dim(),
            got: f.len(),
        });
    }
    assert_eq!(rngs.len(), particles.poses.len(), "one RNG stream per particle");

    let vecs: Vec<[f64; 7]> = particles.poses.iter().map(|p| p.to_vec7()).collect();
    let psi = model.denoise_batch(f, &vecs, t);
    let (alpha_t, alpha_bar_t) = (schedule.alpha(t), schedule.alpha_bar(t));
    let noise_scale = 1.0 - alpha_t;

    let mut out = Vec::with_capacity(vecs.len());
    for ((p_t, psi_i), rng) in vecs.iter().zip(&psi).zip(rngs.iter_mut()) {
        let mut next = reverse_mean(p_t, psi_i, alpha_t, alpha_bar_t);
        if t > 1 {
            let eps = normal7(rng);
            for k in 0..7 {
                next[k] += noise_scale * eps[k];
            }
        }
        out.push(Pose::from_vec7(&next));
    }
    Ok(ParticleSet { poses: out, t: t - 1 })
}

/// Draws `count` particles uniformly over the pose space at timestep N.
pub fn init_particles(count: usize, n: usize, rng: &mut ChaCha8Rng) -> ParticleSet {
    ParticleSet { poses: (0..count).map(|_| sample_pose_uniform(rng)).collect(), t: n }
}

/// Runs the full reverse chain: uniform initialization at t = N, one target
/// encoding, then `reverse_step` down to t = 0. Deterministic given `seed`.
pub fn reverse_sample<T: Real>(
    model: &DiffusionModel<T>,
    target: &ImageBuffer,
    particle_count: usize,
    seed: u64,
) -> Result<ParticleSet, DiffusionError> {
    if particle_count == 0 {
        return Err(DiffusionError::NoParticles);
    }
    let f = model.encode_target(target)?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut particles = init_particles(particle_count, model.schedule.n(), &mut master);
    let mut rngs = particle_rngs(seed, particle_count);
    while particles.t > 0 {
        particles = reverse_step(model, &particles, &f, &model.schedule, &mut rngs)?;
    }
    Ok(particles)
}

/// Per-component weights of the balanced pose loss: translation components
/// carry 1/3 and quaternion components λ/4, so the total is
/// `mse(translation) + λ·mse(quaternion)`.
pub fn loss_weights(lambda: f64) -> [f64; 7] {
    let t = 1.0 / 3.0;
    let q = lambda / 4.0;
    [t, t, t, q, q, q, q]
}

/// Balanced loss between a predicted and a target pose vector.
pub fn balanced_loss(pred: &[f64; 7], target: &[f64; 7], lambda: f64) -> f64 {
    let w = loss_weights(lambda);
    (0..7).map(|k| w[k] * (pred[k] - target[k]).powi(2)).sum()
}

/// Training configuration; mirrored by the `[diffusion]` config section.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DiffusionTrainConfig {
    pub encoder_input: usize,
    pub encoder_channels: Vec<usize>,
    /// How the encoder reduces its final feature map; flattening keeps the
    /// spatial layout that view-dependent conditioning relies on.
    pub pool: PoolMode,
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    pub l_emb: usize,
    pub beta0: f64,
    pub beta_n: f64,
    pub steps: usize,
    pub lambda: f64,
    pub iters: usize,
    /// Poses per iteration; 1 reproduces strict single-sample iterations.
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            encoder_input: 64,
            encoder_channels: vec![16, 32, 64, 128],
            pool: PoolMode::Avg,
            feature_dim: 128,
            hidden: vec![256, 256, 256, 256],
            l_emb: 6,
            beta0: 1e-4,
            beta_n: 0.02,
            steps: 50,
            lambda: 2.0,
            iters: 8000,
            batch: 16,
            lr: 2e-4,
            seed: 0,
        }
    }
}

pub struct TrainedDiffusion<T: Real> {
    pub model: DiffusionModel<T>,
    pub normalization: SceneNormalization,
    pub loss_log: Vec<(usize, f64)>,
}

/// Jointly trains ψ and the image encoder. Each iteration draws `batch`
/// independent (frame, timestep, noise) triples, corrupts each pose, runs
/// the deterministic reverse update on the tape, and regresses it onto the
/// clean pose under the balanced loss (mean over the batch).
pub fn train_diffusion<T: Real>(
    dataset: &PosedDataset,
    images: &[ImageBuffer],
    cfg: &DiffusionTrainConfig,
) -> Result<TrainedDiffusion<T>, DiffusionError> {
    if dataset.train_idx.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    let normalization = dataset.normalization.ok_or(DiffusionError::NotNormalized)?;
    let schedule = BetaSchedule::linear(cfg.beta0, cfg.beta_n, cfg.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = DiffusionModel::<T>::new_with_pool(
        &mut rng,
        cfg.encoder_input,
        &cfg.encoder_channels,
        cfg.feature_dim,
        &cfg.hidden,
        cfg.l_emb,
        schedule,
        cfg.pool,
    );

    // Resize every training image to the encoder resolution up front.
    let s = cfg.encoder_input;
    let resized: Vec<Tensor<T>> = dataset
        .frames
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let img = &images[i];
            let fitted = if img.width() == s && img.height() == s {
                img.clone()
            } else {
                resize_bilinear(img, s, s)
            };
            model.encoder.image_to_input(&fitted).expect("resized to encoder resolution")
        })
        .collect();

    let mut shapes = model.encoder.param_shapes();
    shapes.extend(model.denoiser.param_shapes());
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|v| v.as_slice()).collect();
    let mut adam = AdamState::<T>::new(&shape_refs, T::from_f64(cfg.lr));

    let n = cfg.steps;
    let img_cols = 3 * s * s;
    let emb_cols = 7 * 2 * cfg.l_emb + 2 * cfg.l_emb;
    let weights = loss_weights(cfg.lambda);
    let mut loss_log = Vec::with_capacity(cfg.iters);

    for iter in 0..cfg.iters {
        let b = cfg.batch;
        let mut image_rows = Tensor::<T>::zeros(&[b, img_cols]);
        let mut embeds = Tensor::<T>::zeros(&[b, emb_cols]);
        let mut base = Tensor::<T>::zeros(&[b, 7]);
        let mut coef = Tensor::<T>::zeros(&[b, 7]);
        let mut target = Tensor::<T>::zeros(&[b, 7]);
        let mut wrow = Tensor::<T>::zeros(&[b, 7]);

        for i in 0..b {
            let frame = dataset.train_idx[rng.gen_range(0..dataset.train_idx.len())];
            let t = rng.gen_range(1..=n);
            let eps = normal7(&mut rng);
            let pose = dataset.frames[frame].pose;
            let p0 = Pose::new(pose.translation, pose.rotation.canonicalized()).to_vec7();
            let p_t = forward_diffuse(&p0, t, &model.schedule, &eps)?;

            image_rows.data_mut()[i * img_cols..(i + 1) * img_cols]
                .copy_from_slice(resized[frame].data());
            for (dst, v) in embeds.data_mut()[i * emb_cols..(i + 1) * emb_cols]
                .iter_mut()
                .zip(embed_pose_and_time(&p_t, t, n, cfg.l_emb))
            {
                *dst = T::from_f64(v);
            }
            let alpha_t = model.schedule.alpha(t);
            let alpha_bar_t = model.schedule.alpha_bar(t);
            let inv_sqrt_a = 1.0 / alpha_t.sqrt();
            let c = inv_sqrt_a * (1.0 - alpha_t) / (1.0 - alpha_bar_t).sqrt();
            for k in 0..7 {
                base.data_mut()[i * 7 + k] = T::from_f64(inv_sqrt_a * p_t[k]);
                coef.data_mut()[i * 7 + k] = T::from_f64(c);
                target.data_mut()[i * 7 + k] = T::from_f64(p0[k]);
                wrow.data_mut()[i * 7 + k] = T::from_f64(weights[k]);
            }
        }

        let mut g = Graph::new();
        let mut params = model.encoder.push_graph_params(&mut g, true);
        let psi_params = model.denoiser.push_graph_params(&mut g, true);
        let enc_count = params.len();
        params.extend_from_slice(&psi_params);

        let imgs = g.constant(image_rows);
        let feats = model.encoder.graph_forward(&mut g, imgs, &params[..enc_count]);
        let emb = g.constant(embeds);
        let psi_in = g.concat_cols(&[feats, emb]);
        let psi = model.denoiser.graph_forward(&mut g, psi_in, &params[enc_count..]);

        // x_{t-1} = base − coef ⊙ ψ, compared against the clean pose.
        let coef_id = g.constant(coef);
        let scaled = g.mul(psi, coef_id);
        let base_id = g.constant(base);
        let x = g.sub(base_id, scaled);
        let tgt = g.constant(target);
        let diff = g.sub(x, tgt);
        let sq = g.mul(diff, diff);
        let w_id = g.constant(wrow);
        let weighted = g.mul(sq, w_id);
        let total = g.sum_all(weighted);
        let root = g.scale(total, T::from_f64(1.0 / b as f64));

        let loss = g.value(root).data()[0].to_f64();
        if !loss.is_finite() {
            return Err(DiffusionError::NonFiniteLoss { iter });
        }
        loss_log.push((iter, loss));

        let grads = g.backward(root).expect("scalar root");
        let grad_refs: Vec<Option<&Tensor<T>>> = params.iter().map(|&p| grads.get(p)).collect();
        let mut param_refs = model.encoder.params_mut();
        param_refs.extend(model.denoiser.params_mut());
        adam.step(&mut param_refs, &grad_refs).expect("shapes fixed at init");
    }

    Ok(TrainedDiffusion { model, normalization, loss_log })
}

/// Writes the denoiser and encoder into one checkpoint with a header
/// carrying the schedule, embedding config, and scene normalization.
pub fn save_diffusion_checkpoint<T: Real>(
    path: &Path,
    model: &DiffusionModel<T>,
    normalization: &SceneNormalization,
) -> Result<(), DiffusionError> {
    let hidden: Vec<usize> = model.denoiser.layers[..model.denoiser.layers.len() - 1]
        .iter()
        .map(|l| l.out_dim())
        .collect();
    let header = json!({
        "kind": "diffusion",
        "schedule": {
            "beta0": model.schedule.beta0(),
            "beta_n": model.schedule.beta_n(),
            "steps": model.schedule.n(),
        },
        "l_emb": model.l_emb,
        "feature_dim": model.feature_dim(),
        "encoder_input": model.encoder.input_size,
        "encoder_channels": model.encoder.channels(),
        "pool": model.encoder.pool.as_str(),
        "hidden": hidden,
        "normalization": {
            "scale": normalization.scale,
            "offset": normalization.offset,
        },
    });
    let mut params = model.denoiser.named_params("psi");
    params.extend(model.encoder.named_params("cond"));
    save_checkpoint(path, &header, &params)?;
    Ok(())
}

pub fn load_diffusion_checkpoint<T: Real>(
    path: &Path,
) -> Result<(DiffusionModel<T>, SceneNormalization), DiffusionError> {
    let (header, params) = load_checkpoint(path)?;
    if header["kind"] != "diffusion" {
        return Err(DiffusionError::BadCheckpoint(format!(
            "expected kind \"diffusion\", found {}",
            header["kind"]
        )));
    }
    let bad = |what: &str| DiffusionError::BadCheckpoint(format!("header field {what} invalid"));
    let usize_field = |v: &serde_json::Value, what: &str| {
        v.as_u64().map(|u| u as usize).ok_or_else(|| bad(what))
    };
    let usize_list = |v: &serde_json::Value, what: &str| -> Result<Vec<usize>, DiffusionError> {
        v.as_array()
            .ok_or_else(|| bad(what))?
            .iter()
            .map(|x| x.as_u64().map(|u| u as usize).ok_or_else(|| bad(what)))
            .collect()
    };
    let beta0 = header["schedule"]["beta0"].as_f64().ok_or_else(|| bad("schedule.beta0"))?;
    let beta_n = header["schedule"]["beta_n"].as_f64().ok_or_else(|| bad("schedule.beta_n"))?;
    let steps = usize_field(&header["schedule"]["steps"], "schedule.steps")?;
    let l_emb = usize_field(&header["l_emb"], "l_emb")?;
    let feature_dim = usize_field(&header["feature_dim"], "feature_dim")?;
    let encoder_input = usize_field(&header["encoder_input"], "encoder_input")?;
    let encoder_channels = usize_list(&header["encoder_channels"], "encoder_channels")?;
    let hidden = usize_list(&header["hidden"], "hidden")?;
    // Absent in checkpoints predating the pooling mode; those used avg.
    let pool = match header.get("pool") {
        None | Some(serde_json::Value::Null) => PoolMode::Avg,
        Some(v) => match v.as_str() {
            Some("avg") => PoolMode::Avg,
            Some("flatten") => PoolMode::Flatten,
            _ => return Err(bad("pool")),
        },
    };
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
    let mut model = DiffusionModel::<T>::new_with_pool(
        &mut rng,
        encoder_input,
        &encoder_channels,
        feature_dim,
        &hidden,
        l_emb,
        BetaSchedule::linear(beta0, beta_n, steps),
        pool,
    );
    model.denoiser.load_named(&params, "psi").map_err(DiffusionError::BadCheckpoint)?;
    model.encoder.load_named(&params, "cond").map_err(DiffusionError::BadCheckpoint)?;
    Ok((model, normalization))
}

/// Canonicalizes and flattens a pose for use as a regression target.
pub fn pose_to_target_vec(pose: &Pose) -> [f64; 7] {
    Pose::new(pose.translation, pose.rotation.canonicalized()).to_vec7()
}

#[allow(unused_imports)]
use crate::geometry::translation_error; // referenced by tests below
