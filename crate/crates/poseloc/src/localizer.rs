//! End-to-end camera localization: coarse pose hypotheses from conditioned
//! reverse diffusion (or uniform Monte Carlo sampling as a baseline),
//! photometric subset selection, and final gradient refinement — plus the
//! integrated variant that interleaves a few refinement steps into the tail
//! of the diffusion chain.

use rayon::prelude::*;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Real;
use crate::conditioning::ConditioningError;
use crate::datasets::SceneNormalization;
use crate::geometry::{sample_pose_uniform, CameraModel, Pose};
use crate::posediff::{
    init_particles, particle_rngs, reverse_sample, reverse_step, DiffusionError, DiffusionModel,
    ParticleSet,
};
use crate::radiance::{ImageBuffer, RadianceField};
use crate::refine::{
    keypoint_mask, refine_all, refine_steps, select_subset, PixelMask, RefineError,
    RefinementConfig, ScoredCandidate,
};

#[derive(Debug, thiserror::Error)]
pub enum LocalizeError {
    #[error("field and diffusion model were trained under different scene normalizations")]
    NormalizationMismatch,
    #[error("invalid pipeline config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Conditioning(#[from] ConditioningError),
}

/// Inner-refinement settings for the integrated variant.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct IntegratedConfig {
    pub enabled: bool,
    /// Refinement steps applied to every particle between diffusion steps.
    pub inner_steps: usize,
    /// Inner steps activate once the timestep falls to `fraction * N` or
    /// below; early particles are too noisy for photometric gradients.
    pub window_fraction: f64,
    /// Learning rate for the inner steps.
    pub inner_lr: f64,
}

impl Default for IntegratedConfig {
    fn default() -> Self {
        IntegratedConfig { enabled: true, inner_steps: 3, window_fraction: 0.5, inner_lr: 0.007 }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Coarse pose hypotheses P.
    pub particles: usize,
    /// Diffusion steps N the model is expected to have been trained with;
    /// the chain itself always follows the model's own schedule.
    pub steps: usize,
    /// Subset size B handed to final refinement.
    pub subset: usize,
    pub integrated: IntegratedConfig,
    pub refinement: RefinementConfig,
    /// Stop after the coarse stage and return the best raw particle.
    pub diffusion_only: bool,
    /// Keep the final refinement but disable inner (integrated) steps.
    pub no_integration: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            particles: 100,
            steps: 50,
            subset: 5,
            integrated: IntegratedConfig::default(),
            refinement: RefinementConfig::default(),
            diffusion_only: false,
            no_integration: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), LocalizeError> {
        if self.particles == 0 {
            return Err(LocalizeError::BadConfig("particle count must be positive".into()));
        }
        if self.subset == 0 {
            return Err(LocalizeError::BadConfig("subset size must be positive".into()));
        }
        if self.subset > self.particles {
            return Err(LocalizeError::BadConfig(format!(
                "subset {} exceeds particle count {}",
                self.subset, self.particles
            )));
        }
        if !(0.0..=1.0).contains(&self.integrated.window_fraction) {
            return Err(LocalizeError::BadConfig(format!(
                "window fraction {} outside [0, 1]",
                self.integrated.window_fraction
            )));
        }
        Ok(())
    }
}

/// Wall-clock milliseconds per pipeline stage.
#[derive(Clone, Copy, Debug, Default)]
pub struct StageTimings {
    pub diffusion_ms: f64,
    pub scoring_ms: f64,
    pub refinement_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug)]
pub struct LocalizationResult {
    /// The final refined pose (the raw argmin particle in diffusion-only
    /// mode).
    pub pose: Pose,
    pub final_error: f64,
    /// Coarse particle set after the sampling stage (t = 0).
    pub coarse: ParticleSet,
    /// Selected subset with pre-refinement photometric errors, ascending.
    pub subset: Vec<ScoredCandidate>,
    /// Post-refinement candidates, indexed like `subset`; empty in
    /// diffusion-only mode.
    pub refined: Vec<ScoredCandidate>,
    pub timings: StageTimings,
    pub config: PipelineConfig,
    pub seed: u64,
}

fn integrated_active(config: &PipelineConfig) -> bool {
    config.integrated.enabled && !config.no_integration && config.integrated.inner_steps > 0
}

/// Reverse diffusion with inner refinement steps: after each reverse step
/// whose output timestep lies inside the activation window (and still feeds
/// another diffusion step), every particle takes `inner_steps` photometric
/// steps. With `inner_steps = 0` this is exactly the plain reverse chain.
pub fn integrated_reverse_sample<T: Real>(
    model: &DiffusionModel<T>,
    field: &RadianceField<T>,
    target: &ImageBuffer,
    camera: &CameraModel,
    config: &PipelineConfig,
    seed: u64,
) -> Result<ParticleSet, LocalizeError> {
    config.validate()?;
    let mask =
        keypoint_mask(target, config.refinement.keypoints, config.refinement.dilation_radius);
    integrated_chain(model, field, target, camera, config, &mask, seed)
}

fn integrated_chain<T: Real>(
    model: &DiffusionModel<T>,
    field: &RadianceField<T>,
    target: &ImageBuffer,
    camera: &CameraModel,
    config: &PipelineConfig,
    mask: &PixelMask,
    seed: u64,
) -> Result<ParticleSet, LocalizeError> {
    if config.particles == 0 {
        return Err(DiffusionError::NoParticles.into());
    }
    let f = model.encode_target(target)?;
    let n = model.schedule.n();
    let window = (config.integrated.window_fraction * n as f64).floor() as usize;
    let m = config.integrated.inner_steps;

    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut particles = init_particles(config.particles, n, &mut master);
    let mut rngs = particle_rngs(seed, config.particles);
    while particles.t > 0 {
        particles = reverse_step(model, &particles, &f, &model.schedule, &mut rngs)?;
        if m > 0 && particles.t >= 1 && particles.t <= window {
            let stepped: Result<Vec<Pose>, RefineError> = particles
                .poses
                .par_iter()
                .map(|p| {
                    refine_steps(field, p, target, mask, camera, config.integrated.inner_lr, m)
                })
                .collect();
            particles.poses = stepped?;
        }
    }
    Ok(particles)
}

enum CoarseStage<'a, T: Real> {
    Diffusion(&'a DiffusionModel<T>),
    MonteCarlo,
}

fn localize_impl<T: Real>(
    field: &RadianceField<T>,
    stage: CoarseStage<'_, T>,
    target: &ImageBuffer,
    camera: &CameraModel,
    config: &PipelineConfig,
    seed: u64,
) -> Result<LocalizationResult, LocalizeError> {
    config.validate()?;
    let start = Instant::now();
    let mask =
        keypoint_mask(target, config.refinement.keypoints, config.refinement.dilation_radius);

    let t_coarse = Instant::now();
    let coarse = match stage {
        CoarseStage::Diffusion(model) => {
            if integrated_active(config) {
                integrated_chain(model, field, target, camera, config, &mask, seed)?
            } else {
                reverse_sample(model, target, config.particles, seed)?
            }
        }
        CoarseStage::MonteCarlo => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            ParticleSet {
                poses: (0..config.particles).map(|_| sample_pose_uniform(&mut rng)).collect(),
                t: 0,
            }
        }
    };
    let diffusion_ms = t_coarse.elapsed().as_secs_f64() * 1e3;

    let t_score = Instant::now();
    let (pose, final_error, subset, refined, scoring_ms, refinement_ms);
    if config.diffusion_only {
        let winner = select_subset(field, &coarse, target, &mask, camera, 1)?;
        scoring_ms = t_score.elapsed().as_secs_f64() * 1e3;
        pose = winner[0].pose;
        final_error = winner[0].error;
        subset = winner;
        refined = Vec::new();
        refinement_ms = 0.0;
    } else {
        subset = select_subset(field, &coarse, target, &mask, camera, config.subset)?;
        scoring_ms = t_score.elapsed().as_secs_f64() * 1e3;

        let t_refine = Instant::now();
        let candidate_poses: Vec<Pose> = subset.iter().map(|c| c.pose).collect();
        refined =
            refine_all(field, &candidate_poses, target, &mask, camera, &config.refinement)?;
        let best = refined
            .iter()
            .min_by(|a, b| a.error.total_cmp(&b.error).then(a.index.cmp(&b.index)))
            .expect("subset is nonempty because B >= 1");
        pose = best.pose;
        final_error = best.error;
        refinement_ms = t_refine.elapsed().as_secs_f64() * 1e3;
    }

    Ok(LocalizationResult {
        pose,
        final_error,
        coarse,
        subset,
        refined,
        timings: StageTimings {
            diffusion_ms,
            scoring_ms,
            refinement_ms,
            total_ms: start.elapsed().as_secs_f64() * 1e3,
        },
        config: config.clone(),
        seed,
    })
}

/// Full localization: conditioned reverse diffusion for coarse hypotheses,
/// photometric selection of the best `subset`, gradient refinement of each,
/// and the lowest-error refined pose as the answer. The field and the
/// diffusion model must have been trained under the same scene
/// normalization.
#[allow(clippy::too_many_arguments)]
pub fn localize<T: Real>(
    field: &RadianceField<T>,
    field_norm: &SceneNormalization,
    model: &DiffusionModel<T>,
    model_norm: &SceneNormalization,
    target: &ImageBuffer,
    camera: &CameraModel,
    config: &PipelineConfig,
    seed: u64,
) -> Result<LocalizationResult, LocalizeError> {
    if field_norm != model_norm {
        return Err(LocalizeError::NormalizationMismatch);
    }
    localize_impl(field, CoarseStage::Diffusion(model), target, camera, config, seed)
}

/// Baseline that replaces the diffusion stage with uniform pose sampling;
/// scoring, subset selection, and refinement are shared with [`localize`].
pub fn monte_carlo_localize<T: Real>(
    field: &RadianceField<T>,
    target: &ImageBuffer,
    camera: &CameraModel,
    config: &PipelineConfig,
    seed: u64,
) -> Result<LocalizationResult, LocalizeError> {
    localize_impl(field, CoarseStage::MonteCarlo, target, camera, config, seed)
}
