//! Experiment orchestration on top of the localization pipeline: success
//! metrics, CSV/JSON reports, parameter sweeps, and the on-disk run layout
//! shared with the command-line interface.
//!
//! A *run directory* holds every artifact of one experiment:
//!
//! ```text
//! run/
//!   scene.json          procedural scene + camera recipe
//!   transforms.json     camera poses (written by the reference renderer)
//!   split.json          train/test frame split
//!   images/             reference renders
//!   nerf.ckpt           trained radiance field + pose normalization
//!   diffusion.ckpt      trained pose prior + pose normalization
//!   nerf_loss.csv       training loss logs
//!   diffusion_loss.csv
//!   eval.csv            per-method evaluation table
//!   ablate.csv          integrated-vs-plain comparison
//!   sweep.csv           parameter sweep table
//!   queries/            one JSON record per localized query
//! ```
//!
//! Reported timing columns are measured wall-clock times and therefore not
//! reproducible across runs; when the run is pinned to a single thread they
//! are serialized as zero so repeated runs produce byte-identical files.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{AppConfig, ConfigError, SceneConfig};
use crate::datasets::{
    atomic_write, generate_scene, load_dataset, normalize_poses, render_ground_truth,
    sample_cameras, save_dataset, DatasetError, PosedDataset, SceneNormalization,
};
use crate::geometry::{rotation_error_deg, translation_error, CameraModel, GeometryError, Pose};
use crate::localizer::{
    localize, monte_carlo_localize, LocalizeError, PipelineConfig, StageTimings,
};
use crate::posediff::{
    load_diffusion_checkpoint, pose_to_target_vec, save_diffusion_checkpoint, train_diffusion,
    BetaSchedule, DiffusionError, DiffusionModel,
};
use crate::radiance::{
    load_nerf_checkpoint, save_nerf_checkpoint, train_nerf, ImageBuffer, RadianceError,
    RadianceField,
};

/// File names inside a run directory.
pub const SCENE_SPEC: &str = "scene.json";
pub const NERF_CHECKPOINT: &str = "nerf.ckpt";
pub const DIFFUSION_CHECKPOINT: &str = "diffusion.ckpt";
pub const NERF_LOSS_LOG: &str = "nerf_loss.csv";
pub const DIFFUSION_LOSS_LOG: &str = "diffusion_loss.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const ABLATE_CSV: &str = "ablate.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const QUERY_DIR: &str = "queries";

/// Version stamp carried in the first column of every CSV this module writes.
pub const CSV_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("missing artifact {0}: run the producing stage first")]
    MissingArtifact(PathBuf),
    #[error("the test split has no frames to evaluate")]
    EmptyQuerySet,
    #[error("cannot aggregate an empty error list")]
    EmptyErrorSet,
    #[error("bad thresholds: {0}")]
    BadThresholds(String),
    #[error("bad sweep axis {0:?}: expected particles, train_images or diffusion_steps")]
    BadAxis(String),
    #[error(
        "bad method {0:?}: expected full, diffusion_only, monte_carlo, integrated or plain"
    )]
    BadMethod(String),
    #[error("bad sweep value: {0}")]
    BadSweepValue(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Radiance(#[from] RadianceError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Localize(#[from] LocalizeError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

// ---------------------------------------------------------------------------
// Success metrics
// ---------------------------------------------------------------------------

/// An ordered list of `[translation, rotation_degrees]` success thresholds,
/// strictly increasing in both coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdSpec {
    pairs: Vec<[f64; 2]>,
}

impl Default for ThresholdSpec {
    fn default() -> Self {
        Self { pairs: vec![[0.01, 2.0], [0.025, 5.0], [0.05, 10.0], [0.1, 20.0]] }
    }
}

impl ThresholdSpec {
    pub fn new(pairs: Vec<[f64; 2]>) -> Result<Self, EvalError> {
        if pairs.is_empty() {
            return Err(EvalError::BadThresholds("at least one pair is required".into()));
        }
        for p in &pairs {
            if !(p[0] > 0.0 && p[1] > 0.0) || !p[0].is_finite() || !p[1].is_finite() {
                return Err(EvalError::BadThresholds(format!(
                    "pair ({}, {}) must be finite and positive",
                    p[0], p[1]
                )));
            }
        }
        for w in pairs.windows(2) {
            if !(w[1][0] > w[0][0] && w[1][1] > w[0][1]) {
                return Err(EvalError::BadThresholds(format!(
                    "({}, {}) does not strictly dominate ({}, {})",
                    w[1][0], w[1][1], w[0][0], w[0][1]
                )));
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[[f64; 2]] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Per-pair success flags for one (translation, rotation) error sample.
    /// Both coordinates must sit at or below the pair (boundary inclusive).
    pub fn successes(&self, terr: f64, rerr: f64) -> Vec<bool> {
        self.pairs.iter().map(|&[t, r]| terr <= t && rerr <= r).collect()
    }
}

/// Percentage of error samples at or below each threshold pair. A sample
/// counts as a success only when translation and rotation both pass.
pub fn success_rates(errors: &[(f64, f64)], spec: &ThresholdSpec) -> Result<Vec<f64>, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::EmptyErrorSet);
    }
    let n = errors.len() as f64;
    Ok(spec
        .pairs
        .iter()
        .map(|&[t, r]| {
            let hits = errors.iter().filter(|&&(te, re)| te <= t && re <= r).count();
            100.0 * hits as f64 / n
        })
        .collect())
}

/// Median by sorting under total order; even-length lists average the two
/// middle elements.
pub fn median(values: &[f64]) -> Result<f64, EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptyErrorSet);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Derives a per-query RNG seed from the evaluation seed and the frame id
/// with a SplitMix64-style finalizer, so neighbouring seeds and frames get
/// decorrelated particle streams.
pub fn mix_seed(base: u64, frame: u64) -> u64 {
    let mut z = base ^ frame.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Run directory stages
// ---------------------------------------------------------------------------

/// Short label identifying a scene in reports, e.g. `textured-7`.
pub fn scene_label(scene: &SceneConfig) -> String {
    let mode = match scene.mode {
        crate::datasets::SceneMode::Textured => "textured",
        crate::datasets::SceneMode::Textureless => "textureless",
        crate::datasets::SceneMode::Smooth => "smooth",
    };
    format!("{mode}-{}", scene.seed)
}

/// Writes the procedural scene recipe into the run directory.
pub fn write_scene_spec(dir: &Path, scene: &SceneConfig) -> Result<(), EvalError> {
    let json = serde_json::to_vec_pretty(scene).expect("scene config serializes");
    atomic_write(&dir.join(SCENE_SPEC), &json)?;
    Ok(())
}

/// Reads the scene recipe back; missing file reports which stage to run.
pub fn read_scene_spec(dir: &Path) -> Result<SceneConfig, EvalError> {
    let path = dir.join(SCENE_SPEC);
    if !path.exists() {
        return Err(EvalError::MissingArtifact(path));
    }
    let text = std::fs::read_to_string(&path)
        .map_err(|source| DatasetError::Io { path: path.clone(), source })?;
    let spec: SceneConfig =
        serde_json::from_str(&text).map_err(|source| DatasetError::Json { path, source })?;
    Ok(spec)
}

/// Renders the reference views described by `scene.json` and writes the
/// posed dataset (transforms, split, images) into the run directory.
/// Returns the number of rendered views.
pub fn render_reference_views(dir: &Path) -> Result<usize, EvalError> {
    let spec = read_scene_spec(dir)?;
    let scene = generate_scene(spec.seed, spec.mode);
    let camera = CameraModel::from_angle_x(spec.fov_deg.to_radians(), spec.width, spec.height)?;
    let poses = sample_cameras(spec.camera_seed, spec.train_views + spec.test_views);
    let images =
        render_ground_truth(&scene, &poses, &camera, spec.render_samples, spec.near, spec.far);
    save_dataset(dir, &camera, &poses, &images, spec.train_views)?;
    Ok(poses.len())
}

/// Outcome of a training stage.
#[derive(Clone, Copy, Debug)]
pub struct TrainSummary {
    pub iters: usize,
    pub final_loss: f64,
}

fn write_loss_log(path: &Path, log: &[(usize, f64)]) -> Result<(), EvalError> {
    let mut csv = format!("schema_v{CSV_SCHEMA},iter,loss\n");
    for &(iter, loss) in log {
        csv.push_str(&format!("{CSV_SCHEMA},{iter},{loss:.6}\n"));
    }
    atomic_write(path, csv.as_bytes())?;
    Ok(())
}

fn load_raw_dataset(dir: &Path) -> Result<(PosedDataset, Vec<ImageBuffer>), EvalError> {
    let tpath = dir.join("transforms.json");
    if !tpath.exists() {
        return Err(EvalError::MissingArtifact(tpath));
    }
    Ok(load_dataset(dir)?)
}

/// Trains the radiance field on the run's training split and writes
/// `nerf.ckpt` plus the loss log.
pub fn train_nerf_stage(
    dir: &Path,
    cfg: &crate::radiance::NerfTrainConfig,
) -> Result<TrainSummary, EvalError> {
    let (raw, images) = load_raw_dataset(dir)?;
    let (normalized, _) = normalize_poses(&raw)?;
    let trained = train_nerf::<f32>(&normalized, &images, cfg)?;
    save_nerf_checkpoint(&dir.join(NERF_CHECKPOINT), &trained.field, &trained.normalization)?;
    write_loss_log(&dir.join(NERF_LOSS_LOG), &trained.loss_log)?;
    let final_loss = trained.loss_log.last().map_or(f64::NAN, |&(_, l)| l);
    Ok(TrainSummary { iters: trained.loss_log.len(), final_loss })
}

/// Trains the pose prior on the run's training split and writes
/// `diffusion.ckpt` plus the loss log.
pub fn train_diffusion_stage(
    dir: &Path,
    cfg: &crate::posediff::DiffusionTrainConfig,
) -> Result<TrainSummary, EvalError> {
    let (raw, images) = load_raw_dataset(dir)?;
    let (normalized, _) = normalize_poses(&raw)?;
    let trained = train_diffusion::<f32>(&normalized, &images, cfg)?;
    save_diffusion_checkpoint(
        &dir.join(DIFFUSION_CHECKPOINT),
        &trained.model,
        &trained.normalization,
    )?;
    write_loss_log(&dir.join(DIFFUSION_LOSS_LOG), &trained.loss_log)?;
    let final_loss = trained.loss_log.last().map_or(f64::NAN, |&(_, l)| l);
    Ok(TrainSummary { iters: trained.loss_log.len(), final_loss })
}

/// Everything the evaluation stages need, loaded from one run directory.
#[derive(Clone)]
pub struct RunArtifacts {
    /// Dataset with raw (world-frame) poses, exactly as rendered.
    pub dataset: PosedDataset,
    pub images: Vec<ImageBuffer>,
    pub camera: CameraModel,
    pub field: RadianceField<f32>,
    pub field_norm: SceneNormalization,
    pub model: DiffusionModel<f32>,
    pub model_norm: SceneNormalization,
}

pub fn load_run_artifacts(dir: &Path) -> Result<RunArtifacts, EvalError> {
    let (dataset, images) = load_raw_dataset(dir)?;
    let nerf_path = dir.join(NERF_CHECKPOINT);
    if !nerf_path.exists() {
        return Err(EvalError::MissingArtifact(nerf_path));
    }
    let (field, field_norm) = load_nerf_checkpoint::<f32>(&nerf_path)?;
    let diff_path = dir.join(DIFFUSION_CHECKPOINT);
    if !diff_path.exists() {
        return Err(EvalError::MissingArtifact(diff_path));
    }
    let (model, model_norm) = load_diffusion_checkpoint::<f32>(&diff_path)?;
    let camera = dataset.camera;
    Ok(RunArtifacts { dataset, images, camera, field, field_norm, model, model_norm })
}

// ---------------------------------------------------------------------------
// Methods and per-query evaluation
// ---------------------------------------------------------------------------

/// Localization variants the evaluation stages compare.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// The full pipeline exactly as configured.
    Full,
    /// Best raw particle by photometric error; no refinement.
    DiffusionOnly,
    /// Uniform pose samples followed by the same scoring and refinement.
    MonteCarlo,
    /// Full pipeline with the inner refinement loop forced on.
    Integrated,
    /// Full pipeline with the inner refinement loop forced off.
    Plain,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::DiffusionOnly => "diffusion_only",
            Method::MonteCarlo => "monte_carlo",
            Method::Integrated => "integrated",
            Method::Plain => "plain",
        }
    }

    pub fn parse(text: &str) -> Result<Self, EvalError> {
        match text.replace('-', "_").as_str() {
            "full" => Ok(Method::Full),
            "diffusion_only" => Ok(Method::DiffusionOnly),
            "monte_carlo" => Ok(Method::MonteCarlo),
            "integrated" => Ok(Method::Integrated),
            "plain" => Ok(Method::Plain),
            _ => Err(EvalError::BadMethod(text.to_string())),
        }
    }

    fn pipeline(self, base: &PipelineConfig) -> PipelineConfig {
        let mut p = base.clone();
        match self {
            Method::Full | Method::MonteCarlo => {}
            Method::DiffusionOnly => p.diffusion_only = true,
            Method::Integrated => {
                p.integrated.enabled = true;
                p.no_integration = false;
            }
            Method::Plain => p.no_integration = true,
        }
        p
    }
}

/// Methods compared by the `evaluate` stage.
pub const EVALUATE_METHODS: [Method; 3] = [Method::Full, Method::DiffusionOnly, Method::MonteCarlo];
/// Methods compared by the `ablate` stage.
pub const ABLATE_METHODS: [Method; 2] = [Method::Integrated, Method::Plain];

/// One localized query, with errors measured in the normalized frame the
/// field and prior operate in.
#[derive(Clone, Debug)]
pub struct QueryOutcome {
    /// Absolute frame index in the dataset.
    pub frame: usize,
    pub query_seed: u64,
    pub pose: Pose,
    /// Translation error of the best-scored particle before refinement.
    pub pre_terr: f64,
    pub terr: f64,
    pub rerr: f64,
    pub timings: StageTimings,
}

#[allow(clippy::too_many_arguments)]
fn localize_frame(
    field: &RadianceField<f32>,
    field_norm: &SceneNormalization,
    model: &DiffusionModel<f32>,
    model_norm: &SceneNormalization,
    dataset: &PosedDataset,
    images: &[ImageBuffer],
    camera: &CameraModel,
    pcfg: &PipelineConfig,
    method: Method,
    base_seed: u64,
    frame: usize,
) -> Result<QueryOutcome, EvalError> {
    let target = &images[frame];
    let query_seed = mix_seed(base_seed, frame as u64);
    let result = match method {
        Method::MonteCarlo => monte_carlo_localize(field, target, camera, pcfg, query_seed)?,
        _ => localize(
            field, field_norm, model, model_norm, target, camera, pcfg, query_seed,
        )?,
    };
    let gt = field_norm.apply_pose(&dataset.frames[frame].pose);
    let pre_pose = result.subset.first().map_or(result.pose, |c| c.pose);
    Ok(QueryOutcome {
        frame,
        query_seed,
        pose: result.pose,
        pre_terr: translation_error(&pre_pose, &gt),
        terr: translation_error(&result.pose, &gt),
        rerr: rotation_error_deg(&result.pose.rotation, &gt.rotation),
        timings: result.timings,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_queries_with(
    field: &RadianceField<f32>,
    field_norm: &SceneNormalization,
    model: &DiffusionModel<f32>,
    model_norm: &SceneNormalization,
    dataset: &PosedDataset,
    images: &[ImageBuffer],
    camera: &CameraModel,
    pcfg: &PipelineConfig,
    method: Method,
    base_seed: u64,
    max_queries: usize,
) -> Result<Vec<QueryOutcome>, EvalError> {
    let mut frames: Vec<usize> = dataset.test_idx.clone();
    if max_queries > 0 {
        frames.truncate(max_queries);
    }
    if frames.is_empty() {
        return Err(EvalError::EmptyQuerySet);
    }
    let pcfg = method.pipeline(pcfg);
    frames
        .par_iter()
        .map(|&frame| {
            localize_frame(
                field, field_norm, model, model_norm, dataset, images, camera, &pcfg, method,
                base_seed, frame,
            )
        })
        .collect()
}

/// Localizes every test frame (or the first `max_queries` of them) with one
/// method and one evaluation seed. Queries run in parallel; outcomes are
/// returned in test-split order and are independent of the thread count.
pub fn run_queries(
    arts: &RunArtifacts,
    pcfg: &PipelineConfig,
    method: Method,
    base_seed: u64,
    max_queries: usize,
) -> Result<Vec<QueryOutcome>, EvalError> {
    run_queries_with(
        &arts.field,
        &arts.field_norm,
        &arts.model,
        &arts.model_norm,
        &arts.dataset,
        &arts.images,
        &arts.camera,
        pcfg,
        method,
        base_seed,
        max_queries,
    )
}

/// Localizes a single test frame (by position in the test split).
pub fn localize_single(
    arts: &RunArtifacts,
    pcfg: &PipelineConfig,
    method: Method,
    base_seed: u64,
    test_position: usize,
) -> Result<QueryOutcome, EvalError> {
    let frame = *arts
        .dataset
        .test_idx
        .get(test_position)
        .ok_or(EvalError::EmptyQuerySet)?;
    localize_frame(
        &arts.field,
        &arts.field_norm,
        &arts.model,
        &arts.model_norm,
        &arts.dataset,
        &arts.images,
        &arts.camera,
        &method.pipeline(pcfg),
        method,
        base_seed,
        frame,
    )
}

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct EvalRow {
    pub method: &'static str,
    /// Evaluation seed as text; the per-method summary row uses `"mean"`.
    pub seed: String,
    pub sr: Vec<f64>,
    pub median_terr: f64,
    pub median_rerr: f64,
    pub t_diffusion_ms: f64,
    pub t_refine_ms: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub scene: String,
    pub split: String,
    pub thresholds: ThresholdSpec,
    pub rows: Vec<EvalRow>,
    /// Set when the run was pinned to one thread; timing columns serialize
    /// as zero so repeated runs are byte-identical.
    pub timings_zeroed: bool,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("schema_v{CSV_SCHEMA},method,scene,split,seed");
        for k in 1..=self.thresholds.len() {
            out.push_str(&format!(",sr_{k}"));
        }
        out.push_str(",median_terr,median_rerr,t_diffusion_ms,t_refine_ms\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{CSV_SCHEMA},{},{},{},{}",
                row.method, self.scene, self.split, row.seed
            ));
            for sr in &row.sr {
                out.push_str(&format!(",{sr:.1}"));
            }
            let (td, tr) = if self.timings_zeroed {
                (0.0, 0.0)
            } else {
                (row.t_diffusion_ms, row.t_refine_ms)
            };
            out.push_str(&format!(
                ",{:.6},{:.6},{td:.3},{tr:.3}\n",
                row.median_terr, row.median_rerr
            ));
        }
        out
    }
}

/// Timing block of a query record; zeroed under single-threaded runs.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TimingsOut {
    pub diffusion_ms: f64,
    pub scoring_ms: f64,
    pub refinement_ms: f64,
    pub total_ms: f64,
}

impl TimingsOut {
    fn new(t: &StageTimings, zeroed: bool) -> Self {
        if zeroed {
            Self { diffusion_ms: 0.0, scoring_ms: 0.0, refinement_ms: 0.0, total_ms: 0.0 }
        } else {
            Self {
                diffusion_ms: t.diffusion_ms,
                scoring_ms: t.scoring_ms,
                refinement_ms: t.refinement_ms,
                total_ms: t.total_ms,
            }
        }
    }
}

/// One localized query as written to `queries/*.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QueryRecord {
    pub schema: u32,
    pub method: String,
    pub scene: String,
    pub split: String,
    pub seed: u64,
    pub query_seed: u64,
    pub frame: usize,
    /// Estimated pose: translation followed by the rotation quaternion
    /// (vector part then scalar), in the normalized frame.
    pub pose: [f64; 7],
    pub gt_pose: [f64; 7],
    pub terr: f64,
    pub rerr: f64,
    pub thresholds: Vec<[f64; 2]>,
    pub success: Vec<bool>,
    pub timings: TimingsOut,
    pub config_hash: String,
}

/// Writes one query record under `queries/` and returns its path.
#[allow(clippy::too_many_arguments)]
pub fn write_query_record_file(
    dir: &Path,
    scene: &str,
    split: &str,
    method: Method,
    seed: u64,
    spec: &ThresholdSpec,
    outcome: &QueryOutcome,
    gt_pose: &Pose,
    config_hash: &str,
    zero_timings: bool,
) -> Result<PathBuf, EvalError> {
    let record = QueryRecord {
        schema: CSV_SCHEMA,
        method: method.label().to_string(),
        scene: scene.to_string(),
        split: split.to_string(),
        seed,
        query_seed: outcome.query_seed,
        frame: outcome.frame,
        pose: pose_to_target_vec(&outcome.pose),
        gt_pose: pose_to_target_vec(gt_pose),
        terr: outcome.terr,
        rerr: outcome.rerr,
        thresholds: spec.pairs().to_vec(),
        success: spec.successes(outcome.terr, outcome.rerr),
        timings: TimingsOut::new(&outcome.timings, zero_timings),
        config_hash: config_hash.to_string(),
    };
    let name = format!("{}-s{}-f{:04}.json", method.label(), seed, outcome.frame);
    let path = dir.join(QUERY_DIR).join(name);
    let json = serde_json::to_vec_pretty(&record).expect("query record serializes");
    atomic_write(&path, &json)?;
    Ok(path)
}

#[allow(clippy::too_many_arguments)]
fn write_query_records(
    dir: &Path,
    scene: &str,
    split: &str,
    method: Method,
    seed: u64,
    spec: &ThresholdSpec,
    outcomes: &[QueryOutcome],
    gt: impl Fn(usize) -> Pose,
    config_hash: &str,
    zero_timings: bool,
) -> Result<(), EvalError> {
    for o in outcomes {
        write_query_record_file(
            dir,
            scene,
            split,
            method,
            seed,
            spec,
            o,
            &gt(o.frame),
            config_hash,
            zero_timings,
        )?;
    }
    Ok(())
}

fn summarize(
    method: Method,
    seed_label: String,
    outcomes: &[QueryOutcome],
    spec: &ThresholdSpec,
) -> Result<EvalRow, EvalError> {
    let errors: Vec<(f64, f64)> = outcomes.iter().map(|o| (o.terr, o.rerr)).collect();
    let sr = success_rates(&errors, spec)?;
    let terrs: Vec<f64> = outcomes.iter().map(|o| o.terr).collect();
    let rerrs: Vec<f64> = outcomes.iter().map(|o| o.rerr).collect();
    let tdiff: Vec<f64> = outcomes.iter().map(|o| o.timings.diffusion_ms).collect();
    let trefine: Vec<f64> = outcomes.iter().map(|o| o.timings.refinement_ms).collect();
    Ok(EvalRow {
        method: method.label(),
        seed: seed_label,
        sr,
        median_terr: median(&terrs)?,
        median_rerr: median(&rerrs)?,
        t_diffusion_ms: median(&tdiff)?,
        t_refine_ms: median(&trefine)?,
    })
}

fn mean_row(method: Method, rows: &[EvalRow]) -> EvalRow {
    let n = rows.len() as f64;
    let k = rows[0].sr.len();
    let sr = (0..k)
        .map(|i| rows.iter().map(|r| r.sr[i]).sum::<f64>() / n)
        .collect();
    EvalRow {
        method: method.label(),
        seed: "mean".to_string(),
        sr,
        median_terr: rows.iter().map(|r| r.median_terr).sum::<f64>() / n,
        median_rerr: rows.iter().map(|r| r.median_rerr).sum::<f64>() / n,
        t_diffusion_ms: rows.iter().map(|r| r.t_diffusion_ms).sum::<f64>() / n,
        t_refine_ms: rows.iter().map(|r| r.t_refine_ms).sum::<f64>() / n,
    }
}

/// Runs every (method, seed) combination over the test split, producing one
/// CSV row per combination plus a per-method mean row. When `out_dir` is
/// given, writes `csv_name` and one JSON record per query under `queries/`.
#[allow(clippy::too_many_arguments)]
pub fn run_evaluation(
    arts: &RunArtifacts,
    cfg: &AppConfig,
    methods: &[Method],
    scene_label: &str,
    out_dir: Option<&Path>,
    csv_name: &str,
    threads: usize,
) -> Result<EvalReport, EvalError> {
    let spec = ThresholdSpec::new(cfg.eval.thresholds.clone())?;
    let zeroed = threads == 1;
    let config_hash = cfg.hash_hex();
    let split = "test";
    let mut rows = Vec::new();
    for &method in methods {
        let mut seed_rows = Vec::new();
        for &seed in &cfg.eval.seeds {
            let outcomes =
                run_queries(arts, &cfg.pipeline, method, seed, cfg.eval.max_queries)?;
            if let Some(dir) = out_dir {
                write_query_records(
                    dir,
                    scene_label,
                    split,
                    method,
                    seed,
                    &spec,
                    &outcomes,
                    |frame| arts.field_norm.apply_pose(&arts.dataset.frames[frame].pose),
                    &config_hash,
                    zeroed,
                )?;
            }
            seed_rows.push(summarize(method, seed.to_string(), &outcomes, &spec)?);
        }
        let mean = mean_row(method, &seed_rows);
        rows.extend(seed_rows);
        rows.push(mean);
    }
    let report = EvalReport {
        scene: scene_label.to_string(),
        split: split.to_string(),
        thresholds: spec,
        rows,
        timings_zeroed: zeroed,
    };
    if let Some(dir) = out_dir {
        atomic_write(&dir.join(csv_name), report.to_csv().as_bytes())?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// Pipeline parameter varied by [`run_sweep`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Particles,
    TrainImages,
    DiffusionSteps,
}

impl SweepAxis {
    pub fn label(self) -> &'static str {
        match self {
            SweepAxis::Particles => "particles",
            SweepAxis::TrainImages => "train_images",
            SweepAxis::DiffusionSteps => "diffusion_steps",
        }
    }

    pub fn parse(text: &str) -> Result<Self, EvalError> {
        match text.replace('-', "_").as_str() {
            "particles" => Ok(SweepAxis::Particles),
            "train_images" => Ok(SweepAxis::TrainImages),
            "diffusion_steps" => Ok(SweepAxis::DiffusionSteps),
            _ => Err(EvalError::BadAxis(text.to_string())),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub axis: &'static str,
    pub value: usize,
    /// Median translation error of the best-scored particle, before any
    /// refinement, pooled over seeds and queries.
    pub median_terr_pre: f64,
    /// Median translation error of the final pose, pooled likewise.
    pub median_terr_post: f64,
    /// Wall-clock time for the whole value (all seeds and queries).
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub timings_zeroed: bool,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            format!("schema_v{CSV_SCHEMA},axis,value,median_terr_pre,median_terr_post,wall_ms\n");
        for row in &self.rows {
            let wall = if self.timings_zeroed { 0.0 } else { row.wall_ms };
            out.push_str(&format!(
                "{CSV_SCHEMA},{},{},{:.6},{:.6},{wall:.3}\n",
                row.axis, row.value, row.median_terr_pre, row.median_terr_post
            ));
        }
        out
    }
}

/// Evaluates the full pipeline while varying one parameter, pooling errors
/// over every configured seed and query. The train-images axis retrains the
/// field and the prior on a truncated training split for each value; the
/// diffusion-steps axis reuses the trained denoiser with a rebuilt noise
/// schedule of the requested length (its conditioning is on the normalized
/// timestep, so chains of any length stay in distribution).
pub fn run_sweep(
    arts: &RunArtifacts,
    cfg: &AppConfig,
    axis: SweepAxis,
    values: &[usize],
    threads: usize,
) -> Result<SweepReport, EvalError> {
    if values.is_empty() {
        return Err(EvalError::BadSweepValue("at least one value is required".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        if value == 0 {
            return Err(EvalError::BadSweepValue(format!(
                "{} = 0 is not a usable setting",
                axis.label()
            )));
        }
        let start = Instant::now();
        let mut pre = Vec::new();
        let mut post = Vec::new();
        match axis {
            SweepAxis::Particles => {
                let mut pcfg = cfg.pipeline.clone();
                pcfg.particles = value;
                pcfg.subset = pcfg.subset.min(value);
                for &seed in &cfg.eval.seeds {
                    let outcomes =
                        run_queries(arts, &pcfg, Method::Full, seed, cfg.eval.max_queries)?;
                    pre.extend(outcomes.iter().map(|o| o.pre_terr));
                    post.extend(outcomes.iter().map(|o| o.terr));
                }
            }
            SweepAxis::DiffusionSteps => {
                let mut model = arts.model.clone();
                model.schedule = BetaSchedule::linear(
                    arts.model.schedule.beta0(),
                    arts.model.schedule.beta_n(),
                    value,
                );
                for &seed in &cfg.eval.seeds {
                    let outcomes = run_queries_with(
                        &arts.field,
                        &arts.field_norm,
                        &model,
                        &arts.model_norm,
                        &arts.dataset,
                        &arts.images,
                        &arts.camera,
                        &cfg.pipeline,
                        Method::Full,
                        seed,
                        cfg.eval.max_queries,
                    )?;
                    pre.extend(outcomes.iter().map(|o| o.pre_terr));
                    post.extend(outcomes.iter().map(|o| o.terr));
                }
            }
            SweepAxis::TrainImages => {
                if value > arts.dataset.train_idx.len() {
                    return Err(EvalError::BadSweepValue(format!(
                        "train_images = {value} exceeds the {} available training frames",
                        arts.dataset.train_idx.len()
                    )));
                }
                let mut sub = arts.dataset.clone();
                sub.train_idx.truncate(value);
                sub.normalization = None;
                let (normalized, norm) = normalize_poses(&sub)?;
                let field = train_nerf::<f32>(&normalized, &arts.images, &cfg.nerf)?.field;
                let model =
                    train_diffusion::<f32>(&normalized, &arts.images, &cfg.diffusion)?.model;
                for &seed in &cfg.eval.seeds {
                    let outcomes = run_queries_with(
                        &field,
                        &norm,
                        &model,
                        &norm,
                        &arts.dataset,
                        &arts.images,
                        &arts.camera,
                        &cfg.pipeline,
                        Method::Full,
                        seed,
                        cfg.eval.max_queries,
                    )?;
                    pre.extend(outcomes.iter().map(|o| o.pre_terr));
                    post.extend(outcomes.iter().map(|o| o.terr));
                }
            }
        }
        rows.push(SweepRow {
            axis: axis.label(),
            value,
            median_terr_pre: median(&pre)?,
            median_terr_post: median(&post)?,
            wall_ms: start.elapsed().as_secs_f64() * 1000.0,
        });
    }
    Ok(SweepReport { rows, timings_zeroed: threads == 1 })
}
