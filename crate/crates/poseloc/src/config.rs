//! Run configuration: one TOML file with a section per pipeline stage.
//!
//! Every field defaults to the in-code `Default` value, so an empty file (or
//! no `--config` at all) reproduces the reference setup and a file may
//! override any subset of keys. The `[refine]` section feeds both the final
//! refinement stage and the pipeline's inner loop; a nested
//! `[pipeline.refinement]` table is overwritten by it when the file is
//! loaded, so there is a single source of truth for refinement settings.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::SceneMode;
use crate::localizer::PipelineConfig;
use crate::posediff::DiffusionTrainConfig;
use crate::radiance::NerfTrainConfig;
use crate::refine::RefinementConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("bad config value: {0}")]
    Invalid(String),
}

/// Procedural scene and ground-truth rendering settings (`[scene]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub mode: SceneMode,
    /// Seed for the procedural scene content.
    pub seed: u64,
    /// Seed for the camera trajectory (independent of scene content).
    pub camera_seed: u64,
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    pub train_views: usize,
    pub test_views: usize,
    /// Per-ray sample count for the reference renders (at least 256).
    pub render_samples: usize,
    /// Ray bounds for the reference renders, in world units.
    pub near: f64,
    pub far: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            mode: SceneMode::Textured,
            seed: 7,
            camera_seed: 101,
            width: 64,
            height: 64,
            fov_deg: 70.0,
            train_views: 50,
            test_views: 25,
            render_samples: 256,
            near: 0.02,
            far: 1.6,
        }
    }
}

/// Evaluation settings (`[eval]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Localization seeds; the report carries one row per seed plus a mean row.
    pub seeds: Vec<u64>,
    /// `[translation, rotation_degrees]` success thresholds, each coordinate
    /// strictly increasing from one pair to the next.
    pub thresholds: Vec<[f64; 2]>,
    /// Cap on the number of test queries per seed (0 = every test frame).
    pub max_queries: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            thresholds: vec![[0.01, 2.0], [0.025, 5.0], [0.05, 10.0], [0.1, 20.0]],
            max_queries: 0,
        }
    }
}

/// Whole-run configuration; the TOML sections are `[scene]`, `[nerf]`,
/// `[diffusion]`, `[pipeline]`, `[refine]` and `[eval]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub scene: SceneConfig,
    pub nerf: NerfTrainConfig,
    pub diffusion: DiffusionTrainConfig,
    pub pipeline: PipelineConfig,
    pub refine: RefinementConfig,
    pub eval: EvalConfig,
}

impl AppConfig {
    /// Loads a config file, or the defaults when no path is given, and
    /// resolves the `[refine]` section into the pipeline.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            None => Self::default(),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|source| ConfigError::Io { path: p.to_path_buf(), source })?;
                toml::from_str(&text).map_err(|source| ConfigError::Parse {
                    path: p.to_path_buf(),
                    source: Box::new(source),
                })?
            }
        };
        cfg.pipeline.refinement = cfg.refine.clone();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Structural checks that do not depend on any artifact being present.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.scene;
        if s.width < 4 || s.height < 4 {
            return Err(ConfigError::Invalid(format!(
                "scene resolution {}x{} is below the 4x4 minimum",
                s.width, s.height
            )));
        }
        if !(s.fov_deg > 0.0 && s.fov_deg < 180.0) {
            return Err(ConfigError::Invalid(format!(
                "field of view {} degrees is outside (0, 180)",
                s.fov_deg
            )));
        }
        if s.train_views == 0 {
            return Err(ConfigError::Invalid("at least one training view is required".into()));
        }
        if s.render_samples < 256 {
            return Err(ConfigError::Invalid(format!(
                "reference renders need at least 256 samples per ray, got {}",
                s.render_samples
            )));
        }
        if !(s.near > 0.0 && s.near < s.far) {
            return Err(ConfigError::Invalid(format!(
                "scene ray bounds [{}, {}] are not ordered positives",
                s.near, s.far
            )));
        }
        if self.eval.seeds.is_empty() {
            return Err(ConfigError::Invalid("eval needs at least one seed".into()));
        }
        let t = &self.eval.thresholds;
        if t.is_empty() {
            return Err(ConfigError::Invalid("eval needs at least one threshold pair".into()));
        }
        for w in t.windows(2) {
            if !(w[1][0] > w[0][0] && w[1][1] > w[0][1]) {
                return Err(ConfigError::Invalid(format!(
                    "thresholds must be strictly increasing in both coordinates: \
                     ({}, {}) does not follow ({}, {})",
                    w[1][0], w[1][1], w[0][0], w[0][1]
                )));
            }
        }
        for pair in t {
            if !(pair[0] > 0.0 && pair[1] > 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "threshold pair ({}, {}) must be positive",
                    pair[0], pair[1]
                )));
            }
        }
        Ok(())
    }

    /// 64-bit FNV-1a digest of the canonical JSON serialization, used to
    /// stamp result files with the exact configuration that produced them.
    pub fn hash_hex(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialization is infallible");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }
}

/// 64-bit FNV-1a over a byte string.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_and_no_file_both_give_the_defaults() {
        let parsed: AppConfig = toml::from_str("").unwrap();
        assert_eq!(parsed, AppConfig::default());
        assert_eq!(AppConfig::load(None).unwrap(), AppConfig::default());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = AppConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: AppConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_override_keeps_the_other_fields() {
        let cfg: AppConfig = toml::from_str(
            "[pipeline]\nparticles = 7\n\n[scene]\nmode = \"textureless\"\nseed = 99\n",
        )
        .unwrap();
        assert_eq!(cfg.pipeline.particles, 7);
        assert_eq!(cfg.pipeline.steps, AppConfig::default().pipeline.steps);
        assert_eq!(cfg.scene.mode, SceneMode::Textureless);
        assert_eq!(cfg.scene.seed, 99);
        assert_eq!(cfg.scene.width, 64);
        assert_eq!(cfg.nerf, AppConfig::default().nerf);
    }

    #[test]
    fn refine_section_feeds_the_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[refine]\nlr = 0.1\nsteps = 17\n").unwrap();
        let cfg = AppConfig::load(Some(&path)).unwrap();
        assert_eq!(cfg.refine.lr, 0.1);
        assert_eq!(cfg.pipeline.refinement.lr, 0.1);
        assert_eq!(cfg.pipeline.refinement.steps, 17);
        // Untouched keys keep their defaults.
        assert_eq!(cfg.refine.keypoints, RefinementConfig::default().keypoints);
    }

    #[test]
    fn malformed_and_missing_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.toml");
        std::fs::write(&bad, "[scene\nmode=").unwrap();
        assert!(matches!(AppConfig::load(Some(&bad)), Err(ConfigError::Parse { .. })));
        let missing = dir.path().join("nope.toml");
        assert!(matches!(AppConfig::load(Some(&missing)), Err(ConfigError::Io { .. })));
    }

    #[test]
    fn validation_rejects_bad_shapes() {
        let mut cfg = AppConfig::default();
        cfg.scene.render_samples = 16;
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));

        let mut cfg = AppConfig::default();
        cfg.eval.thresholds = vec![[0.01, 2.0], [0.025, 2.0]];
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));

        let mut cfg = AppConfig::default();
        cfg.eval.thresholds = vec![[0.05, 10.0], [0.01, 2.0]];
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));

        let mut cfg = AppConfig::default();
        cfg.eval.seeds.clear();
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));

        let mut cfg = AppConfig::default();
        cfg.scene.fov_deg = 180.0;
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));

        assert!(AppConfig::default().validate().is_ok());
    }

    #[test]
    fn fnv_digest_matches_the_published_vectors() {
        // Reference values for the 64-bit FNV-1a parameters.
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = AppConfig::default().hash_hex();
        let b = AppConfig::default().hash_hex();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        let mut changed = AppConfig::default();
        changed.pipeline.particles += 1;
        assert_ne!(changed.hash_hex(), a);
    }
}
