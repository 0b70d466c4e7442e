//! TOML run configuration: one file describes the whole pipeline (deployment
//! scene, capture, fit, policy training, rollout, attacks, object placements).
//! Unknown keys and duplicate keys are rejected; parse errors carry line
//! numbers from the TOML parser.

use crate::attack::AttackConfig;
use crate::field::{FieldError, RigidTransform};
use crate::recon::{CoverageSpec, DeploymentSpec, FitConfig, ObjectKind};
use crate::render::QuadConfig;
use crate::rollout::CameraRig;
use crate::vehicle::{DynamicsModel, DynamicsParams};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config field {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("referenced file does not exist: {0}")]
    MissingFile(PathBuf),
    #[error(transparent)]
    Field(#[from] FieldError),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field, reason: reason.into() }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigSection {
    pub forward_offset: f64,
    pub height: f64,
    pub pitch: f64,
    pub focal: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub near: f64,
    pub far: f64,
}

impl Default for RigSection {
    fn default() -> Self {
        Self {
            forward_offset: 0.1,
            height: 0.4,
            pitch: 0.14,
            focal: 18.0,
            image_width: 32,
            image_height: 32,
            near: 0.05,
            far: 30.0,
        }
    }
}

impl RigSection {
    pub fn to_rig(&self) -> CameraRig {
        CameraRig {
            forward_offset: self.forward_offset,
            height: self.height,
            pitch: self.pitch,
            focal: self.focal,
            image_width: self.image_width,
            image_height: self.image_height,
            near: self.near,
            far: self.far,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptureSection {
    pub n_views: usize,
    pub rig: RigSection,
    pub scene_samples: usize,
    pub background: [f64; 3],
    pub orbit_every: usize,
    pub orbit_radius: f64,
    pub orbit_height: f64,
    pub jitter_std: f64,
    pub seed: u64,
}

impl Default for CaptureSection {
    fn default() -> Self {
        Self {
            n_views: 240,
            rig: RigSection::default(),
            scene_samples: 64,
            background: [0.55, 0.7, 0.85],
            orbit_every: 3,
            orbit_radius: 2.2,
            orbit_height: 1.6,
            jitter_std: 0.05,
            seed: 7,
        }
    }
}

impl CaptureSection {
    pub fn to_coverage(&self) -> CoverageSpec {
        CoverageSpec {
            rig: self.rig.to_rig(),
            quad: QuadConfig {
                scene_samples: self.scene_samples,
                object_samples: 1,
                background: self.background,
            },
            orbit_every: self.orbit_every,
            orbit_radius: self.orbit_radius,
            orbit_height: self.orbit_height,
            jitter_std: self.jitter_std,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_rays: usize,
    pub resolution: [usize; 3],
    pub scene_samples: usize,
    pub init_density_raw: f64,
    pub init_color_raw: f64,
    /// Every k-th capture view is held out of training for PSNR evaluation.
    pub holdout_every: usize,
    pub seed: u64,
}

impl Default for FitSection {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.05,
            batch_rays: 4096,
            resolution: [128, 128, 20],
            scene_samples: 48,
            init_density_raw: -2.0,
            init_color_raw: 0.0,
            holdout_every: 8,
            seed: 3,
        }
    }
}

impl FitSection {
    pub fn to_fit_config(&self, bounds: crate::field::Aabb, background: [f64; 3]) -> FitConfig {
        FitConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_rays: self.batch_rays,
            resolution: self.resolution,
            bounds,
            scene_samples: self.scene_samples,
            background,
            init_density_raw: self.init_density_raw,
            init_color_raw: self.init_color_raw,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    /// 1 = grayscale observation, 3 = RGB.
    pub channels: usize,
    pub hidden: Vec<usize>,
    pub steering_limit: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self { channels: 1, hidden: vec![128, 64], steering_limit: 0.9 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub dataset_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub noise_std: f64,
    pub batch_size: usize,
    pub lateral_std: f64,
    pub heading_std: f64,
    pub expert_lookahead: f64,
    pub expert_gain: f64,
    /// Probability that a training observation includes the placed objects
    /// with randomized texture (robustness to benign clutter).
    pub object_prob: f64,
    /// Std of the randomized pre-activation voxel colors.
    pub object_color_std: f64,
    /// Probability that a training observation is rendered from the fitted
    /// surrogate instead of the deployment scene (sensor-gap robustness).
    pub surrogate_prob: f64,
    pub seed: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            dataset_size: 1200,
            epochs: 200,
            learning_rate: 1e-3,
            noise_std: 0.02,
            batch_size: 32,
            lateral_std: 0.35,
            heading_std: 0.2,
            expert_lookahead: 0.8,
            expert_gain: 2.0,
            object_prob: 0.95,
            object_color_std: 5.0,
            surrogate_prob: 0.4,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutSection {
    pub horizon: usize,
    pub speed: f64,
    pub wheelbase: f64,
    pub dt: f64,
    pub model: DynamicsModel,
    pub rig: RigSection,
    pub scene_samples: usize,
    pub object_samples: usize,
    pub background: [f64; 3],
}

impl Default for RolloutSection {
    fn default() -> Self {
        Self {
            horizon: 140,
            speed: 1.0,
            wheelbase: 0.3,
            dt: 0.1,
            model: DynamicsModel::Dubins,
            rig: RigSection::default(),
            scene_samples: 48,
            object_samples: 24,
            background: [0.55, 0.7, 0.85],
        }
    }
}

impl RolloutSection {
    pub fn dynamics(&self) -> DynamicsParams {
        DynamicsParams { speed: self.speed, wheelbase: self.wheelbase, dt: self.dt, model: self.model }
    }

    pub fn quad(&self) -> QuadConfig {
        QuadConfig {
            scene_samples: self.scene_samples,
            object_samples: self.object_samples,
            background: self.background,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub iterations: usize,
    pub learning_rate: f64,
    pub random_std: f64,
    pub n_initial_poses: usize,
    pub initial_pose_std: f64,
    pub seeds: Vec<u64>,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            iterations: 50,
            learning_rate: 0.1,
            random_std: 5.0,
            n_initial_poses: 1,
            initial_pose_std: 0.1,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl AttackSection {
    pub fn to_attack_config(&self, seed: u64) -> AttackConfig {
        AttackConfig {
            iterations: self.iterations,
            learning_rate: self.learning_rate,
            random_std: self.random_std,
            n_initial_poses: self.n_initial_poses,
            initial_pose_std: self.initial_pose_std,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectPlacement {
    /// Procedural asset kind; ignored when `field_file` is set.
    pub kind: ObjectKind,
    /// Optional snapshot to load instead of authoring procedurally.
    pub field_file: Option<PathBuf>,
    pub resolution: [usize; 3],
    pub color: [f64; 3],
    pub sigma: f64,
    pub position: [f64; 3],
    pub yaw: f64,
    pub scale: f64,
}

impl Default for ObjectPlacement {
    fn default() -> Self {
        Self {
            kind: ObjectKind::Box,
            field_file: None,
            resolution: [16, 16, 16],
            color: [0.5, 0.5, 0.5],
            sigma: 40.0,
            position: [4.0, -1.25, 0.4],
            yaw: 0.0,
            scale: 0.75,
        }
    }
}

impl ObjectPlacement {
    pub fn transform(&self) -> Result<RigidTransform, FieldError> {
        RigidTransform::from_yaw(self.yaw, self.position, self.scale)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Recovery states sampled around the adversarial trajectory.
    pub adv_samples: usize,
    pub seed: u64,
}

impl Default for RetrainSection {
    fn default() -> Self {
        Self { epochs: 25, learning_rate: 5e-4, adv_samples: 200, seed: 17 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub output_dir: PathBuf,
    pub deployment: DeploymentSpec,
    pub capture: CaptureSection,
    pub fit: FitSection,
    pub policy: PolicySection,
    pub training: TrainingSection,
    pub rollout: RolloutSection,
    pub attack: AttackSection,
    pub objects: Vec<ObjectPlacement>,
    pub retrain: RetrainSection,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            deployment: DeploymentSpec::default(),
            capture: CaptureSection::default(),
            fit: FitSection::default(),
            policy: PolicySection::default(),
            training: TrainingSection::default(),
            rollout: RolloutSection::default(),
            attack: AttackSection::default(),
            objects: [2.5, 4.0, 5.5]
                .iter()
                .map(|&x| ObjectPlacement { position: [x, -1.25, 0.4], ..ObjectPlacement::default() })
                .collect(),
            retrain: RetrainSection::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self, base_dir: &Path) -> Result<(), ConfigError> {
        self.deployment
            .validate()
            .map_err(|e| invalid("deployment", e.to_string()))?;
        if self.capture.n_views == 0 {
            return Err(invalid("capture.n_views", "must be >= 1"));
        }
        if self.fit.resolution.iter().any(|&r| r < 2) {
            return Err(invalid("fit.resolution", "axes must be >= 2"));
        }
        if !(self.fit.learning_rate > 0.0) {
            return Err(invalid("fit.learning_rate", "must be > 0"));
        }
        if self.policy.channels != 1 && self.policy.channels != 3 {
            return Err(invalid("policy.channels", "must be 1 or 3"));
        }
        if !(self.policy.steering_limit > 0.0) {
            return Err(invalid("policy.steering_limit", "must be > 0"));
        }
        if self.training.dataset_size == 0 || self.training.batch_size == 0 {
            return Err(invalid("training", "dataset_size and batch_size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.training.object_prob) {
            return Err(invalid("training.object_prob", "must be in [0, 1]"));
        }
        if !(self.training.object_color_std >= 0.0) {
            return Err(invalid("training.object_color_std", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.training.surrogate_prob) {
            return Err(invalid("training.surrogate_prob", "must be in [0, 1]"));
        }
        if self.rollout.horizon == 0 {
            return Err(invalid("rollout.horizon", "must be >= 1"));
        }
        self.rollout
            .dynamics()
            .validate()
            .map_err(|e| invalid("rollout", e.to_string()))?;
        if self.attack.iterations == 0 || !(self.attack.learning_rate > 0.0) {
            return Err(invalid("attack", "iterations >= 1 and learning_rate > 0 required"));
        }
        if self.attack.seeds.is_empty() {
            return Err(invalid("attack.seeds", "need at least one seed"));
        }
        if self.objects.is_empty() {
            return Err(invalid("objects", "need at least one adversarial object"));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !(o.scale > 0.0) {
                return Err(invalid("objects.scale", format!("object {i}: must be > 0")));
            }
            if o.field_file.is_none() && !(o.sigma > 0.0) {
                return Err(invalid("objects.sigma", format!("object {i}: must be > 0")));
            }
            if let Some(f) = &o.field_file {
                let p = if f.is_absolute() { f.clone() } else { base_dir.join(f) };
                if !p.exists() {
                    return Err(ConfigError::MissingFile(p));
                }
            }
        }
        Ok(())
    }
}

/// Parse and validate a TOML scene config. `base_dir` resolves relative file
/// references (typically the config file's directory).
pub fn parse_scene_config(text: &str, base_dir: &Path) -> Result<SceneConfig, ConfigError> {
    let cfg: SceneConfig = toml::from_str(text)?;
    cfg.validate(base_dir)?;
    Ok(cfg)
}

/// Canonical serialized form used for hashing: independent of the input
/// file's formatting and comments.
pub fn canonical_toml(cfg: &SceneConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}

/// SHA-256 of the canonical config serialization, hex-encoded. The output
/// directory is excluded: where artifacts land is not part of the scenario.
pub fn config_hash(cfg: &SceneConfig) -> String {
    use sha2::{Digest, Sha256};
    let mut canon = cfg.clone();
    canon.output_dir = PathBuf::new();
    let mut h = Sha256::new();
    h.update(canonical_toml(&canon).as_bytes());
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}
