//! Run orchestration: executes the pipeline stages (build, capture, fit,
//! train, attack, transfer, evaluate, export) against a scene config, with
//! every stage output persisted so partial pipelines compose and resume.

use crate::attack::{gradient_attack, random_search_attack, AttackResult, AttackScenario};
use crate::config::{config_hash, ObjectPlacement, SceneConfig};
use crate::field::{RigidTransform, VoxelField};
use crate::io;
use crate::policy::{expert_control, generate_dataset, train_policy_bc, ExpertConfig, ImitationDataset, InputSpec, PolicyNet};
use crate::recon::{build_deployment_scene, build_object_field, capture_posed_images, evaluate_fit, fit_field, PosedImageSet};
use crate::render::{render_frame, QuadConfig};
use crate::rollout::{rollout_closed_loop, total_cte, Controller, ReferencePath, RolloutConfig, SensorMode, Trajectory};
use crate::vehicle::VehicleState;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Io(#[from] io::IoError),
    #[error(transparent)]
    File(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Recon(#[from] crate::recon::ReconError),
    #[error(transparent)]
    Attack(#[from] crate::attack::AttackError),
    #[error(transparent)]
    Rollout(#[from] crate::rollout::RolloutError),
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
    #[error(transparent)]
    FieldErr(#[from] crate::field::FieldError),
    #[error("missing artifact {path}: run the `{stage}` stage first")]
    MissingArtifact { stage: &'static str, path: PathBuf },
    #[error("unknown stage name: {0}")]
    UnknownStage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Build,
    Capture,
    Fit,
    Train,
    Attack,
    Transfer,
    Evaluate,
    Export,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Build,
        Stage::Capture,
        Stage::Fit,
        Stage::Train,
        Stage::Attack,
        Stage::Transfer,
        Stage::Evaluate,
        Stage::Export,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Build => "build",
            Stage::Capture => "capture",
            Stage::Fit => "fit",
            Stage::Train => "train",
            Stage::Attack => "attack",
            Stage::Transfer => "transfer",
            Stage::Evaluate => "evaluate",
            Stage::Export => "export",
        }
    }
}

impl FromStr for Stage {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .iter()
            .find(|st| st.name() == s)
            .copied()
            .ok_or_else(|| PipelineError::UnknownStage(s.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Artifact paths and serialized records

fn p_deployment(out: &Path) -> PathBuf {
    out.join("deployment.avsf")
}
fn p_path(out: &Path) -> PathBuf {
    out.join("path.json")
}
fn p_captures(out: &Path) -> PathBuf {
    out.join("captures")
}
fn p_surrogate(out: &Path) -> PathBuf {
    out.join("surrogate.avsf")
}
fn p_fit_report(out: &Path) -> PathBuf {
    out.join("fit_report.json")
}
fn p_policy(out: &Path) -> PathBuf {
    out.join("policy.avsp")
}
fn p_dataset(out: &Path) -> PathBuf {
    out.join("dataset")
}
fn p_train_report(out: &Path) -> PathBuf {
    out.join("train_report.json")
}
fn p_attacks(out: &Path) -> PathBuf {
    out.join("attacks")
}
fn p_attack_record(out: &Path, method: &str, seed: u64) -> PathBuf {
    p_attacks(out).join(format!("{method}_seed_{seed}.json"))
}
fn p_attack_object(out: &Path, method: &str, seed: u64, obj: usize) -> PathBuf {
    p_attacks(out).join(format!("{method}_seed_{seed}_obj{obj}.avsf"))
}
fn p_transfer(out: &Path) -> PathBuf {
    out.join("transfer.json")
}
fn p_metrics(out: &Path) -> PathBuf {
    out.join("metrics.json")
}
fn p_table(out: &Path) -> PathBuf {
    out.join("table.txt")
}
fn p_manifest(out: &Path) -> PathBuf {
    out.join("manifest.json")
}
fn p_frames(out: &Path) -> PathBuf {
    out.join("frames")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PathRecord {
    waypoints: Vec<[f64; 2]>,
    closed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub epoch_losses: Vec<f64>,
    pub holdout_psnr: f64,
    pub train_views: usize,
    pub holdout_views: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_history: Vec<f64>,
    pub dataset_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseRecord {
    pub translation: [f64; 3],
    pub yaw: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackRecord {
    pub method: String,
    pub seed: u64,
    /// Total CTE with no adversarial objects.
    pub baseline: f64,
    /// Total CTE of the stored (f32-quantized) best parameters.
    pub best_objective: f64,
    pub history: Vec<f64>,
    pub best_history: Vec<f64>,
    pub rollout_evals: usize,
    pub fd_rollouts: usize,
    pub object_files: Vec<String>,
    pub poses: Vec<PoseRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferReport {
    pub deployment_unperturbed: f64,
    /// method -> seed -> deployment total CTE of the transferred attack.
    pub cells: BTreeMap<String, BTreeMap<u64, f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellStats {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl CellStats {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt(), values }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMatrix {
    pub deployment_unperturbed: f64,
    pub surrogate_unperturbed: f64,
    pub surrogate_random: CellStats,
    pub surrogate_gradient: CellStats,
    pub deployment_random: CellStats,
    pub deployment_gradient: CellStats,
    /// Seed/method cells that could not be filled from artifacts.
    pub missing: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub seeds: Vec<u64>,
    pub stages_run: Vec<String>,
    pub artifacts: BTreeMap<String, String>,
    pub metrics: Option<EvalMatrix>,
}

// ---------------------------------------------------------------------------
// Shared loading helpers

fn require(path: PathBuf, stage: &'static str) -> Result<PathBuf, PipelineError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingArtifact { stage, path })
    }
}

fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<(), PipelineError> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn load_path(out: &Path) -> Result<ReferencePath, PipelineError> {
    let rec: PathRecord = load_json(&require(p_path(out), "build")?)?;
    Ok(ReferencePath::new(rec.waypoints, rec.closed)?)
}

fn load_deployment(out: &Path) -> Result<(VoxelField, ReferencePath), PipelineError> {
    let field = io::load_field(&require(p_deployment(out), "build")?)?;
    Ok((field, load_path(out)?))
}

fn load_surrogate(out: &Path) -> Result<VoxelField, PipelineError> {
    Ok(io::load_field(&require(p_surrogate(out), "fit")?)?)
}

fn load_trained_policy(out: &Path) -> Result<PolicyNet, PipelineError> {
    Ok(io::load_policy(&require(p_policy(out), "train")?)?)
}

fn start_state(path: &ReferencePath) -> VehicleState {
    let p = path.point_at(0.0);
    let t = path.tangent_at(0.0);
    VehicleState::new(p[0], p[1], t[1].atan2(t[0]))
}

fn rollout_config(cfg: &SceneConfig, path: &ReferencePath) -> RolloutConfig {
    RolloutConfig {
        horizon: cfg.rollout.horizon,
        rig: cfg.rollout.rig.to_rig(),
        quad: cfg.rollout.quad(),
        start: start_state(path),
        seed: 0,
        retain_frames: false,
    }
}

fn build_objects(cfg: &SceneConfig, base_dir: &Path) -> Result<Vec<(VoxelField, RigidTransform)>, PipelineError> {
    cfg.objects.iter().map(|o| load_placement(o, base_dir)).collect()
}

fn load_placement(o: &ObjectPlacement, base_dir: &Path) -> Result<(VoxelField, RigidTransform), PipelineError> {
    let field = match &o.field_file {
        Some(f) => {
            let p = if f.is_absolute() { f.clone() } else { base_dir.join(f) };
            io::load_field(&p)?
        }
        None => build_object_field(o.kind, o.resolution, o.color, o.sigma)?,
    };
    Ok((field, o.transform()?))
}

fn expert_config(cfg: &SceneConfig) -> ExpertConfig {
    ExpertConfig {
        lookahead: cfg.training.expert_lookahead,
        gain: cfg.training.expert_gain,
        steering_limit: cfg.policy.steering_limit,
    }
}

fn policy_spec(cfg: &SceneConfig) -> InputSpec {
    InputSpec {
        height: cfg.rollout.rig.image_height,
        width: cfg.rollout.rig.image_width,
        channels: cfg.policy.channels,
        goal_len: 0,
    }
}

// ---------------------------------------------------------------------------
// Stages

pub fn stage_build(cfg: &SceneConfig, out: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(out)?;
    let scene = build_deployment_scene(&cfg.deployment)?;
    io::save_field(&scene.field, &p_deployment(out))?;
    save_json(
        &PathRecord { waypoints: scene.path.waypoints.clone(), closed: scene.path.closed },
        &p_path(out),
    )?;
    Ok(())
}

pub fn stage_capture(cfg: &SceneConfig, out: &Path) -> Result<(), PipelineError> {
    let (field, path) = load_deployment(out)?;
    let scene = crate::recon::DeploymentScene { field, path, spec: cfg.deployment.clone() };
    let set = capture_posed_images(&scene, cfg.capture.n_views, &cfg.capture.to_coverage())?;
    io::save_posed_images(&set, &p_captures(out))?;
    Ok(())
}

fn split_views(set: PosedImageSet, holdout_every: usize) -> (PosedImageSet, PosedImageSet) {
    let (w, h) = (set.width, set.height);
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for (i, v) in set.views.into_iter().enumerate() {
        if holdout_every > 0 && i % holdout_every == holdout_every - 1 {
            holdout.push(v);
        } else {
            train.push(v);
        }
    }
    (
        PosedImageSet { views: train, width: w, height: h },
        PosedImageSet { views: holdout, width: w, height: h },
    )
}

pub fn stage_fit(cfg: &SceneConfig, out: &Path) -> Result<(), PipelineError> {
    let dir = require(p_captures(out), "capture")?;
    let rig = cfg.capture.rig.to_rig();
    let set = io::load_posed_images(&dir, rig.near, rig.far)?;
    let (field, _) = load_deployment(out)?;
    let (train, holdout) = split_views(set, cfg.fit.holdout_every);
    let fit_cfg = cfg.fit.to_fit_config(field.bounds, cfg.capture.background);
    let mut result = fit_field(&train, &fit_cfg)?;
    io::quantize_f32(&mut result.field.density_params);
    io::quantize_f32(&mut result.field.color_params);
    io::save_field(&result.field, &p_surrogate(out))?;
    let eval_quad = QuadConfig {
        scene_samples: cfg.fit.scene_samples,
        object_samples: 1,
        background: cfg.capture.background,
    };
    let eval_set = if holdout.views.is_empty() { &train } else { &holdout };
    let holdout_psnr = evaluate_fit(&result.field, eval_set, &eval_quad);
    save_json(
        &FitReport {
            epoch_losses: result.epoch_losses,
            holdout_psnr,
            train_views: train.views.len(),
            holdout_views: holdout.views.len(),
        },
        &p_fit_report(out),
    )?;
    Ok(())
}

pub fn stage_train(cfg: &SceneConfig, out: &Path, base_dir: &Path) -> Result<(), PipelineError> {
    let (field, path) = load_deployment(out)?;
    let rig = cfg.rollout.rig.to_rig();
    let quad = cfg.rollout.quad();
    let objects = build_objects(cfg, base_dir)?;
    let tr = &cfg.training;
    let surrogate = if tr.surrogate_prob > 0.0 { Some(load_surrogate(out)?) } else { None };
    // Randomized-texture clutter: with probability object_prob a sample sees
    // the placed objects recolored from the random-search distribution, so
    // benign textures are in-distribution for the policy. The per-sample rng
    // is derived from the state bits, keeping renders thread-order free.
    let render = |state: &VehicleState| -> Vec<f64> {
        let camera = rig.camera_for(state);
        let plain = objects.is_empty() || tr.object_prob <= 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(
            tr.seed
                ^ state.x.to_bits().rotate_left(17)
                ^ state.y.to_bits().rotate_left(33)
                ^ state.heading.to_bits(),
        );
        use rand::Rng;
        let (scene_field, opaque_mode) = match &surrogate {
            Some(s) if rng.gen::<f64>() < tr.surrogate_prob => (s, SensorMode::Composite),
            _ => (&field, SensorMode::OpaqueTransfer),
        };
        if plain || rng.gen::<f64>() >= tr.object_prob {
            return render_frame(scene_field, &[], &camera, &quad, false).color;
        }
        let noise = rand_distr::Normal::new(0.0, tr.object_color_std.max(1e-300)).unwrap();
        let recolored: Vec<(VoxelField, RigidTransform)> = objects
            .iter()
            .map(|(f, xf)| {
                let mut f = f.clone();
                for c in f.color_params.iter_mut() {
                    *c = rand_distr::Distribution::sample(&noise, &mut rng);
                }
                (f, xf.clone())
            })
            .collect();
        let refs: Vec<(&VoxelField, &RigidTransform)> =
            recolored.iter().map(|(f, x)| (f, x)).collect();
        // alternate opaque and composite insertion so both sensor styles are seen
        let mode = if rng.gen::<bool>() { opaque_mode } else { SensorMode::Composite };
        crate::rollout::render_observation(scene_field, &refs, &camera, &quad, mode, false).0
    };
    let expert = expert_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
    let dataset = generate_dataset(
        &render,
        rig.image_width,
        rig.image_height,
        &path,
        &expert,
        cfg.training.lateral_std,
        cfg.training.heading_std,
        cfg.training.dataset_size,
        &mut rng,
    );
    let mut net = PolicyNet::random_init(policy_spec(cfg), &cfg.policy.hidden, cfg.policy.steering_limit, &mut rng);
    let losses = train_policy_bc(
        &dataset,
        &mut net,
        cfg.training.epochs,
        cfg.training.learning_rate,
        cfg.training.noise_std,
        cfg.training.batch_size,
        &mut rng,
    )?;
    // quantize through the snapshot type so later runs evaluate stored values
    let mut flat = net.params_flat();
    io::quantize_f32(&mut flat);
    net.set_params_flat(&flat);
    io::save_policy(&net, &p_policy(out))?;
    io::save_dataset(&dataset, &p_dataset(out))?;
    save_json(&TrainReport { loss_history: losses, dataset_size: dataset.records.len() }, &p_train_report(out))?;
    Ok(())
}

fn surrogate_scenario<'a>(
    cfg: &SceneConfig,
    surrogate: &'a VoxelField,
    policy: &'a PolicyNet,
    path: &'a ReferencePath,
) -> AttackScenario<'a> {
    AttackScenario {
        scene: surrogate,
        policy,
        dynamics: cfg.rollout.dynamics(),
        path,
        rollout: rollout_config(cfg, path),
        sensor: SensorMode::Composite,
    }
}

/// Re-evaluate quantized best parameters so the stored objective matches the
/// stored artifact, then persist the record and the object snapshots.
fn persist_attack(
    scn: &AttackScenario,
    objects: &[(VoxelField, RigidTransform)],
    result: &AttackResult,
    method: &str,
    seed: u64,
    out: &Path,
) -> Result<(), PipelineError> {
    let mut best_fields: Vec<VoxelField> = objects.iter().map(|(f, _)| f.clone()).collect();
    let mut object_files = Vec::new();
    for (i, (f, params)) in best_fields.iter_mut().zip(&result.best_params).enumerate() {
        f.color_params.copy_from_slice(params);
        io::quantize_f32(&mut f.color_params);
        io::quantize_f32(&mut f.density_params);
        let p = p_attack_object(out, method, seed, i);
        io::save_field(f, &p)?;
        object_files.push(p.file_name().unwrap().to_string_lossy().into_owned());
    }
    let refs: Vec<(&VoxelField, &RigidTransform)> = best_fields.iter().zip(&result.best_poses).collect();
    let (best_traj, j) = rollout_closed_loop(
        scn.scene,
        &refs,
        &Controller::Policy(scn.policy),
        &scn.dynamics,
        scn.path,
        &scn.rollout,
        scn.sensor,
    )?;
    let record = AttackRecord {
        method: method.to_string(),
        seed,
        baseline: result.baseline,
        best_objective: -j,
        history: result.history.clone(),
        best_history: result.best_history.clone(),
        rollout_evals: result.rollout_evals,
        fd_rollouts: result.fd_rollouts,
        object_files,
        poses: result
            .best_poses
            .iter()
            .map(|p| PoseRecord {
                translation: p.translation,
                yaw: p.rotation[1][0].atan2(p.rotation[0][0]),
                scale: p.scale,
            })
            .collect(),
    };
    save_json(&record, &p_attack_record(out, method, seed))?;
    io::save_trajectory_csv(&best_traj, scn.path, &p_attacks(out).join(format!("{method}_seed_{seed}_best.csv")))?;
    io::save_trajectory_csv(
        &result.baseline_trajectory,
        scn.path,
        &p_attacks(out).join(format!("{method}_seed_{seed}_baseline.csv")),
    )?;
    Ok(())
}

pub fn stage_attack(cfg: &SceneConfig, out: &Path, base_dir: &Path) -> Result<(), PipelineError> {
    let surrogate = load_surrogate(out)?;
    let policy = load_trained_policy(out)?;
    let path = load_path(out)?;
    let objects = build_objects(cfg, base_dir)?;
    fs::create_dir_all(p_attacks(out))?;
    let scn = surrogate_scenario(cfg, &surrogate, &policy, &path);
    for &seed in &cfg.attack.seeds {
        let acfg = cfg.attack.to_attack_config(seed);
        let g = gradient_attack(&scn, &objects, &acfg)?;
        persist_attack(&scn, &objects, &g, "gradient", seed, out)?;
        let r = random_search_attack(&scn, &objects, &acfg)?;
        persist_attack(&scn, &objects, &r, "random", seed, out)?;
    }
    Ok(())
}

fn load_attack_objects(
    out: &Path,
    record: &AttackRecord,
) -> Result<Vec<(VoxelField, RigidTransform)>, PipelineError> {
    record
        .object_files
        .iter()
        .zip(&record.poses)
        .map(|(f, pose)| {
            let field = io::load_field(&p_attacks(out).join(f))?;
            let xf = RigidTransform::from_yaw(pose.yaw, pose.translation, pose.scale)?;
            Ok((field, xf))
        })
        .collect()
}

fn deployment_rollout(
    cfg: &SceneConfig,
    field: &VoxelField,
    path: &ReferencePath,
    policy: &PolicyNet,
    objects: &[(VoxelField, RigidTransform)],
) -> Result<(Trajectory, f64), PipelineError> {
    let refs: Vec<(&VoxelField, &RigidTransform)> = objects.iter().map(|(f, x)| (f, x)).collect();
    let rcfg = rollout_config(cfg, path);
    let (traj, _) = rollout_closed_loop(
        field,
        &refs,
        &Controller::Policy(policy),
        &cfg.rollout.dynamics(),
        path,
        &rcfg,
        SensorMode::OpaqueTransfer,
    )?;
    let cte = total_cte(&traj, path);
    Ok((traj, cte))
}

pub fn stage_transfer(cfg: &SceneConfig, out: &Path) -> Result<(), PipelineError> {
    let (field, path) = load_deployment(out)?;
    let policy = load_trained_policy(out)?;
    require(p_attack_record(out, "gradient", cfg.attack.seeds[0]), "attack")?;
    let (_, unperturbed) = deployment_rollout(cfg, &field, &path, &policy, &[])?;
    let mut cells: BTreeMap<String, BTreeMap<u64, f64>> = BTreeMap::new();
    for method in ["gradient", "random"] {
        let mut per_seed = BTreeMap::new();
        for &seed in &cfg.attack.seeds {
            let rec_path = p_attack_record(out, method, seed);
            if !rec_path.exists() {
                continue;
            }
            let record: AttackRecord = load_json(&rec_path)?;
            let objects = load_attack_objects(out, &record)?;
            let (_, cte) = deployment_rollout(cfg, &field, &path, &policy, &objects)?;
            per_seed.insert(seed, cte);
        }
        cells.insert(method.to_string(), per_seed);
    }
    save_json(&TransferReport { deployment_unperturbed: unperturbed, cells }, &p_transfer(out))?;
    Ok(())
}

/// Assemble the five-column metric table: deployment-unperturbed plus
/// surrogate/deployment x random/gradient, mean +- std over the seeds.
pub fn evaluate_matrix(cfg: &SceneConfig, out: &Path) -> Result<EvalMatrix, PipelineError> {
    let transfer: TransferReport = load_json(&require(p_transfer(out), "transfer")?)?;
    let surrogate = load_surrogate(out)?;
    let policy = load_trained_policy(out)?;
    let path = load_path(out)?;
    let rcfg = rollout_config(cfg, &path);
    let (traj, _) = rollout_closed_loop(
        &surrogate,
        &[],
        &Controller::Policy(&policy),
        &cfg.rollout.dynamics(),
        &path,
        &rcfg,
        SensorMode::Composite,
    )?;
    let surrogate_unperturbed = total_cte(&traj, &path);

    let mut missing = Vec::new();
    let mut surrogate_cell = |method: &str| -> Result<CellStats, PipelineError> {
        let mut values = Vec::new();
        for &seed in &cfg.attack.seeds {
            let p = p_attack_record(out, method, seed);
            if !p.exists() {
                missing.push(format!("surrogate-{method}/seed{seed}"));
                continue;
            }
            let rec: AttackRecord = load_json(&p)?;
            values.push(rec.best_objective);
        }
        Ok(CellStats::from_values(values))
    };
    let surrogate_gradient = surrogate_cell("gradient")?;
    let surrogate_random = surrogate_cell("random")?;

    let mut deployment_cell = |method: &str| -> CellStats {
        let mut values = Vec::new();
        if let Some(per_seed) = transfer.cells.get(method) {
            for &seed in &cfg.attack.seeds {
                match per_seed.get(&seed) {
                    Some(&v) => values.push(v),
                    None => missing.push(format!("deployment-{method}/seed{seed}")),
                }
            }
        }
        CellStats::from_values(values)
    };
    let deployment_gradient = deployment_cell("gradient");
    let deployment_random = deployment_cell("random");

    Ok(EvalMatrix {
        deployment_unperturbed: transfer.deployment_unperturbed,
        surrogate_unperturbed,
        surrogate_random,
        surrogate_gradient,
        deployment_random,
        deployment_gradient,
        missing,
    })
}

fn render_table(m: &EvalMatrix) -> String {
    let cell = |c: &CellStats| format!("{:.3} \u{b1} {:.3}", c.mean, c.std);
    let mut s = String::new();
    s.push_str("total cross-track error (higher = stronger attack)\n");
    s.push_str(&format!("deployment unperturbed : {:.3}\n", m.deployment_unperturbed));
    s.push_str(&format!("surrogate  unperturbed : {:.3}\n", m.surrogate_unperturbed));
    s.push_str(&format!("surrogate  random      : {}\n", cell(&m.surrogate_random)));
    s.push_str(&format!("surrogate  gradient    : {}\n", cell(&m.surrogate_gradient)));
    s.push_str(&format!("deployment random      : {}\n", cell(&m.deployment_random)));
    s.push_str(&format!("deployment gradient    : {}\n", cell(&m.deployment_gradient)));
    for gap in &m.missing {
        s.push_str(&format!("missing: {gap}\n"));
    }
    s
}

pub fn stage_evaluate(cfg: &SceneConfig, out: &Path) -> Result<EvalMatrix, PipelineError> {
    let m = evaluate_matrix(cfg, out)?;
    save_json(&m, &p_metrics(out))?;
    fs::write(p_table(out), render_table(&m))?;
    Ok(m)
}

// ---------------------------------------------------------------------------
// Frame export

fn draw_segment(img: &mut [u8], w: usize, h: usize, a: [f64; 2], b: [f64; 2], color: [u8; 3]) {
    let steps = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()) * 2.0).ceil() as usize + 1;
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let x = a[0] + t * (b[0] - a[0]);
        let y = a[1] + t * (b[1] - a[1]);
        let (xi, yi) = (x.round() as isize, y.round() as isize);
        if xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h {
            let p = (yi as usize * w + xi as usize) * 3;
            img[p..p + 3].copy_from_slice(&color);
        }
    }
}

/// Re-render a trajectory's first-person frames plus an overhead schematic of
/// the reference path (gray) and the driven trace (red).
pub fn export_frames(
    cfg: &SceneConfig,
    scene: &VoxelField,
    objects: &[(VoxelField, RigidTransform)],
    trajectory: &Trajectory,
    path: &ReferencePath,
    sensor: SensorMode,
    dir: &Path,
) -> Result<usize, PipelineError> {
    fs::create_dir_all(dir)?;
    let rig = cfg.rollout.rig.to_rig();
    let quad = cfg.rollout.quad();
    let refs: Vec<(&VoxelField, &RigidTransform)> = objects.iter().map(|(f, x)| (f, x)).collect();
    let mut count = 0;
    for (t, state) in trajectory.states[..trajectory.controls.len()].iter().enumerate() {
        let camera = rig.camera_for(state);
        let (rgb, _) = crate::rollout::render_observation(scene, &refs, &camera, &quad, sensor, false);
        io::save_ppm(&rgb, rig.image_width, rig.image_height, &dir.join(format!("frame_{t:04}.ppm")))?;
        count += 1;
    }

    // overhead schematic in world xy
    let (w, h) = (256usize, 256usize);
    let mut img = vec![255u8; w * h * 3];
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    let pts: Vec<[f64; 2]> = (0..=512)
        .map(|k| path.point_at(path.total_length() * k as f64 / 512.0))
        .chain(trajectory.states.iter().map(|s| [s.x, s.y]))
        .collect();
    for p in &pts {
        for i in 0..2 {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let to_px = |p: [f64; 2]| -> [f64; 2] {
        [
            (p[0] - lo[0]) / span * (w as f64 - 20.0) + 10.0,
            // north up
            (h as f64 - 10.0) - (p[1] - lo[1]) / span * (h as f64 - 20.0),
        ]
    };
    let path_px: Vec<[f64; 2]> = (0..=512)
        .map(|k| to_px(path.point_at(path.total_length() * k as f64 / 512.0)))
        .collect();
    for seg in path_px.windows(2) {
        draw_segment(&mut img, w, h, seg[0], seg[1], [150, 150, 150]);
    }
    let traj_px: Vec<[f64; 2]> = trajectory.states.iter().map(|s| to_px([s.x, s.y])).collect();
    for seg in traj_px.windows(2) {
        draw_segment(&mut img, w, h, seg[0], seg[1], [200, 30, 30]);
    }
    let rgb: Vec<f64> = img.iter().map(|&b| b as f64 / 255.0).collect();
    io::save_ppm(&rgb, w, h, &dir.join("overhead.ppm"))?;
    Ok(count)
}

pub fn stage_export(cfg: &SceneConfig, out: &Path) -> Result<(), PipelineError> {
    let surrogate = load_surrogate(out)?;
    let policy = load_trained_policy(out)?;
    let path = load_path(out)?;
    let seed = cfg.attack.seeds[0];
    let record: AttackRecord = load_json(&require(p_attack_record(out, "gradient", seed), "attack")?)?;
    let objects = load_attack_objects(out, &record)?;
    let refs: Vec<(&VoxelField, &RigidTransform)> = objects.iter().map(|(f, x)| (f, x)).collect();
    let mut rcfg = rollout_config(cfg, &path);
    rcfg.retain_frames = false;
    let (traj, _) = rollout_closed_loop(
        &surrogate,
        &refs,
        &Controller::Policy(&policy),
        &cfg.rollout.dynamics(),
        &path,
        &rcfg,
        SensorMode::Composite,
    )?;
    export_frames(cfg, &surrogate, &objects, &traj, &path, SensorMode::Composite, &p_frames(out))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Top-level driver

pub fn run_pipeline(
    cfg: &SceneConfig,
    stages: &[Stage],
    out: &Path,
    base_dir: &Path,
) -> Result<RunManifest, PipelineError> {
    fs::create_dir_all(out)?;
    let mut ordered: Vec<Stage> = Stage::ALL.iter().filter(|s| stages.contains(s)).copied().collect();
    if ordered.is_empty() {
        ordered = Stage::ALL.to_vec();
    }
    let mut metrics = None;
    for stage in &ordered {
        match stage {
            Stage::Build => stage_build(cfg, out)?,
            Stage::Capture => stage_capture(cfg, out)?,
            Stage::Fit => stage_fit(cfg, out)?,
            Stage::Train => stage_train(cfg, out, base_dir)?,
            Stage::Attack => stage_attack(cfg, out, base_dir)?,
            Stage::Transfer => stage_transfer(cfg, out)?,
            Stage::Evaluate => metrics = Some(stage_evaluate(cfg, out)?),
            Stage::Export => stage_export(cfg, out)?,
        }
    }
    if metrics.is_none() && p_metrics(out).exists() {
        metrics = Some(load_json(&p_metrics(out))?);
    }
    let mut artifacts = BTreeMap::new();
    for (key, path) in [
        ("deployment", p_deployment(out)),
        ("path", p_path(out)),
        ("captures", p_captures(out)),
        ("surrogate", p_surrogate(out)),
        ("fit_report", p_fit_report(out)),
        ("policy", p_policy(out)),
        ("dataset", p_dataset(out)),
        ("train_report", p_train_report(out)),
        ("attacks", p_attacks(out)),
        ("transfer", p_transfer(out)),
        ("metrics", p_metrics(out)),
        ("table", p_table(out)),
        ("frames", p_frames(out)),
    ] {
        if path.exists() {
            artifacts.insert(key.to_string(), path.display().to_string());
        }
    }
    let manifest = RunManifest {
        config_hash: config_hash(cfg),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: cfg.attack.seeds.clone(),
        stages_run: ordered.iter().map(|s| s.name().to_string()).collect(),
        artifacts,
        metrics,
    };
    save_json(&manifest, &p_manifest(out))?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Adversarial retraining (dataset-augmentation reuse of the BC trainer)

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrainReport {
    pub attacked_cte_before: f64,
    pub attacked_cte_after: f64,
    pub relative_reduction: f64,
}

/// Fine-tune the trained policy on expert-labeled recovery data collected in
/// the surrogate with the stored gradient attack present, then re-run the
/// stored attack against the fine-tuned policy.
pub fn retrain_against_attack(cfg: &SceneConfig, out: &Path) -> Result<RetrainReport, PipelineError> {
    let surrogate = load_surrogate(out)?;
    let mut policy = load_trained_policy(out)?;
    let path = load_path(out)?;
    let seed = cfg.attack.seeds[0];
    let record: AttackRecord = load_json(&require(p_attack_record(out, "gradient", seed), "attack")?)?;
    let objects = load_attack_objects(out, &record)?;
    let refs: Vec<(&VoxelField, &RigidTransform)> = objects.iter().map(|(f, x)| (f, x)).collect();

    let rcfg = rollout_config(cfg, &path);
    let dynamics = cfg.rollout.dynamics();
    let attacked = |net: &PolicyNet| -> Result<f64, PipelineError> {
        let (traj, _) = rollout_closed_loop(
            &surrogate,
            &refs,
            &Controller::Policy(net),
            &dynamics,
            &path,
            &rcfg,
            SensorMode::Composite,
        )?;
        Ok(total_cte(&traj, &path))
    };
    let before = attacked(&policy)?;

    // adversarial dataset: recovery states rendered with the attack present
    let rig = cfg.rollout.rig.to_rig();
    let quad = cfg.rollout.quad();
    let render = |state: &VehicleState| -> Vec<f64> {
        render_frame(&surrogate, &refs, &rig.camera_for(state), &quad, false).color
    };
    let expert = expert_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.retrain.seed);
    let adv = generate_dataset(
        &render,
        rig.image_width,
        rig.image_height,
        &path,
        &expert,
        cfg.training.lateral_std,
        cfg.training.heading_std,
        cfg.retrain.adv_samples,
        &mut rng,
    );
    let mut merged = if p_dataset(out).exists() {
        io::load_dataset(&p_dataset(out))?
    } else {
        ImitationDataset { width: rig.image_width, height: rig.image_height, records: Vec::new() }
    };
    merged.merge(adv);
    train_policy_bc(
        &merged,
        &mut policy,
        cfg.retrain.epochs,
        cfg.retrain.learning_rate,
        cfg.training.noise_std,
        cfg.training.batch_size,
        &mut rng,
    )?;
    let mut flat = policy.params_flat();
    io::quantize_f32(&mut flat);
    policy.set_params_flat(&flat);
    io::save_policy(&policy, &out.join("policy_retrained.avsp"))?;
    let after = attacked(&policy)?;
    let report = RetrainReport {
        attacked_cte_before: before,
        attacked_cte_after: after,
        relative_reduction: if before > 0.0 { (before - after) / before } else { 0.0 },
    };
    save_json(&report, &out.join("retrain_report.json"))?;
    Ok(report)
}

// keep the expert reachable for diagnostic rollouts from the CLI
pub fn expert_rollout_cte(cfg: &SceneConfig, out: &Path) -> Result<f64, PipelineError> {
    let (field, path) = load_deployment(out)?;
    let rcfg = rollout_config(cfg, &path);
    let expert = expert_config(cfg);
    let (traj, _) = rollout_closed_loop(
        &field,
        &[],
        &Controller::Expert(&expert),
        &cfg.rollout.dynamics(),
        &path,
        &rcfg,
        SensorMode::Composite,
    )?;
    let _ = expert_control(&rcfg.start, &path, &expert);
    Ok(total_cte(&traj, &path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recon::TrackShape;
    use tempfile::tempdir;

    fn micro_config(out: &Path) -> SceneConfig {
        let mut cfg = SceneConfig::default();
        cfg.output_dir = out.to_path_buf();
        cfg.deployment.shape = TrackShape::Straight;
        cfg.deployment.side = 5.0;
        cfg.deployment.resolution = [40, 40, 10];
        cfg.capture.n_views = 10;
        cfg.capture.rig.image_width = 12;
        cfg.capture.rig.image_height = 12;
        cfg.capture.rig.focal = 7.0;
        cfg.capture.scene_samples = 24;
        cfg.fit.epochs = 2;
        cfg.fit.batch_rays = 512;
        cfg.fit.resolution = [14, 14, 6];
        cfg.fit.scene_samples = 24;
        cfg.fit.holdout_every = 5;
        cfg.policy.hidden = vec![8];
        cfg.training.dataset_size = 30;
        cfg.training.epochs = 3;
        cfg.rollout.horizon = 6;
        cfg.rollout.rig.image_width = 12;
        cfg.rollout.rig.image_height = 12;
        cfg.rollout.rig.focal = 7.0;
        cfg.rollout.scene_samples = 20;
        cfg.rollout.object_samples = 10;
        cfg.attack.iterations = 3;
        cfg.attack.seeds = vec![0, 1];
        cfg.objects[0].position = [2.5, -0.6, 0.4];
        cfg.objects[0].resolution = [4, 4, 4];
        cfg.retrain.epochs = 2;
        cfg.retrain.adv_samples = 10;
        cfg
    }

    #[test]
    fn full_micro_pipeline_is_deterministic() {
        let dir = tempdir().unwrap();
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        let cfg = micro_config(&out_a);
        let m1 = run_pipeline(&cfg, &[], &out_a, dir.path()).unwrap();
        let m2 = run_pipeline(&cfg, &[], &out_b, dir.path()).unwrap();
        assert_eq!(m1.config_hash, m2.config_hash);
        let a = m1.metrics.as_ref().unwrap();
        let b = m2.metrics.as_ref().unwrap();
        assert_eq!(a.deployment_unperturbed.to_bits(), b.deployment_unperturbed.to_bits());
        assert_eq!(a.surrogate_gradient.values, b.surrogate_gradient.values);
        assert_eq!(a.deployment_gradient.values, b.deployment_gradient.values);
        assert!(a.missing.is_empty(), "{:?}", a.missing);
        // metric cells match per-stage artifacts
        let rec: AttackRecord =
            load_json(&p_attack_record(&out_a, "gradient", 0)).unwrap();
        assert_eq!(a.surrogate_gradient.values[0], rec.best_objective);
    }

    #[test]
    fn missing_prerequisite_names_stage() {
        let dir = tempdir().unwrap();
        let cfg = micro_config(dir.path());
        let err = stage_fit(&cfg, dir.path()).unwrap_err();
        match err {
            PipelineError::MissingArtifact { stage, .. } => assert_eq!(stage, "capture"),
            other => panic!("unexpected error {other}"),
        }
        let err = stage_capture(&cfg, dir.path()).unwrap_err();
        match err {
            PipelineError::MissingArtifact { stage, .. } => assert_eq!(stage, "build"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn evaluate_only_recomputes_from_artifacts() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("run");
        let cfg = micro_config(&out);
        run_pipeline(&cfg, &[], &out, dir.path()).unwrap();
        let first: EvalMatrix = load_json(&p_metrics(&out)).unwrap();
        let m = run_pipeline(&cfg, &[Stage::Evaluate], &out, dir.path()).unwrap();
        let again = m.metrics.unwrap();
        assert_eq!(first.surrogate_gradient.values, again.surrogate_gradient.values);
        assert_eq!(first.deployment_unperturbed.to_bits(), again.deployment_unperturbed.to_bits());
    }

    #[test]
    fn export_writes_frames_and_overhead() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("run");
        let cfg = micro_config(&out);
        run_pipeline(
            &cfg,
            &[Stage::Build, Stage::Capture, Stage::Fit, Stage::Train, Stage::Attack, Stage::Export],
            &out,
            dir.path(),
        )
        .unwrap();
        let frames = p_frames(&out);
        let n = fs::read_dir(&frames).unwrap().count();
        // horizon first-person frames plus the overhead schematic
        assert_eq!(n, cfg.rollout.horizon + 1);
        let (img, w, h) = io::load_ppm(&frames.join("overhead.ppm")).unwrap();
        assert_eq!((w, h), (256, 256));
        // the trace endpoints leave red marks: at least some red pixels
        let red = img
            .chunks(3)
            .filter(|c| c[0] > 0.7 && c[1] < 0.3 && c[2] < 0.3)
            .count();
        assert!(red > 5, "only {red} red pixels in overhead");
    }

    #[test]
    fn retrain_reports_relative_reduction() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("run");
        let cfg = micro_config(&out);
        run_pipeline(
            &cfg,
            &[Stage::Build, Stage::Capture, Stage::Fit, Stage::Train, Stage::Attack],
            &out,
            dir.path(),
        )
        .unwrap();
        let report = retrain_against_attack(&cfg, &out).unwrap();
        assert!(report.attacked_cte_before.is_finite());
        assert!(report.attacked_cte_after.is_finite());
        assert!(out.join("policy_retrained.avsp").exists());
    }

    #[test]
    fn stage_parsing() {
        assert_eq!(Stage::from_str("attack").unwrap(), Stage::Attack);
        assert!(Stage::from_str("bogus").is_err());
    }
}
