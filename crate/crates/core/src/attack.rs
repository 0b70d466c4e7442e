//! Attack orchestration: Adam-based gradient texture attacks, a Gaussian
//! random-search baseline, and multistart pose attacks with finite-difference
//! pose refinement.
//!
//! All attacks maximize the total cross-track error of the closed-loop policy
//! rollout, which is the negated episode objective J. The gradient attack
//! minimizes J with Adam; the objective histories are reported as total CTE
//! so larger is a stronger attack.

use crate::adjoint::{adjoint_backward, assemble_param_gradient};
use crate::field::{RigidTransform, VoxelField};
pub use crate::opt::AdamState;
use crate::policy::PolicyNet;
use crate::rollout::{rollout_closed_loop, Controller, ReferencePath, RolloutConfig, SensorMode, Trajectory};
use crate::vehicle::DynamicsParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    BadConfig(String),
    #[error("invalid pose bounds: {0}")]
    BadBounds(String),
    #[error("rollout diverged twice; aborting attack at iteration {0}")]
    Diverged(usize),
    #[error(transparent)]
    Rollout(#[from] crate::rollout::RolloutError),
    #[error(transparent)]
    Adjoint(#[from] crate::adjoint::AdjointError),
}

/// Everything an attack needs to evaluate a candidate: the (surrogate) scene,
/// the frozen policy, dynamics, reference path, and rollout settings.
pub struct AttackScenario<'a> {
    pub scene: &'a VoxelField,
    pub policy: &'a PolicyNet,
    pub dynamics: DynamicsParams,
    pub path: &'a ReferencePath,
    pub rollout: RolloutConfig,
    pub sensor: SensorMode,
}

#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Std of the Gaussian over pre-activation color parameters (random search).
    pub random_std: f64,
    /// Number of Gaussian-perturbed initial vehicle poses to average gradients
    /// over (gradient attack), or pose seeds (multistart attack).
    pub n_initial_poses: usize,
    /// Std in meters (and radians for heading) of initial-pose perturbations.
    pub initial_pose_std: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            learning_rate: 0.1,
            random_std: 5.0,
            n_initial_poses: 1,
            initial_pose_std: 0.1,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if self.iterations < 1 {
            return Err(AttackError::BadConfig("iterations must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(AttackError::BadConfig("learning rate must be > 0".into()));
        }
        if self.random_std < 0.0 || self.initial_pose_std < 0.0 {
            return Err(AttackError::BadConfig("stds must be >= 0".into()));
        }
        if self.n_initial_poses < 1 {
            return Err(AttackError::BadConfig("n_initial_poses must be >= 1".into()));
        }
        Ok(())
    }
}

/// Axis-aligned translation box plus a yaw interval for pose attacks.
#[derive(Debug, Clone)]
pub struct PoseBounds {
    pub min_translation: [f64; 3],
    pub max_translation: [f64; 3],
    pub yaw_min: f64,
    pub yaw_max: f64,
}

impl PoseBounds {
    pub fn validate(&self) -> Result<(), AttackError> {
        for k in 0..3 {
            if !(self.min_translation[k] <= self.max_translation[k]) {
                return Err(AttackError::BadBounds(format!("translation axis {k} inverted")));
            }
        }
        if !(self.yaw_min <= self.yaw_max) {
            return Err(AttackError::BadBounds("yaw range inverted".into()));
        }
        Ok(())
    }

    fn clamp(&self, pose: &mut ObjPose) {
        for k in 0..3 {
            pose.translation[k] = pose.translation[k].clamp(self.min_translation[k], self.max_translation[k]);
        }
        pose.yaw = pose.yaw.clamp(self.yaw_min, self.yaw_max);
    }
}

#[derive(Debug, Clone, Copy)]
struct ObjPose {
    translation: [f64; 3],
    yaw: f64,
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    /// Per-object best pre-activation color parameters.
    pub best_params: Vec<Vec<f64>>,
    /// Per-object best placements (equal to the inputs for texture attacks).
    pub best_poses: Vec<RigidTransform>,
    /// Objective (total CTE) of every budgeted evaluation, in order.
    pub history: Vec<f64>,
    /// Monotone best-so-far transform of `history`.
    pub best_history: Vec<f64>,
    /// Total CTE with no adversarial objects present.
    pub baseline: f64,
    pub baseline_trajectory: Trajectory,
    pub best_trajectory: Trajectory,
    pub best_objective: f64,
    /// Budgeted rollout evaluations (candidate evaluations).
    pub rollout_evals: usize,
    /// Additional rollouts spent on finite-difference pose probes.
    pub fd_rollouts: usize,
}

fn evaluate(
    scn: &AttackScenario,
    objects: &[(&VoxelField, &RigidTransform)],
    start_override: Option<crate::vehicle::VehicleState>,
) -> Result<(Trajectory, f64), crate::rollout::RolloutError> {
    let mut cfg = scn.rollout.clone();
    if let Some(s) = start_override {
        cfg.start = s;
    }
    let (traj, j) = rollout_closed_loop(
        scn.scene,
        objects,
        &Controller::Policy(scn.policy),
        &scn.dynamics,
        scn.path,
        &cfg,
        scn.sensor,
    )?;
    Ok((traj, -j))
}

fn baseline_rollout(scn: &AttackScenario) -> Result<(Trajectory, f64), AttackError> {
    Ok(evaluate(scn, &[], None)?)
}

fn best_so_far(history: &[f64]) -> Vec<f64> {
    let mut best = f64::NEG_INFINITY;
    history
        .iter()
        .map(|&v| {
            best = best.max(v);
            best
        })
        .collect()
}

/// Adam ascent on total CTE over object color parameters via the adjoint
/// gradient. When `n_initial_poses > 1`, gradients from rollouts started at
/// Gaussian-perturbed initial vehicle poses are averaged; the reported
/// objective is the mean over those starts. A non-finite rollout reduces the
/// learning rate once (x0.1); a second one aborts.
pub fn gradient_attack(
    scn: &AttackScenario,
    objects: &[(VoxelField, RigidTransform)],
    cfg: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.initial_pose_std.max(f64::MIN_POSITIVE)).unwrap();
    let starts: Vec<crate::vehicle::VehicleState> = (0..cfg.n_initial_poses)
        .map(|i| {
            let mut s = scn.rollout.start;
            if i > 0 && cfg.initial_pose_std > 0.0 {
                s.x += normal.sample(&mut rng);
                s.y += normal.sample(&mut rng);
                s.heading += normal.sample(&mut rng);
            }
            s
        })
        .collect();

    let (baseline_trajectory, baseline) = baseline_rollout(scn)?;

    // seed-dependent jitter of the starting texture so independent attack
    // runs explore distinct ascent paths
    let init_noise = Normal::new(0.0, 0.1).unwrap();
    let mut fields: Vec<VoxelField> = objects
        .iter()
        .map(|(f, _)| {
            let mut f = f.clone();
            for c in f.color_params.iter_mut() {
                *c += init_noise.sample(&mut rng);
            }
            f
        })
        .collect();
    let poses: Vec<RigidTransform> = objects.iter().map(|(_, p)| p.clone()).collect();
    let n_total: usize = fields.iter().map(|f| f.color_params.len()).sum();
    let mut adam = AdamState::new(n_total);
    let mut lr = cfg.learning_rate;
    let mut diverged_once = false;

    let mut history = Vec::with_capacity(cfg.iterations);
    let mut best_objective = f64::NEG_INFINITY;
    let mut best_params: Vec<Vec<f64>> = fields.iter().map(|f| f.color_params.clone()).collect();
    let mut best_trajectory = baseline_trajectory.clone();
    let mut rollout_evals = 0usize;

    for iter in 0..cfg.iterations {
        let refs: Vec<(&VoxelField, &RigidTransform)> = fields.iter().zip(&poses).collect();
        let mut grad_flat = vec![0.0; n_total];
        let mut mean_obj = 0.0;
        let mut nominal_traj = None;
        let mut failed = false;
        for (si, start) in starts.iter().enumerate() {
            match evaluate(scn, &refs, Some(*start)) {
                Ok((traj, obj)) => {
                    rollout_evals += 1;
                    mean_obj += obj / starts.len() as f64;
                    let adj = adjoint_backward(&traj, &scn.dynamics, scn.path)?;
                    let g = assemble_param_gradient(
                        &traj,
                        &adj,
                        scn.scene,
                        &refs,
                        scn.policy,
                        &scn.dynamics,
                        &scn.rollout.rig,
                        &scn.rollout.quad,
                    )?;
                    let mut off = 0;
                    for go in &g.per_object {
                        for (dst, v) in grad_flat[off..off + go.len()].iter_mut().zip(go) {
                            *dst += v / starts.len() as f64;
                        }
                        off += go.len();
                    }
                    if si == 0 {
                        nominal_traj = Some(traj);
                    }
                }
                Err(_) => {
                    failed = true;
                    break;
                }
            }
        }
        if failed {
            if diverged_once {
                return Err(AttackError::Diverged(iter));
            }
            diverged_once = true;
            lr *= 0.1;
            // roll back to the best candidate seen and continue from there
            for (f, p) in fields.iter_mut().zip(&best_params) {
                f.color_params.copy_from_slice(p);
            }
            history.push(best_objective.max(baseline));
            continue;
        }
        history.push(mean_obj);
        if mean_obj > best_objective {
            best_objective = mean_obj;
            best_params = fields.iter().map(|f| f.color_params.clone()).collect();
            if let Some(t) = nominal_traj {
                best_trajectory = t;
            }
        }
        // Adam minimizes J = -total CTE, i.e. ascends the attack objective.
        let mut flat: Vec<f64> = fields.iter().flat_map(|f| f.color_params.iter().copied()).collect();
        adam.step(&mut flat, &grad_flat, lr);
        let mut off = 0;
        for f in fields.iter_mut() {
            let n = f.color_params.len();
            f.color_params.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    let best_history = best_so_far(&history);
    Ok(AttackResult {
        best_params,
        best_poses: poses,
        history,
        best_history,
        baseline,
        baseline_trajectory,
        best_trajectory,
        best_objective,
        rollout_evals,
        fd_rollouts: 0,
    })
}

/// Baseline from the paper's evaluation protocol: draw i.i.d. N(0, std^2)
/// pre-activation color vectors, evaluate each by rollout, keep the argmax.
pub fn random_search_attack(
    scn: &AttackScenario,
    objects: &[(VoxelField, RigidTransform)],
    cfg: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.random_std.max(f64::MIN_POSITIVE)).unwrap();
    let (baseline_trajectory, baseline) = baseline_rollout(scn)?;
    let poses: Vec<RigidTransform> = objects.iter().map(|(_, p)| p.clone()).collect();

    let mut fields: Vec<VoxelField> = objects.iter().map(|(f, _)| f.clone()).collect();
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut best_objective = f64::NEG_INFINITY;
    let mut best_params: Vec<Vec<f64>> = fields.iter().map(|f| f.color_params.clone()).collect();
    let mut best_trajectory = baseline_trajectory.clone();
    let mut rollout_evals = 0usize;

    for _ in 0..cfg.iterations {
        for f in fields.iter_mut() {
            for c in f.color_params.iter_mut() {
                *c = if cfg.random_std > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            }
        }
        let refs: Vec<(&VoxelField, &RigidTransform)> = fields.iter().zip(&poses).collect();
        let obj = match evaluate(scn, &refs, None) {
            Ok((traj, obj)) => {
                rollout_evals += 1;
                if obj > best_objective {
                    best_objective = obj;
                    best_params = fields.iter().map(|f| f.color_params.clone()).collect();
                    best_trajectory = traj;
                }
                obj
            }
            Err(_) => {
                rollout_evals += 1;
                f64::NEG_INFINITY
            }
        };
        history.push(obj);
    }

    let best_history = best_so_far(&history);
    Ok(AttackResult {
        best_params,
        best_poses: poses,
        history,
        best_history,
        baseline,
        baseline_trajectory,
        best_trajectory,
        best_objective,
        rollout_evals,
        fd_rollouts: 0,
    })
}

fn pose_to_transform(pose: &ObjPose, scale: f64) -> RigidTransform {
    RigidTransform::from_yaw(pose.yaw, pose.translation, scale).unwrap()
}

const POSE_FD_EPS: f64 = 1e-2;

/// Multistart pose+texture attack: `n_initial_poses` object-pose seeds drawn
/// uniformly in bounds, each refined with finite-difference gradient ascent
/// on pose jointly with Adam color steps. Exactly `cfg.iterations` candidate
/// rollouts are consumed; FD pose probes are reported separately in
/// `fd_rollouts`.
pub fn multistart_pose_attack(
    scn: &AttackScenario,
    objects: &[(VoxelField, RigidTransform)],
    bounds: &PoseBounds,
    cfg: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    cfg.validate()?;
    bounds.validate()?;
    let n_seeds = cfg.n_initial_poses;
    if cfg.iterations < n_seeds {
        return Err(AttackError::BadConfig("iterations must be >= n_initial_poses".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (baseline_trajectory, baseline) = baseline_rollout(scn)?;

    let scales: Vec<f64> = objects.iter().map(|(_, p)| p.scale).collect();
    let mut history = Vec::new();
    let mut best_objective = f64::NEG_INFINITY;
    let mut best_params: Vec<Vec<f64>> = objects.iter().map(|(f, _)| f.color_params.clone()).collect();
    let mut best_poses: Vec<RigidTransform> = objects.iter().map(|(_, p)| p.clone()).collect();
    let mut best_trajectory = baseline_trajectory.clone();
    let mut rollout_evals = 0usize;
    let mut fd_rollouts = 0usize;
    let n_colors: usize = objects.iter().map(|(f, _)| f.color_params.len()).sum();

    for seed_idx in 0..n_seeds {
        // budget for this seed, splitting any remainder onto early seeds
        let budget = cfg.iterations / n_seeds + usize::from(seed_idx < cfg.iterations % n_seeds);
        if budget == 0 {
            continue;
        }
        let mut poses: Vec<ObjPose> = (0..objects.len())
            .map(|_| {
                let mut t = [0.0; 3];
                for k in 0..3 {
                    t[k] = rng.gen_range(bounds.min_translation[k]..=bounds.max_translation[k]);
                }
                ObjPose { translation: t, yaw: rng.gen_range(bounds.yaw_min..=bounds.yaw_max) }
            })
            .collect();
        let mut fields: Vec<VoxelField> = objects.iter().map(|(f, _)| f.clone()).collect();
        let mut adam = AdamState::new(n_colors);

        let mut consider = |obj: f64,
                            traj: Trajectory,
                            fields: &[VoxelField],
                            poses: &[ObjPose],
                            history: &mut Vec<f64>| {
            history.push(obj);
            if obj > best_objective {
                best_objective = obj;
                best_params = fields.iter().map(|f| f.color_params.clone()).collect();
                best_poses = poses.iter().zip(&scales).map(|(p, &s)| pose_to_transform(p, s)).collect();
                best_trajectory = traj;
            }
        };

        for step in 0..budget {
            let xf: Vec<RigidTransform> =
                poses.iter().zip(&scales).map(|(p, &s)| pose_to_transform(p, s)).collect();
            let refs: Vec<(&VoxelField, &RigidTransform)> = fields.iter().zip(&xf).collect();
            match evaluate(scn, &refs, None) {
                Ok((traj, obj)) => {
                    rollout_evals += 1;
                    consider(obj, traj.clone(), &fields, &poses, &mut history);
                    if step + 1 == budget {
                        break;
                    }
                    // color ascent step via the adjoint gradient
                    let adj = adjoint_backward(&traj, &scn.dynamics, scn.path)?;
                    let g = assemble_param_gradient(
                        &traj,
                        &adj,
                        scn.scene,
                        &refs,
                        scn.policy,
                        &scn.dynamics,
                        &scn.rollout.rig,
                        &scn.rollout.quad,
                    )?;
                    let grad_flat: Vec<f64> = g.per_object.iter().flatten().copied().collect();
                    let mut flat: Vec<f64> =
                        fields.iter().flat_map(|f| f.color_params.iter().copied()).collect();
                    adam.step(&mut flat, &grad_flat, cfg.learning_rate);
                    let mut off = 0;
                    for f in fields.iter_mut() {
                        let n = f.color_params.len();
                        f.color_params.copy_from_slice(&flat[off..off + n]);
                        off += n;
                    }
                    // pose ascent step via central finite differences
                    for oi in 0..poses.len() {
                        let mut grad = [0.0; 4];
                        for k in 0..4 {
                            let mut probe = |delta: f64| -> f64 {
                                let mut p2 = poses.clone();
                                match k {
                                    0..=2 => p2[oi].translation[k] += delta,
                                    _ => p2[oi].yaw += delta,
                                }
                                let xf2: Vec<RigidTransform> =
                                    p2.iter().zip(&scales).map(|(p, &s)| pose_to_transform(p, s)).collect();
                                let refs2: Vec<(&VoxelField, &RigidTransform)> =
                                    fields.iter().zip(&xf2).collect();
                                fd_rollouts += 1;
                                evaluate(scn, &refs2, None).map(|(_, o)| o).unwrap_or(f64::NEG_INFINITY)
                            };
                            let hi = probe(POSE_FD_EPS);
                            let lo = probe(-POSE_FD_EPS);
                            grad[k] = if hi.is_finite() && lo.is_finite() {
                                (hi - lo) / (2.0 * POSE_FD_EPS)
                            } else {
                                0.0
                            };
                        }
                        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                        if norm > 0.0 {
                            // normalized ascent step bounds pose movement by lr
                            for k in 0..3 {
                                poses[oi].translation[k] += cfg.learning_rate * grad[k] / norm;
                            }
                            poses[oi].yaw += cfg.learning_rate * grad[3] / norm;
                            bounds.clamp(&mut poses[oi]);
                        }
                    }
                }
                Err(_) => {
                    rollout_evals += 1;
                    history.push(f64::NEG_INFINITY);
                    break; // abandon this seed, keep the budget accounting honest
                }
            }
        }
    }

    let best_history = best_so_far(&history);
    Ok(AttackResult {
        best_params,
        best_poses,
        history,
        best_history,
        baseline,
        baseline_trajectory,
        best_trajectory,
        best_objective,
        rollout_evals,
        fd_rollouts,
    })
}
