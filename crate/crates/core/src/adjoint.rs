//! Constant-memory gradient of the episode objective with respect to object
//! color parameters via the discrete adjoint recursion.
//!
//! With the step constraint written as x_t - F(x_{t-1}, theta) = 0 the
//! recursion is
//!     lambda_T = dCTE/dx_T,   lambda_t = dCTE/dx_t + (df/dx_t)^T lambda_{t+1}
//! (cost C = -CTE, so the cost gradients flip sign into the lambdas).
//! Under the stop-gradient convention the render/policy path contributes no
//! state Jacobian, so each step only needs the 3x3 dynamics Jacobian. The
//! parameter gradient re-renders one frame at a time (recompute, not store),
//! which keeps peak render state independent of the horizon.

use crate::field::{RigidTransform, VoxelField};
use crate::math::{self, Vec3};
use crate::policy::PolicyNet;
use crate::render::{render_frame, render_vjp_color, QuadConfig};
use crate::rollout::{cte, CameraRig, ReferencePath, Trajectory};
use crate::vehicle::{dynamics_jacobians, DynamicsParams};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdjointError {
    #[error("non-finite adjoint variable at step {0}")]
    NonFinite(usize),
    #[error("trajectory has no control steps")]
    EmptyTrajectory,
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
    #[error(transparent)]
    Render(#[from] crate::render::RenderError),
}

/// Adjoint variables lambda_t for t = 1..T; `lambdas[t-1]` holds lambda_t.
#[derive(Debug, Clone)]
pub struct AdjointState {
    pub lambdas: Vec<Vec3>,
}

/// Per-object color-parameter gradients of J = sum_t C(x_t), plus the peak
/// render cache bytes retained at any point of the backward pass.
#[derive(Debug, Clone)]
pub struct ParamGradient {
    pub per_object: Vec<Vec<f64>>,
    pub peak_cache_bytes: usize,
}

/// Backward recursion over a replayable trajectory.
pub fn adjoint_backward(
    trajectory: &Trajectory,
    dynamics: &DynamicsParams,
    path: &ReferencePath,
) -> Result<AdjointState, AdjointError> {
    let t_final = trajectory.controls.len();
    if t_final == 0 {
        return Err(AdjointError::EmptyTrajectory);
    }
    let mut lambdas = vec![[0.0; 3]; t_final];
    let (_, g_t) = cte(&trajectory.states[t_final], path);
    lambdas[t_final - 1] = g_t;
    for t in (1..t_final).rev() {
        let (a, _) = dynamics_jacobians(&trajectory.states[t], trajectory.controls[t], dynamics);
        let (_, g) = cte(&trajectory.states[t], path);
        let next = lambdas[t];
        let carried = math::mat_t_vec(&a, next);
        let lam = math::add(g, carried);
        if lam.iter().any(|v| !v.is_finite()) {
            return Err(AdjointError::NonFinite(t));
        }
        lambdas[t - 1] = lam;
    }
    Ok(AdjointState { lambdas })
}

fn vjp_for_step(
    scene: &VoxelField,
    objects: &[(&VoxelField, &RigidTransform)],
    policy: &PolicyNet,
    rig: &CameraRig,
    quad: &QuadConfig,
    state: &crate::vehicle::VehicleState,
    seed_scalar: f64,
) -> Result<(Vec<Vec<f64>>, usize), AdjointError> {
    let camera = rig.camera_for(state);
    let frame = render_frame(scene, objects, &camera, quad, true);
    let cache_bytes = frame.quad_cache.as_ref().map_or(0, |c| c.approx_bytes());
    let obs = policy.observe(&frame.color);
    let obs_cot = policy.input_grad(&obs, None, seed_scalar)?;
    let rgb_cot = policy.obs_cot_to_rgb(&obs_cot);
    let grads = render_vjp_color(objects, &camera, &frame, &rgb_cot)?;
    Ok((grads, cache_bytes))
}

/// Assemble grad_theta J from the adjoint variables.
///
/// Per step: scalar s_t = lambda_{t+1} . df/du, a cotangent image from the
/// policy with seed s_t, and accumulation through the render VJP with the
/// sign flipped for the -dF/dtheta convention. One frame's quadrature cache
/// is alive at a time.
pub fn assemble_param_gradient(
    trajectory: &Trajectory,
    adjoint: &AdjointState,
    scene: &VoxelField,
    objects: &[(&VoxelField, &RigidTransform)],
    policy: &PolicyNet,
    dynamics: &DynamicsParams,
    rig: &CameraRig,
    quad: &QuadConfig,
) -> Result<ParamGradient, AdjointError> {
    let mut total: Vec<Vec<f64>> =
        objects.iter().map(|(f, _)| vec![0.0; f.color_params.len()]).collect();
    let mut peak = 0usize;
    for t in 0..trajectory.controls.len() {
        let (_, b) = dynamics_jacobians(&trajectory.states[t], trajectory.controls[t], dynamics);
        let s_t = math::dot(adjoint.lambdas[t], b);
        if s_t == 0.0 {
            continue;
        }
        let (grads, bytes) =
            vjp_for_step(scene, objects, policy, rig, quad, &trajectory.states[t], s_t)?;
        peak = peak.max(bytes);
        for (tot, g) in total.iter_mut().zip(grads) {
            for (a, v) in tot.iter_mut().zip(g) {
                *a -= v;
            }
        }
    }
    Ok(ParamGradient { per_object: total, peak_cache_bytes: peak })
}

/// Reference gradient through a fully stored unrolled computation: every
/// frame's quadrature cache is rendered up front and retained, then a single
/// reverse sweep consumes them. Memory grows linearly with the horizon; used
/// to cross-check the constant-memory path on small instances.
pub fn unrolled_gradient(
    trajectory: &Trajectory,
    scene: &VoxelField,
    objects: &[(&VoxelField, &RigidTransform)],
    policy: &PolicyNet,
    dynamics: &DynamicsParams,
    path: &ReferencePath,
    rig: &CameraRig,
    quad: &QuadConfig,
) -> Result<ParamGradient, AdjointError> {
    let t_final = trajectory.controls.len();
    if t_final == 0 {
        return Err(AdjointError::EmptyTrajectory);
    }
    // store all frames (the memory-hungry path)
    let mut stored = Vec::with_capacity(t_final);
    let mut total_bytes = 0usize;
    for t in 0..t_final {
        let camera = rig.camera_for(&trajectory.states[t]);
        let frame = render_frame(scene, objects, &camera, quad, true);
        total_bytes += frame.quad_cache.as_ref().map_or(0, |c| c.approx_bytes());
        stored.push((camera, frame));
    }

    let mut total: Vec<Vec<f64>> =
        objects.iter().map(|(f, _)| vec![0.0; f.color_params.len()]).collect();
    let (_, mut lam) = cte(&trajectory.states[t_final], path);
    for t in (0..t_final).rev() {
        let (a, b) = dynamics_jacobians(&trajectory.states[t], trajectory.controls[t], dynamics);
        let s_t = math::dot(lam, b);
        if s_t != 0.0 {
            let (camera, frame) = &stored[t];
            let obs = policy.observe(&frame.color);
            let obs_cot = policy.input_grad(&obs, None, s_t)?;
            let rgb_cot = policy.obs_cot_to_rgb(&obs_cot);
            let grads = render_vjp_color(objects, camera, frame, &rgb_cot)?;
            for (tot, g) in total.iter_mut().zip(grads) {
                for (acc, v) in tot.iter_mut().zip(g) {
                    *acc -= v;
                }
            }
        }
        if t > 0 {
            let (_, g) = cte(&trajectory.states[t], path);
            lam = math::add(g, math::mat_t_vec(&a, lam));
        }
    }
    Ok(ParamGradient { per_object: total, peak_cache_bytes: total_bytes })
}

/// Central-difference spot check of an analytic gradient on randomly chosen
/// coordinates. Returns the worst relative error.
pub fn finite_difference_check(
    mut loss: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    n_probe: usize,
    eps: f64,
    rng: &mut impl Rng,
) -> f64 {
    assert!(eps > 0.0);
    assert_eq!(params.len(), analytic.len());
    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut attempts = 0usize;
    while checked < n_probe && attempts < n_probe * 50 {
        attempts += 1;
        let k = rng.gen_range(0..params.len());
        let base = work[k];
        work[k] = base + eps;
        let hi = loss(&work);
        work[k] = base - eps;
        let lo = loss(&work);
        work[k] = base;
        let fd = (hi - lo) / (2.0 * eps);
        // skip coordinates negligible relative to the gradient's scale:
        // central differences carry no signal there
        let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if fd.abs().max(analytic[k].abs()) < (1e-5 * scale).max(1e-10) {
            continue;
        }
        let rel = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs());
        worst = worst.max(rel);
        checked += 1;
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Aabb;
    use crate::math::{logit, softplus_inv};
    use crate::policy::InputSpec;
    use crate::rollout::{rollout_closed_loop, Controller, RolloutConfig, SensorMode};
    use crate::vehicle::{dynamics_step, DynamicsModel, VehicleState};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dyn_params() -> DynamicsParams {
        DynamicsParams { speed: 1.0, wheelbase: 0.3, dt: 0.1, model: DynamicsModel::Dubins }
    }

    fn straight_path() -> ReferencePath {
        ReferencePath::new(vec![[-5.0, 0.0], [50.0, 0.0]], false).unwrap()
    }

    fn offset_trajectory(t_final: usize, offset: f64) -> Trajectory {
        // constant lateral offset, heading 0, controls 0
        let states = (0..=t_final).map(|i| VehicleState::new(i as f64 * 0.1, offset, 0.0)).collect();
        Trajectory { states, controls: vec![0.0; t_final], costs: vec![-offset; t_final + 1], frames: None }
    }

    #[test]
    fn boundary_condition_t1() {
        let traj = offset_trajectory(1, 0.7);
        let adj = adjoint_backward(&traj, &dyn_params(), &straight_path()).unwrap();
        assert_eq!(adj.lambdas.len(), 1);
        // lambda_1 = dCTE/dx_1 = (0, 1, 0) for a positive offset
        let lam = adj.lambdas[0];
        assert!(lam[0].abs() < 1e-12 && (lam[1] - 1.0).abs() < 1e-12 && lam[2].abs() < 1e-12, "{lam:?}");
    }

    #[test]
    fn constant_gradient_unrolls_to_arithmetic_series() {
        // parallel offset: dCTE/dx = (0,1,0) at every state; with heading 0 the
        // dynamics Jacobian leaves the y component untouched, so the y entry of
        // lambda_t is the count of remaining cost terms: T - t + 1.
        let t_final = 3;
        let traj = offset_trajectory(t_final, 0.5);
        let adj = adjoint_backward(&traj, &dyn_params(), &straight_path()).unwrap();
        for t in 1..=t_final {
            let lam = adj.lambdas[t - 1];
            assert!((lam[1] - (t_final - t + 1) as f64).abs() < 1e-12, "lambda_{t} = {lam:?}");
            assert!(lam[0].abs() < 1e-12);
        }
        // heading entry picks up dt*v per remaining step after the first
        assert!((adj.lambdas[0][2] - 0.1 * (1.0 + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn lambda_matches_replay_finite_differences() {
        // lambda_t = d(sum_{s>=t} CTE(x_s))/dx_t with controls held fixed
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let path = ReferencePath::new(vec![[-5.0, 0.0], [5.0, 0.5], [9.0, 3.0]], false).unwrap();
        let dp = dyn_params();
        let t_final = 8;
        let mut states = vec![VehicleState::new(0.0, 1.0, 0.2)];
        let mut controls = Vec::new();
        for _ in 0..t_final {
            let u = rng.gen::<f64>() - 0.5;
            controls.push(u);
            states.push(dynamics_step(states.last().unwrap(), u, &dp));
        }
        let traj = Trajectory { states: states.clone(), controls: controls.clone(), costs: vec![0.0; t_final + 1], frames: None };
        let adj = adjoint_backward(&traj, &dp, &path).unwrap();

        let tail_cost = |x1: VehicleState| -> f64 {
            let mut s = x1;
            let mut acc = cte(&s, &path).0;
            for &u in &controls[1..] {
                s = dynamics_step(&s, u, &dp);
                acc += cte(&s, &path).0;
            }
            acc
        };
        let eps = 1e-6;
        for j in 0..3 {
            let mut hi = states[1];
            let mut lo = states[1];
            match j {
                0 => { hi.x += eps; lo.x -= eps; }
                1 => { hi.y += eps; lo.y -= eps; }
                _ => { hi.heading += eps; lo.heading -= eps; }
            }
            let fd = (tail_cost(hi) - tail_cost(lo)) / (2.0 * eps);
            assert!((fd - adj.lambdas[0][j]).abs() < 1e-6, "component {j}: {fd} vs {}", adj.lambdas[0][j]);
        }
    }

    #[test]
    fn fd_check_exact_on_linear_and_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params: Vec<f64> = (0..10).map(|_| rng.gen::<f64>()).collect();
        let coefs: Vec<f64> = (0..10).map(|_| rng.gen::<f64>() - 0.5).collect();
        let c2 = coefs.clone();
        let linear = move |p: &[f64]| -> f64 { p.iter().zip(&c2).map(|(a, b)| a * b).sum() };
        let analytic = coefs.clone();
        let err = finite_difference_check(linear, &params, &analytic, 10, 1e-5, &mut rng);
        assert!(err < 1e-9, "linear fd error {err}");

        let quad = |p: &[f64]| -> f64 { p.iter().map(|a| a * a).sum() };
        let analytic: Vec<f64> = params.iter().map(|p| 2.0 * p).collect();
        let err = finite_difference_check(quad, &params, &analytic, 10, 1e-5, &mut rng);
        assert!(err < 1e-9, "quadratic fd error {err}");
    }

    struct Tiny {
        scene: VoxelField,
        object: VoxelField,
        xf: RigidTransform,
        policy: PolicyNet,
        path: ReferencePath,
        cfg: RolloutConfig,
        dp: DynamicsParams,
    }

    fn tiny_scenario(seed: u64) -> Tiny {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sbounds = Aabb::new([-2.0, -4.0, 0.0], [8.0, 4.0, 2.0]).unwrap();
        let mut scene = VoxelField::new([10, 10, 4], sbounds).unwrap();
        scene.density_params.iter_mut().for_each(|d| *d = rng.gen::<f64>() * 2.0 - 2.0);
        scene.color_params.iter_mut().for_each(|c| *c = rng.gen::<f64>() * 2.0 - 1.0);

        let obounds = Aabb::new([-0.5; 3], [0.5; 3]).unwrap();
        let mut object = VoxelField::new([4, 4, 4], obounds).unwrap();
        object.density_params.iter_mut().for_each(|d| *d = softplus_inv(4.0));
        object.color_params.iter_mut().for_each(|c| *c = logit(0.5) + rng.gen::<f64>() - 0.5);
        let xf = RigidTransform::from_yaw(0.2, [2.0, 0.3, 0.5], 1.0).unwrap();

        let spec = InputSpec { height: 8, width: 8, channels: 1, goal_len: 0 };
        let policy = PolicyNet::random_init(spec, &[8], 1.0, &mut rng);
        let path = ReferencePath::new(vec![[-2.0, 0.3], [20.0, 0.4]], false).unwrap();
        let cfg = RolloutConfig {
            horizon: 3,
            rig: CameraRig {
                forward_offset: 0.1,
                height: 0.5,
                pitch: 0.1,
                focal: 6.0,
                image_width: 8,
                image_height: 8,
                near: 0.05,
                far: 15.0,
            },
            quad: QuadConfig { scene_samples: 24, object_samples: 12, background: [0.5; 3] },
            start: VehicleState::new(0.0, 0.0, 0.0),
            seed: 0,
            retain_frames: false,
        };
        Tiny { scene, object, xf, policy, path, cfg, dp: dyn_params() }
    }

    fn objective(t: &Tiny, color_params: &[f64]) -> f64 {
        let mut obj = t.object.clone();
        obj.color_params.copy_from_slice(color_params);
        let objs = [(&obj, &t.xf)];
        let (_, j) = rollout_closed_loop(
            &t.scene,
            &objs,
            &Controller::Policy(&t.policy),
            &t.dp,
            &t.path,
            &t.cfg,
            SensorMode::Composite,
        )
        .unwrap();
        j
    }

    fn adjoint_grad(t: &Tiny) -> ParamGradient {
        let objs = [(&t.object, &t.xf)];
        let (traj, _) = rollout_closed_loop(
            &t.scene,
            &objs,
            &Controller::Policy(&t.policy),
            &t.dp,
            &t.path,
            &t.cfg,
            SensorMode::Composite,
        )
        .unwrap();
        let adj = adjoint_backward(&traj, &t.dp, &t.path).unwrap();
        assemble_param_gradient(&traj, &adj, &t.scene, &objs, &t.policy, &t.dp, &t.cfg.rig, &t.cfg.quad)
            .unwrap()
    }

    #[test]
    fn invisible_object_gets_zero_gradient() {
        let mut t = tiny_scenario(31);
        t.xf = RigidTransform::from_yaw(0.0, [-6.0, 0.0, 0.5], 1.0).unwrap();
        let g = adjoint_grad(&t);
        assert!(g.per_object[0].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn adjoint_matches_end_to_end_finite_differences() {
        let t = tiny_scenario(32);
        let g = adjoint_grad(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let worst = finite_difference_check(
            |p| objective(&t, p),
            &t.object.color_params,
            &g.per_object[0],
            10,
            1e-4,
            &mut rng,
        );
        assert!(worst < 1e-3, "adjoint vs FD worst relative error {worst}");
    }

    #[test]
    fn adjoint_equals_unrolled_reverse_mode() {
        let t = tiny_scenario(33);
        let objs = [(&t.object, &t.xf)];
        let (traj, _) = rollout_closed_loop(
            &t.scene,
            &objs,
            &Controller::Policy(&t.policy),
            &t.dp,
            &t.path,
            &t.cfg,
            SensorMode::Composite,
        )
        .unwrap();
        let adj = adjoint_backward(&traj, &t.dp, &t.path).unwrap();
        let ga = assemble_param_gradient(&traj, &adj, &t.scene, &objs, &t.policy, &t.dp, &t.cfg.rig, &t.cfg.quad)
            .unwrap();
        let gu =
            unrolled_gradient(&traj, &t.scene, &objs, &t.policy, &t.dp, &t.path, &t.cfg.rig, &t.cfg.quad).unwrap();
        let norm: f64 = gu.per_object[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 0.0, "degenerate test instance");
        for (a, b) in ga.per_object[0].iter().zip(&gu.per_object[0]) {
            assert!((a - b).abs() <= 1e-8 * norm.max(1.0), "{a} vs {b}");
        }
        // unrolled retains every frame; adjoint only one
        assert!(gu.peak_cache_bytes >= ga.peak_cache_bytes * traj.controls.len() / 2);
    }

    #[test]
    fn descent_step_decreases_objective() {
        let t = tiny_scenario(34);
        let g = adjoint_grad(&t);
        let j0 = objective(&t, &t.object.color_params);
        let gnorm: f64 = g.per_object[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(gnorm > 0.0);
        let mut improved = false;
        for lr in [1e-3, 1e-2, 1e-1] {
            let p: Vec<f64> = t
                .object
                .color_params
                .iter()
                .zip(&g.per_object[0])
                .map(|(p, gi)| p - lr * gi / gnorm)
                .collect();
            if objective(&t, &p) < j0 {
                improved = true;
                break;
            }
        }
        assert!(improved, "no step size decreased J");
    }
}
