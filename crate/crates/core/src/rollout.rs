//! Closed-loop simulation tying renderer, policy, and dynamics together,
//! plus reference paths and the cross-track-error objective.

use crate::field::{RigidTransform, VoxelField};
use crate::math::{self, Vec3};
use crate::policy::{expert_control, ExpertConfig, PolicyNet};
use crate::render::{
    opaque_depth_composite, render_frame, render_objects_frame, Camera, QuadConfig, RenderOutput,
};
use crate::vehicle::{dynamics_step, DynamicsParams, VehicleState};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("path needs at least 2 waypoints, got {0}")]
    TooFewWaypoints(usize),
    #[error("consecutive waypoints {0} and {1} coincide")]
    DegenerateSegment(usize, usize),
    #[error("non-finite state at step {step}: ({x}, {y}, {heading})")]
    NonFiniteState { step: usize, x: f64, y: f64, heading: f64 },
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
    #[error(transparent)]
    Render(#[from] crate::render::RenderError),
}

/// Piecewise-linear reference path in the ground plane.
#[derive(Debug, Clone)]
pub struct ReferencePath {
    pub waypoints: Vec<[f64; 2]>,
    pub closed: bool,
    /// Cumulative arc length at each waypoint (plus the closing segment).
    cumlen: Vec<f64>,
}

impl ReferencePath {
    pub fn new(waypoints: Vec<[f64; 2]>, closed: bool) -> Result<Self, RolloutError> {
        if waypoints.len() < 2 {
            return Err(RolloutError::TooFewWaypoints(waypoints.len()));
        }
        let n = waypoints.len();
        let seg_count = if closed { n } else { n - 1 };
        let mut cumlen = Vec::with_capacity(seg_count + 1);
        cumlen.push(0.0);
        for i in 0..seg_count {
            let a = waypoints[i];
            let b = waypoints[(i + 1) % n];
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            if len == 0.0 {
                return Err(RolloutError::DegenerateSegment(i, (i + 1) % n));
            }
            cumlen.push(cumlen.last().unwrap() + len);
        }
        Ok(Self { waypoints, closed, cumlen })
    }

    pub fn total_length(&self) -> f64 {
        *self.cumlen.last().unwrap()
    }

    fn segment_count(&self) -> usize {
        self.cumlen.len() - 1
    }

    fn segment(&self, i: usize) -> ([f64; 2], [f64; 2]) {
        let n = self.waypoints.len();
        (self.waypoints[i], self.waypoints[(i + 1) % n])
    }

    fn clamp_arclength(&self, s: f64) -> f64 {
        if self.closed {
            s.rem_euclid(self.total_length())
        } else {
            s.clamp(0.0, self.total_length())
        }
    }

    /// Point at arc length `s` (wrapped for closed paths, clamped for open).
    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let s = self.clamp_arclength(s);
        for i in 0..self.segment_count() {
            if s <= self.cumlen[i + 1] || i == self.segment_count() - 1 {
                let (a, b) = self.segment(i);
                let seg_len = self.cumlen[i + 1] - self.cumlen[i];
                let t = ((s - self.cumlen[i]) / seg_len).clamp(0.0, 1.0);
                return [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
            }
        }
        unreachable!()
    }

    /// Unit tangent of the segment containing arc length `s`.
    pub fn tangent_at(&self, s: f64) -> [f64; 2] {
        let s = self.clamp_arclength(s);
        let mut seg = self.segment_count() - 1;
        for i in 0..self.segment_count() {
            if s < self.cumlen[i + 1] {
                seg = i;
                break;
            }
        }
        let (a, b) = self.segment(seg);
        let len = self.cumlen[seg + 1] - self.cumlen[seg];
        [(b[0] - a[0]) / len, (b[1] - a[1]) / len]
    }

    /// Arc length of the closest point on the polyline to `p`.
    pub fn closest_arclength(&self, p: [f64; 2]) -> f64 {
        let (_, _, s) = self.project(p);
        s
    }

    /// (closest point, segment index, arc length) with the smaller segment
    /// index winning ties.
    fn project(&self, p: [f64; 2]) -> ([f64; 2], usize, f64) {
        let mut best_d2 = f64::INFINITY;
        let mut best = ([0.0, 0.0], 0usize, 0.0);
        for i in 0..self.segment_count() {
            let (a, b) = self.segment(i);
            let ab = [b[0] - a[0], b[1] - a[1]];
            let len2 = ab[0] * ab[0] + ab[1] * ab[1];
            let t = (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0);
            let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
            let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
            if d2 < best_d2 {
                best_d2 = d2;
                best = (q, i, self.cumlen[i] + t * len2.sqrt());
            }
        }
        best
    }
}

/// Unsigned distance from the vehicle position to the reference polyline,
/// plus its gradient with respect to (x, y, heading). The heading component
/// is always zero; at zero distance the gradient is zero.
pub fn cte(state: &VehicleState, path: &ReferencePath) -> (f64, Vec3) {
    let p = [state.x, state.y];
    let (q, _, _) = path.project(p);
    let dx = p[0] - q[0];
    let dy = p[1] - q[1];
    let d = (dx * dx + dy * dy).sqrt();
    if d < 1e-12 {
        (d, [0.0, 0.0, 0.0])
    } else {
        (d, [dx / d, dy / d, 0.0])
    }
}

/// Camera mounted on the vehicle: forward-facing with a fixed height and
/// downward pitch. The camera frame is +x right, +y down, +z forward.
#[derive(Debug, Clone)]
pub struct CameraRig {
    /// Offset of the camera ahead of the vehicle reference point, meters.
    pub forward_offset: f64,
    pub height: f64,
    /// Downward pitch, radians.
    pub pitch: f64,
    pub focal: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub near: f64,
    pub far: f64,
}

impl CameraRig {
    pub fn camera_for(&self, state: &VehicleState) -> Camera {
        let (sh, ch) = state.heading.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        let forward = [ch * cp, sh * cp, -sp];
        let right = math::normalize(math::cross(forward, [0.0, 0.0, 1.0]));
        let down = math::cross(forward, right);
        let rotation = [
            [right[0], down[0], forward[0]],
            [right[1], down[1], forward[1]],
            [right[2], down[2], forward[2]],
        ];
        let translation = [
            state.x + self.forward_offset * ch,
            state.y + self.forward_offset * sh,
            self.height,
        ];
        Camera {
            pose: RigidTransform { rotation, translation, scale: 1.0 },
            focal: self.focal,
            width: self.image_width,
            height: self.image_height,
            near: self.near,
            far: self.far,
        }
    }
}

/// How observations are formed from scene and object fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensorMode {
    /// Alpha-composite objects into the scene (surrogate-scene rendering).
    Composite,
    /// Opaque depth compositing of objects over the deployment frame.
    OpaqueTransfer,
}

#[derive(Debug, Clone)]
pub struct RolloutConfig {
    /// Horizon T (number of control steps; T+1 states).
    pub horizon: usize,
    pub rig: CameraRig,
    pub quad: QuadConfig,
    pub start: VehicleState,
    pub seed: u64,
    /// Keep rendered observations in the trajectory (debug/export only).
    pub retain_frames: bool,
}

#[derive(Debug, Clone)]
pub enum Controller<'a> {
    Policy(&'a PolicyNet),
    Expert(&'a ExpertConfig),
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    /// T+1 states.
    pub states: Vec<VehicleState>,
    /// T controls.
    pub controls: Vec<f64>,
    /// T+1 per-state costs C(x_t) = -CTE(x_t).
    pub costs: Vec<f64>,
    /// Optional retained RGB observations (T frames).
    pub frames: Option<Vec<Vec<f64>>>,
}

impl Trajectory {
    pub fn objective(&self) -> f64 {
        self.costs.iter().sum()
    }
}

/// Render the observation for a state under the given sensor mode.
pub fn render_observation(
    scene: &VoxelField,
    objects: &[(&VoxelField, &RigidTransform)],
    camera: &Camera,
    quad: &QuadConfig,
    mode: SensorMode,
    retain_cache: bool,
) -> (Vec<f64>, Option<RenderOutput>) {
    match mode {
        SensorMode::Composite => {
            let frame = render_frame(scene, objects, camera, quad, retain_cache);
            let rgb = frame.color.clone();
            (rgb, Some(frame))
        }
        SensorMode::OpaqueTransfer => {
            let deploy = render_frame(scene, &[], camera, quad, false);
            if objects.is_empty() {
                let rgb = deploy.color.clone();
                return (rgb, Some(deploy));
            }
            let obj = render_objects_frame(objects, camera, quad);
            let rgb = opaque_depth_composite(&deploy, &obj);
            (rgb, Some(deploy))
        }
    }
}

/// Closed-loop rollout: render, control, integrate, accumulate J = sum C(x_t).
///
/// Camera poses are derived from the state under the stop-gradient
/// convention: no gradient flows from observations back into the state.
pub fn rollout_closed_loop(
    scene: &VoxelField,
    objects: &[(&VoxelField, &RigidTransform)],
    controller: &Controller,
    dynamics: &DynamicsParams,
    path: &ReferencePath,
    cfg: &RolloutConfig,
    mode: SensorMode,
) -> Result<(Trajectory, f64), RolloutError> {
    let mut states = Vec::with_capacity(cfg.horizon + 1);
    let mut controls = Vec::with_capacity(cfg.horizon);
    let mut costs = Vec::with_capacity(cfg.horizon + 1);
    let mut frames = cfg.retain_frames.then(Vec::new);

    let mut state = cfg.start;
    for t in 0..=cfg.horizon {
        if !state.is_finite() {
            return Err(RolloutError::NonFiniteState { step: t, x: state.x, y: state.y, heading: state.heading });
        }
        states.push(state);
        costs.push(-cte(&state, path).0);
        if t == cfg.horizon {
            break;
        }
        let u = match controller {
            Controller::Expert(e) => expert_control(&state, path, e),
            Controller::Policy(net) => {
                let camera = cfg.rig.camera_for(&state);
                let (rgb, _) = render_observation(scene, objects, &camera, &cfg.quad, mode, false);
                let obs = net.observe(&rgb);
                let u = net.forward(&obs, None)?;
                if let Some(f) = frames.as_mut() {
                    f.push(rgb);
                }
                u
            }
        };
        controls.push(u);
        state = dynamics_step(&state, u, dynamics);
    }
    let traj = Trajectory { states, controls, costs, frames };
    let j = traj.objective();
    Ok((traj, j))
}

/// Headline evaluation metric: sum of CTE over all trajectory states.
pub fn total_cte(trajectory: &Trajectory, path: &ReferencePath) -> f64 {
    trajectory.states.iter().map(|s| cte(s, path).0).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Aabb;
    use crate::policy::InputSpec;
    use crate::vehicle::DynamicsModel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn l_path() -> ReferencePath {
        ReferencePath::new(vec![[0.0, 0.0], [4.0, 0.0], [4.0, 3.0]], false).unwrap()
    }

    #[test]
    fn path_validation() {
        assert!(ReferencePath::new(vec![[0.0, 0.0]], false).is_err());
        assert!(ReferencePath::new(vec![[0.0, 0.0], [0.0, 0.0]], false).is_err());
    }

    #[test]
    fn point_and_tangent_lookup() {
        let p = l_path();
        assert_eq!(p.total_length(), 7.0);
        assert_eq!(p.point_at(2.0), [2.0, 0.0]);
        assert_eq!(p.point_at(5.0), [4.0, 1.0]);
        assert_eq!(p.tangent_at(1.0), [1.0, 0.0]);
        assert_eq!(p.tangent_at(6.0), [0.0, 1.0]);
        // closed path wraps
        let sq = ReferencePath::new(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]], true).unwrap();
        assert_eq!(sq.total_length(), 4.0);
        let p0 = sq.point_at(4.5);
        assert!((p0[0] - 0.5).abs() < 1e-12 && p0[1].abs() < 1e-12);
    }

    #[test]
    fn cte_on_path_is_zero() {
        let p = l_path();
        let (d, g) = cte(&VehicleState::new(2.0, 0.0, 0.3), &p);
        assert!(d < 1e-12);
        assert_eq!(g, [0.0; 3]);
    }

    #[test]
    fn cte_straight_segment_distance_and_gradient() {
        let p = ReferencePath::new(vec![[0.0, 0.0], [10.0, 0.0]], false).unwrap();
        let (d, g) = cte(&VehicleState::new(3.0, 2.0, 0.0), &p);
        assert!((d - 2.0).abs() < 1e-12);
        assert!((g[0]).abs() < 1e-12 && (g[1] - 1.0).abs() < 1e-12 && g[2] == 0.0);
    }

    #[test]
    fn cte_matches_dense_sampling_oracle() {
        let p = l_path();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let s = VehicleState::new(rng.gen::<f64>() * 8.0 - 2.0, rng.gen::<f64>() * 6.0 - 2.0, 0.0);
            let (d, _) = cte(&s, &p);
            let mut best = f64::INFINITY;
            let n = 100_000;
            for i in 0..=n {
                let q = p.point_at(p.total_length() * i as f64 / n as f64);
                let dd = ((s.x - q[0]).powi(2) + (s.y - q[1]).powi(2)).sqrt();
                best = best.min(dd);
            }
            assert!((d - best).abs() < 1e-4, "cte {d} vs dense {best}");
        }
    }

    fn vacuum_scene() -> VoxelField {
        VoxelField::new([2, 2, 2], Aabb::new([-20.0, -20.0, 0.0], [20.0, 20.0, 3.0]).unwrap()).unwrap()
    }

    fn rig() -> CameraRig {
        CameraRig {
            forward_offset: 0.1,
            height: 0.4,
            pitch: 0.15,
            focal: 8.0,
            image_width: 8,
            image_height: 8,
            near: 0.05,
            far: 30.0,
        }
    }

    fn cfg(horizon: usize) -> RolloutConfig {
        RolloutConfig {
            horizon,
            rig: rig(),
            quad: QuadConfig { scene_samples: 16, object_samples: 8, background: [0.5; 3] },
            start: VehicleState::new(0.0, 0.0, 0.0),
            seed: 0,
            retain_frames: false,
        }
    }

    #[test]
    fn zero_policy_straight_reference_gives_zero_objective() {
        let scene = vacuum_scene();
        let path = ReferencePath::new(vec![[0.0, 0.0], [10.0, 0.0]], false).unwrap();
        let net = PolicyNet::zeros(InputSpec { height: 8, width: 8, channels: 1, goal_len: 0 }, &[4], 1.0);
        let dyn_p = DynamicsParams { speed: 1.0, wheelbase: 0.3, dt: 0.1, model: DynamicsModel::Dubins };
        let (traj, j) =
            rollout_closed_loop(&scene, &[], &Controller::Policy(&net), &dyn_p, &path, &cfg(20), SensorMode::Composite)
                .unwrap();
        assert!(j.abs() < 1e-12, "{j}");
        assert!(traj.states.iter().all(|s| s.y == 0.0 && s.heading == 0.0));
        assert_eq!(traj.states.len(), 21);
        assert_eq!(traj.controls.len(), 20);
    }

    #[test]
    fn expert_tracks_l_turn() {
        let scene = vacuum_scene();
        let path = l_path();
        let expert = ExpertConfig { lookahead: 0.8, gain: 2.0, steering_limit: 2.0 };
        let dyn_p = DynamicsParams { speed: 1.0, wheelbase: 0.3, dt: 0.05, model: DynamicsModel::Dubins };
        let mut c = cfg(130);
        c.start = VehicleState::new(0.0, 0.0, 0.0);
        let (traj, _) =
            rollout_closed_loop(&scene, &[], &Controller::Expert(&expert), &dyn_p, &path, &c, SensorMode::Composite)
                .unwrap();
        let mean = total_cte(&traj, &path) / traj.states.len() as f64;
        assert!(mean < 0.1, "expert mean CTE {mean}");
        // reaches the far leg
        let last = traj.states.last().unwrap();
        assert!(last.y > 1.5, "end state {last:?}");
    }

    #[test]
    fn rollout_deterministic_and_replayable() {
        let scene = vacuum_scene();
        let path = l_path();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = PolicyNet::random_init(
            InputSpec { height: 8, width: 8, channels: 1, goal_len: 0 },
            &[6],
            1.0,
            &mut rng,
        );
        let dyn_p = DynamicsParams { speed: 1.0, wheelbase: 0.3, dt: 0.1, model: DynamicsModel::Dubins };
        let run = || {
            rollout_closed_loop(&scene, &[], &Controller::Policy(&net), &dyn_p, &path, &cfg(15), SensorMode::Composite)
                .unwrap()
        };
        let (t1, j1) = run();
        let (t2, j2) = run();
        assert_eq!(j1, j2);
        assert_eq!(t1.states, t2.states);
        // replay: stored controls re-applied through dynamics_step reproduce states
        let mut s = t1.states[0];
        for (t, &u) in t1.controls.iter().enumerate() {
            s = dynamics_step(&s, u, &dyn_p);
            assert_eq!(s, t1.states[t + 1], "replay diverged at step {t}");
        }
    }

    #[test]
    fn objective_is_negative_total_cte() {
        let scene = vacuum_scene();
        let path = l_path();
        let expert = ExpertConfig { lookahead: 0.8, gain: 2.0, steering_limit: 2.0 };
        let dyn_p = DynamicsParams { speed: 1.0, wheelbase: 0.3, dt: 0.1, model: DynamicsModel::Dubins };
        let mut c = cfg(30);
        c.start = VehicleState::new(0.3, 0.7, 0.2);
        let (traj, j) =
            rollout_closed_loop(&scene, &[], &Controller::Expert(&expert), &dyn_p, &path, &c, SensorMode::Composite)
                .unwrap();
        assert!((j + total_cte(&traj, &path)).abs() < 1e-12);
    }

    #[test]
    fn total_cte_constant_offset() {
        let path = ReferencePath::new(vec![[0.0, 0.0], [100.0, 0.0]], false).unwrap();
        let states = (0..10).map(|i| VehicleState::new(i as f64, 2.5, 0.0)).collect();
        let traj = Trajectory { states, controls: vec![0.0; 9], costs: vec![0.0; 10], frames: None };
        assert!((total_cte(&traj, &path) - 25.0).abs() < 1e-12);
    }

    #[test]
    fn camera_rig_center_ray_points_along_heading() {
        let r = CameraRig { pitch: 0.0, ..rig() };
        let cam = r.camera_for(&VehicleState::new(1.0, 2.0, std::f64::consts::FRAC_PI_2));
        let ray = cam.pixel_ray(4, 4);
        // 8x8 image: center-ish ray close to +y
        assert!(ray.direction[1] > 0.98, "{:?}", ray.direction);
        assert!((cam.pose.translation[2] - 0.4).abs() < 1e-12);
        assert!(cam.pose.orthonormality_deviation() < 1e-9);
    }
}
