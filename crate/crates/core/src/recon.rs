//! Surrogate-scene construction: procedural deployment scenes, posed-image
//! capture, photometric voxel-field fitting, and fit-quality metrics.
//!
//! The deployment scene is a fine voxel field rasterized from track geometry
//! and rendered by the same renderer as everything else; the surrogate is a
//! fresh lower-resolution field fitted to posed images of it, which creates a
//! genuine surrogate-to-deployment gap (resolution plus fitting error).

use crate::field::{Aabb, FieldError, VoxelField};
use crate::math::{self, logit, softplus_inv, Vec3};
use crate::opt::AdamState;
use crate::render::{render_frame, Camera, QuadConfig, Ray};
use crate::rollout::{CameraRig, ReferencePath};
use crate::vehicle::VehicleState;
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReconError {
    #[error("invalid deployment spec: {0}")]
    BadSpec(String),
    #[error("invalid fit config: {0}")]
    BadFitConfig(String),
    #[error("posed image set is empty")]
    EmptyImageSet,
    #[error("image {0} has {1} values, expected {2}")]
    BadImageShape(usize, usize, usize),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Render(#[from] crate::render::RenderError),
    #[error(transparent)]
    Rollout(#[from] crate::rollout::RolloutError),
}

// ---------------------------------------------------------------------------
// Deployment scene

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrackShape {
    Straight,
    LTurn,
    SquareLoop,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeploymentSpec {
    pub shape: TrackShape,
    /// Characteristic length: straight length, L-turn leg, or loop side (m).
    pub side: f64,
    pub resolution: [usize; 3],
    pub track_width: f64,
    pub wall_height: f64,
    pub wall_thickness: f64,
    /// Lateral distance from the track centerline to the wall's inner face.
    pub wall_offset: f64,
    /// Rounding radius of the L-turn corner (m); ignored by other shapes.
    pub corner_radius: f64,
    pub ground_color: Vec3,
    pub lane_color: Vec3,
    pub left_wall_color: Vec3,
    pub right_wall_color: Vec3,
}

impl Default for DeploymentSpec {
    fn default() -> Self {
        Self {
            shape: TrackShape::LTurn,
            side: 8.0,
            resolution: [144, 144, 24],
            track_width: 2.0,
            wall_height: 1.2,
            wall_thickness: 0.4,
            wall_offset: 1.4,
            corner_radius: 2.0,
            ground_color: [0.45, 0.45, 0.45],
            lane_color: [0.9, 0.9, 0.2],
            left_wall_color: [0.85, 0.8, 0.75],
            right_wall_color: [0.2, 0.22, 0.3],
        }
    }
}

impl DeploymentSpec {
    pub fn validate(&self) -> Result<(), ReconError> {
        if !(self.side > 1.0) {
            return Err(ReconError::BadSpec("side must exceed 1 m".into()));
        }
        if self.resolution.iter().any(|&r| r < 2) {
            return Err(ReconError::BadSpec("resolution axes must be >= 2".into()));
        }
        if !(self.track_width > 0.0 && self.wall_height > 0.0 && self.wall_thickness > 0.0) {
            return Err(ReconError::BadSpec("track geometry must be positive".into()));
        }
        if !(self.wall_offset >= self.track_width / 2.0) {
            return Err(ReconError::BadSpec("walls must sit outside the track".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DeploymentScene {
    pub field: VoxelField,
    pub path: ReferencePath,
    pub spec: DeploymentSpec,
}

const DENSE_SIGMA: f64 = 50.0;
const VACUUM_RAW: f64 = -20.0;
const GROUND_HEIGHT: f64 = 0.18;
const LANE_WIDTH: f64 = 0.18;

fn reference_path_for(spec: &DeploymentSpec) -> Result<ReferencePath, ReconError> {
    let s = spec.side;
    let waypoints = match spec.shape {
        TrackShape::Straight => vec![[0.0, 0.0], [s, 0.0]],
        TrackShape::LTurn => {
            // rounded corner: straight leg, quarter arc, straight leg
            let r = spec.corner_radius.min(s * 0.45).max(0.1);
            let mut w = vec![[0.0, 0.0]];
            let n_arc = 8;
            for k in 0..=n_arc {
                let ang = -std::f64::consts::FRAC_PI_2 + k as f64 / n_arc as f64 * std::f64::consts::FRAC_PI_2;
                w.push([s - r + r * ang.cos(), r + r * ang.sin()]);
            }
            w.push([s, s]);
            w
        }
        TrackShape::SquareLoop => vec![[0.0, 0.0], [s, 0.0], [s, s], [0.0, s]],
    };
    let closed = spec.shape == TrackShape::SquareLoop;
    Ok(ReferencePath::new(waypoints, closed)?)
}

fn clamp01(c: f64) -> f64 {
    c.clamp(1e-3, 1.0 - 1e-3)
}

/// Signed lateral offset of `p` from the path (positive = left of travel).
fn signed_lateral(path: &ReferencePath, p: [f64; 2]) -> f64 {
    let s = path.closest_arclength(p);
    let c = path.point_at(s);
    let tan = path.tangent_at(s);
    let r = [p[0] - c[0], p[1] - c[1]];
    tan[0] * r[1] - tan[1] * r[0]
}

/// Rasterize ground plane, lane markings, and boundary walls into a fine
/// voxel field with a matching reference path. Deterministic given the spec.
pub fn build_deployment_scene(spec: &DeploymentSpec) -> Result<DeploymentScene, ReconError> {
    spec.validate()?;
    let path = reference_path_for(spec)?;
    let margin = spec.wall_offset + spec.wall_thickness + 1.0;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for i in 0..2 {
        let n = 256;
        for k in 0..=n {
            let p = path.point_at(path.total_length() * k as f64 / n as f64);
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    let bounds = Aabb::new(
        [lo[0] - margin, lo[1] - margin, 0.0],
        [hi[0] + margin, hi[1] + margin, spec.wall_height + 1.0],
    )?;
    let mut field = VoxelField::new(spec.resolution, bounds)?;

    // Supersampled occupancy: classify a 3x3x3 stencil of sub-points per
    // lattice point and blend, so surfaces get a ~1-voxel soft falloff
    // instead of binary density steps (reduces render aliasing).
    let classify = |p: [f64; 3]| -> Option<Vec3> {
        let d = signed_lateral(&path, [p[0], p[1]]);
        let ad = d.abs();
        if ad >= spec.wall_offset && ad <= spec.wall_offset + spec.wall_thickness && p[2] <= spec.wall_height {
            Some(if d > 0.0 { spec.left_wall_color } else { spec.right_wall_color })
        } else if p[2] <= GROUND_HEIGHT {
            let lane = ad >= spec.track_width / 2.0 - LANE_WIDTH && ad <= spec.track_width / 2.0;
            Some(if lane { spec.lane_color } else { spec.ground_color })
        } else {
            None
        }
    };
    let [nx, ny, nz] = spec.resolution;
    let cell = [
        (bounds.max[0] - bounds.min[0]) / nx as f64,
        (bounds.max[1] - bounds.min[1]) / ny as f64,
        (bounds.max[2] - bounds.min[2]) / nz as f64,
    ];
    let lattice: Vec<(f64, Vec3)> = {
        use rayon::prelude::*;
        (0..nz)
            .into_par_iter()
            .flat_map_iter(|z| {
                let field = &field;
                let classify = &classify;
                (0..ny).flat_map(move |y| {
                    (0..nx).map(move |x| {
                        let p = field.lattice_point(x, y, z);
                        let mut hits = 0usize;
                        let mut color = [0.0f64; 3];
                        for dz in -1i32..=1 {
                            for dy in -1i32..=1 {
                                for dx in -1i32..=1 {
                                    let q = [
                                        p[0] + dx as f64 / 3.0 * cell[0],
                                        p[1] + dy as f64 / 3.0 * cell[1],
                                        p[2] + dz as f64 / 3.0 * cell[2],
                                    ];
                                    if let Some(c) = classify(q) {
                                        hits += 1;
                                        for ch in 0..3 {
                                            color[ch] += c[ch];
                                        }
                                    }
                                }
                            }
                        }
                        if hits == 0 {
                            (VACUUM_RAW, [0.5; 3])
                        } else {
                            let f = hits as f64 / 27.0;
                            for ch in &mut color {
                                *ch /= hits as f64;
                            }
                            (softplus_inv(f * DENSE_SIGMA), color)
                        }
                    })
                })
            })
            .collect()
    };
    for (idx, (raw_d, color)) in lattice.into_iter().enumerate() {
        field.density_params[idx] = raw_d;
        for ch in 0..3 {
            field.color_params[3 * idx + ch] = logit(clamp01(color[ch]));
        }
    }
    Ok(DeploymentScene { field, path, spec: spec.clone() })
}

// ---------------------------------------------------------------------------
// Adversarial object assets

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectKind {
    Box,
    Cylinder,
}

/// Author a low-resolution attackable object field over the unit cube
/// [-0.5, 0.5]^3: a solid colored box, or a z-axis cylinder ("hydrant").
pub fn build_object_field(
    kind: ObjectKind,
    resolution: [usize; 3],
    color: Vec3,
    sigma: f64,
) -> Result<VoxelField, ReconError> {
    if !(sigma > 0.0) {
        return Err(ReconError::BadSpec("object density must be positive".into()));
    }
    let bounds = Aabb::new([-0.5; 3], [0.5; 3])?;
    let mut field = VoxelField::new(resolution, bounds)?;
    let raw_d = softplus_inv(sigma);
    let [nx, ny, nz] = resolution;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = field.lattice_point(x, y, z);
                let inside = match kind {
                    ObjectKind::Box => true,
                    ObjectKind::Cylinder => (p[0] * p[0] + p[1] * p[1]).sqrt() <= 0.45,
                };
                let idx = field.cell_index(x, y, z);
                field.density_params[idx] = if inside { raw_d } else { VACUUM_RAW };
                for ch in 0..3 {
                    field.color_params[3 * idx + ch] = logit(clamp01(color[ch]));
                }
            }
        }
    }
    Ok(field)
}

// ---------------------------------------------------------------------------
// Posed-image capture

#[derive(Debug, Clone)]
pub struct PosedImage {
    pub camera: Camera,
    /// H*W*3 row-major RGB in [0, 1].
    pub rgb: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PosedImageSet {
    pub views: Vec<PosedImage>,
    pub width: usize,
    pub height: usize,
}

impl PosedImageSet {
    pub fn validate(&self) -> Result<(), ReconError> {
        if self.views.is_empty() {
            return Err(ReconError::EmptyImageSet);
        }
        for (i, v) in self.views.iter().enumerate() {
            let expect = self.width * self.height * 3;
            if v.rgb.len() != expect {
                return Err(ReconError::BadImageShape(i, v.rgb.len(), expect));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CoverageSpec {
    pub rig: CameraRig,
    pub quad: QuadConfig,
    /// Every k-th view is an elevated orbit view instead of a driving view.
    pub orbit_every: usize,
    pub orbit_radius: f64,
    pub orbit_height: f64,
    /// Gaussian jitter (m / rad) applied to driving-view poses.
    pub jitter_std: f64,
    pub seed: u64,
}

impl Default for CoverageSpec {
    fn default() -> Self {
        Self {
            rig: CameraRig {
                forward_offset: 0.1,
                height: 0.4,
                pitch: 0.12,
                focal: 18.0,
                image_width: 32,
                image_height: 32,
                near: 0.05,
                far: 30.0,
            },
            quad: QuadConfig::default(),
            orbit_every: 3,
            orbit_radius: 2.2,
            orbit_height: 1.6,
            jitter_std: 0.05,
            seed: 0,
        }
    }
}

fn look_at_camera(pos: Vec3, target: Vec3, rig: &CameraRig) -> Camera {
    let forward = math::normalize(math::sub(target, pos));
    let right = math::normalize(math::cross(forward, [0.0, 0.0, 1.0]));
    let down = math::cross(forward, right);
    let rotation = [
        [right[0], down[0], forward[0]],
        [right[1], down[1], forward[1]],
        [right[2], down[2], forward[2]],
    ];
    let pose = crate::field::RigidTransform::new(rotation, pos, 1.0).unwrap();
    Camera::new(pose, rig.focal, rig.image_width, rig.image_height, rig.near, rig.far).unwrap()
}

/// True if the world point lies inside the camera's viewing frustum.
pub fn in_frustum(camera: &Camera, p: Vec3) -> bool {
    let q = camera.pose.world_to_object(p);
    if !(q[2] > camera.near && q[2] < camera.far) {
        return false;
    }
    let half_w = camera.width as f64 / 2.0 / camera.focal;
    let half_h = camera.height as f64 / 2.0 / camera.focal;
    (q[0] / q[2]).abs() <= half_w && (q[1] / q[2]).abs() <= half_h
}

/// Render n posed views of the ground-truth field: driving viewpoints along
/// the reference path plus jittered elevated orbit views looking back at it.
pub fn capture_posed_images(
    scene: &DeploymentScene,
    n: usize,
    cov: &CoverageSpec,
) -> Result<PosedImageSet, ReconError> {
    if n == 0 {
        return Err(ReconError::BadSpec("need at least one capture view".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cov.seed);
    let jitter = Normal::new(0.0, cov.jitter_std.max(f64::MIN_POSITIVE)).unwrap();
    let len = scene.path.total_length();
    let denom = if scene.path.closed { n as f64 } else { (n.max(2) - 1) as f64 };
    let inner = shrink(&scene.field.bounds, 0.05);

    let cameras: Vec<Camera> = (0..n)
        .map(|i| {
            let s = len * i as f64 / denom;
            let p = scene.path.point_at(s);
            let tan = scene.path.tangent_at(s);
            let heading = tan[1].atan2(tan[0]);
            let orbit = cov.orbit_every > 0 && n > 2 && i % cov.orbit_every == cov.orbit_every - 1;
            if orbit {
                // alternate sides of the track, looking back down at the path
                let side = if (i / cov.orbit_every) % 2 == 0 { 1.0 } else { -1.0 };
                let normal = [-tan[1], tan[0]];
                let pos = clamp_into(
                    [
                        p[0] + side * cov.orbit_radius * normal[0],
                        p[1] + side * cov.orbit_radius * normal[1],
                        cov.orbit_height,
                    ],
                    &inner,
                );
                look_at_camera(pos, [p[0], p[1], 0.3], &cov.rig)
            } else {
                let mut state = VehicleState::new(p[0], p[1], heading);
                if cov.jitter_std > 0.0 {
                    state.x += jitter.sample(&mut rng);
                    state.y += jitter.sample(&mut rng);
                    state.heading += jitter.sample(&mut rng);
                }
                let mut cam = cov.rig.camera_for(&state);
                cam.pose.translation = clamp_into(cam.pose.translation, &inner);
                cam
            }
        })
        .collect();

    let views: Vec<PosedImage> = cameras
        .into_par_iter()
        .map(|camera| {
            let frame = render_frame(&scene.field, &[], &camera, &cov.quad, false);
            PosedImage { camera, rgb: frame.color }
        })
        .collect();
    let set = PosedImageSet { views, width: cov.rig.image_width, height: cov.rig.image_height };
    set.validate()?;
    Ok(set)
}

fn shrink(b: &Aabb, eps: f64) -> Aabb {
    Aabb::new(
        [b.min[0] + eps, b.min[1] + eps, b.min[2] + eps],
        [b.max[0] - eps, b.max[1] - eps, b.max[2] - eps],
    )
    .unwrap()
}

fn clamp_into(p: Vec3, b: &Aabb) -> Vec3 {
    [
        p[0].clamp(b.min[0], b.max[0]),
        p[1].clamp(b.min[1], b.max[1]),
        p[2].clamp(b.min[2], b.max[2]),
    ]
}

// ---------------------------------------------------------------------------
// Photometric fitting

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_rays: usize,
    pub resolution: [usize; 3],
    pub bounds: Aabb,
    pub scene_samples: usize,
    pub background: Vec3,
    pub init_density_raw: f64,
    pub init_color_raw: f64,
    pub seed: u64,
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), ReconError> {
        if !(self.learning_rate > 0.0) {
            return Err(ReconError::BadFitConfig("learning rate must be > 0".into()));
        }
        if self.batch_rays == 0 || self.scene_samples == 0 {
            return Err(ReconError::BadFitConfig("batch and sample counts must be positive".into()));
        }
        if self.resolution.iter().any(|&r| r < 2) {
            return Err(ReconError::BadFitConfig("resolution axes must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub field: VoxelField,
    /// Mean squared photometric error per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Forward march of one training ray, mirroring the renderer's quadrature,
/// with an optional backward pass scattering density and color gradients.
///
/// Density backward uses the suffix form of the quadrature derivative:
///   dC/dsigma_i = delta * (T_{i+1} c_i - suffix_i),
/// where suffix_i collects all radiance behind sample i (including the
/// background term), then chains through softplus; color backward is the
/// quadrature weight through sigmoid. Returns the summed squared error over
/// the three channels.
fn fit_ray(
    field: &VoxelField,
    ray: &Ray,
    target: Vec3,
    near: f64,
    far: f64,
    n: usize,
    bg: Vec3,
    grad: Option<(&mut [f64], &mut [f64], f64)>,
) -> f64 {
    struct Sample {
        st: crate::field::TrilinearStencil,
        raw_d: f64,
        c: Vec3,
        a: f64,
        w: f64,
        trans_before: f64,
    }

    let mut samples: Vec<Sample> = Vec::new();
    let mut trans = 1.0;
    let mut color = [0.0; 3];
    let (t0, t1) = match field.bounds.ray_range(ray.origin, ray.direction) {
        Some((a, b)) => (a.max(near), b.min(far)),
        None => (0.0, 0.0),
    };
    let mut delta = 0.0;
    if t1 > t0 {
        delta = (t1 - t0) / n as f64;
        for i in 0..n {
            let t = t0 + (i as f64 + 0.5) * delta;
            let p = math::add(ray.origin, math::scale(ray.direction, t));
            let Some(st) = field.stencil(p) else { continue };
            let (raw_d, raw_c) = field.sample_raw_at(&st);
            let sigma = math::softplus(raw_d);
            if sigma > 0.0 {
                let a = 1.0 - (-sigma * delta).exp();
                let w = trans * a;
                let c = [math::sigmoid(raw_c[0]), math::sigmoid(raw_c[1]), math::sigmoid(raw_c[2])];
                for ch in 0..3 {
                    color[ch] += w * c[ch];
                }
                if grad.is_some() {
                    samples.push(Sample { st, raw_d, c, a, w, trans_before: trans });
                }
                trans *= 1.0 - a;
                if trans < 1e-7 {
                    break;
                }
            }
        }
    }
    for ch in 0..3 {
        color[ch] += trans * bg[ch];
    }
    let resid = [color[0] - target[0], color[1] - target[1], color[2] - target[2]];
    let loss = resid.iter().map(|r| r * r).sum();

    if let Some((gd, gc, scale)) = grad {
        let dl_dc = [2.0 * scale * resid[0], 2.0 * scale * resid[1], 2.0 * scale * resid[2]];
        // suffix = radiance behind the current sample (background included)
        let mut suffix = [trans * bg[0], trans * bg[1], trans * bg[2]];
        for s in samples.iter().rev() {
            // color parameters: dC/dc = w, through sigmoid
            for ch in 0..3 {
                let cot = dl_dc[ch] * s.w * math::sigmoid_deriv_from_value(s.c[ch]);
                if cot != 0.0 {
                    for k in 0..8 {
                        gc[3 * s.st.idx[k] + ch] += s.st.w[k] * cot;
                    }
                }
            }
            // density: dC/dsigma = delta * (T_{i+1} c_i - suffix)
            let t_next = s.trans_before * (1.0 - s.a);
            let mut dsigma = 0.0;
            for ch in 0..3 {
                dsigma += dl_dc[ch] * delta * (t_next * s.c[ch] - suffix[ch]);
            }
            let cot_raw = dsigma * math::sigmoid(s.raw_d); // softplus'
            if cot_raw != 0.0 {
                for k in 0..8 {
                    gd[s.st.idx[k]] += s.st.w[k] * cot_raw;
                }
            }
            for ch in 0..3 {
                suffix[ch] += s.w * s.c[ch];
            }
        }
    }
    loss
}

const FIT_CHUNKS: usize = 8;

/// Fit a surrogate voxel field to posed images by minimizing mean squared
/// photometric error with Adam over random ray minibatches.
pub fn fit_field(images: &PosedImageSet, cfg: &FitConfig) -> Result<FitResult, ReconError> {
    images.validate()?;
    cfg.validate()?;
    let mut field = VoxelField::new(cfg.resolution, cfg.bounds)?;
    field.density_params.iter_mut().for_each(|d| *d = cfg.init_density_raw);
    field.color_params.iter_mut().for_each(|c| *c = cfg.init_color_raw);

    // flatten all training rays once
    struct TrainRay {
        ray: Ray,
        target: Vec3,
        near: f64,
        far: f64,
    }
    let mut rays: Vec<TrainRay> = Vec::new();
    for v in &images.views {
        for row in 0..images.height {
            for col in 0..images.width {
                let pix = (row * images.width + col) * 3;
                rays.push(TrainRay {
                    ray: v.camera.pixel_ray(col, row),
                    target: [v.rgb[pix], v.rgb[pix + 1], v.rgb[pix + 2]],
                    near: v.camera.near,
                    far: v.camera.far,
                });
            }
        }
    }

    let nd = field.density_params.len();
    let nc = field.color_params.len();
    let mut adam = AdamState::new(nd + nc);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..rays.len()).collect();
    // reused per-chunk gradient buffers (fixed chunk count for determinism)
    let mut chunk_gd = vec![vec![0.0; nd]; FIT_CHUNKS];
    let mut chunk_gc = vec![vec![0.0; nc]; FIT_CHUNKS];
    let mut flat = vec![0.0; nd + nc];
    let mut grad = vec![0.0; nd + nc];
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_rays) {
            let scale = 1.0 / (3.0 * batch.len() as f64);
            let chunk_len = batch.len().div_ceil(FIT_CHUNKS);
            let id_chunks: Vec<&[usize]> = batch.chunks(chunk_len).collect();
            let n_active = id_chunks.len();
            let losses: Vec<f64> = id_chunks
                .into_par_iter()
                .zip(chunk_gd[..n_active].par_iter_mut().zip(chunk_gc[..n_active].par_iter_mut()))
                .map(|(ids, (gd, gc))| {
                    gd.iter_mut().for_each(|g| *g = 0.0);
                    gc.iter_mut().for_each(|g| *g = 0.0);
                    let mut loss = 0.0;
                    for &i in ids {
                        let r = &rays[i];
                        loss += fit_ray(
                            &field,
                            &r.ray,
                            r.target,
                            r.near,
                            r.far,
                            cfg.scene_samples,
                            cfg.background,
                            Some((gd.as_mut_slice(), gc.as_mut_slice(), scale)),
                        );
                    }
                    loss
                })
                .collect();
            for (gd, gc) in chunk_gd[n_active..].iter_mut().zip(chunk_gc[n_active..].iter_mut()) {
                gd.iter_mut().for_each(|g| *g = 0.0);
                gc.iter_mut().for_each(|g| *g = 0.0);
            }
            epoch_loss += losses.iter().sum::<f64>();
            // deterministic merge in fixed chunk order
            grad.iter_mut().for_each(|g| *g = 0.0);
            for (gd, gc) in chunk_gd.iter().zip(&chunk_gc) {
                for (dst, v) in grad[..nd].iter_mut().zip(gd) {
                    *dst += v;
                }
                for (dst, v) in grad[nd..].iter_mut().zip(gc) {
                    *dst += v;
                }
            }
            flat[..nd].copy_from_slice(&field.density_params);
            flat[nd..].copy_from_slice(&field.color_params);
            adam.step(&mut flat, &grad, cfg.learning_rate);
            field.density_params.copy_from_slice(&flat[..nd]);
            field.color_params.copy_from_slice(&flat[nd..]);
        }
        epoch_losses.push(epoch_loss / (3.0 * rays.len() as f64));
    }
    Ok(FitResult { field, epoch_losses })
}

/// Peak signal-to-noise ratio in dB for [0,1] images; identical images report
/// the 99 dB sentinel.
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    assert!(!a.is_empty());
    let mse: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse <= 0.0 {
        return 99.0;
    }
    (10.0 * (1.0 / mse).log10()).min(99.0)
}

/// Mean PSNR of the field's renders against the stored views.
pub fn evaluate_fit(field: &VoxelField, images: &PosedImageSet, quad: &QuadConfig) -> f64 {
    let total: f64 = images
        .views
        .par_iter()
        .map(|v| {
            let frame = render_frame(field, &[], &v.camera, quad, false);
            psnr(&frame.color, &v.rgb)
        })
        .sum();
    total / images.views.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::RigidTransform;

    fn small_spec(shape: TrackShape) -> DeploymentSpec {
        DeploymentSpec { shape, side: 6.0, resolution: [40, 40, 10], ..Default::default() }
    }

    #[test]
    fn build_is_deterministic() {
        let spec = small_spec(TrackShape::LTurn);
        let a = build_deployment_scene(&spec).unwrap();
        let b = build_deployment_scene(&spec).unwrap();
        assert_eq!(a.field.density_params, b.field.density_params);
        assert_eq!(a.field.color_params, b.field.color_params);
    }

    #[test]
    fn straight_track_path_is_segment() {
        let scene = build_deployment_scene(&small_spec(TrackShape::Straight)).unwrap();
        assert!(!scene.path.closed);
        assert!((scene.path.total_length() - 6.0).abs() < 1e-12);
        // ground under the centerline is dense and ground-colored
        let (sigma, c) = scene.field.trilinear_sample([3.0, 0.0, 0.05]);
        assert!(sigma > 5.0, "ground sigma {sigma}");
        for ch in 0..3 {
            assert!((c[ch] - 0.45).abs() < 0.15, "ground color {c:?}");
        }
        // above the walls it is vacuum
        let (sigma, _) = scene.field.trilinear_sample([3.0, 0.0, 2.0]);
        assert!(sigma < 0.01, "sky sigma {sigma}");
    }

    #[test]
    fn walls_sit_left_and_right_with_their_colors() {
        let spec = small_spec(TrackShape::Straight);
        let scene = build_deployment_scene(&spec).unwrap();
        let mid = spec.wall_offset + spec.wall_thickness / 2.0;
        // traveling +x: left is +y
        let (sl, cl) = scene.field.trilinear_sample([3.0, mid, 0.6]);
        let (sr, cr) = scene.field.trilinear_sample([3.0, -mid, 0.6]);
        assert!(sl > 5.0 && sr > 5.0, "wall sigmas {sl} {sr}");
        let lum = |c: [f64; 3]| (c[0] + c[1] + c[2]) / 3.0;
        assert!(lum(cl) > lum(cr) + 0.3, "left {cl:?} right {cr:?}");
    }

    #[test]
    fn square_loop_is_closed_with_four_corners() {
        let spec = small_spec(TrackShape::SquareLoop);
        let scene = build_deployment_scene(&spec).unwrap();
        assert!(scene.path.closed);
        assert!((scene.path.total_length() - 4.0 * spec.side).abs() < 1e-9);
    }

    #[test]
    fn object_fields() {
        let b = build_object_field(ObjectKind::Box, [4, 4, 4], [0.8, 0.1, 0.1], 30.0).unwrap();
        let (sigma, c) = b.trilinear_sample([0.0, 0.0, 0.0]);
        assert!(sigma > 20.0);
        assert!((c[0] - 0.8).abs() < 1e-3 && (c[1] - 0.1).abs() < 1e-3);
        let cyl = build_object_field(ObjectKind::Cylinder, [8, 8, 8], [0.5; 3], 30.0).unwrap();
        let (s_axis, _) = cyl.trilinear_sample([0.0, 0.0, 0.0]);
        let (s_corner, _) = cyl.trilinear_sample([0.49, 0.49, 0.0]);
        assert!(s_axis > 20.0 && s_corner < 1.0, "{s_axis} {s_corner}");
        assert!(build_object_field(ObjectKind::Box, [4, 4, 4], [0.5; 3], 0.0).is_err());
    }

    #[test]
    fn capture_single_view_at_path_start() {
        let scene = build_deployment_scene(&small_spec(TrackShape::Straight)).unwrap();
        let cov = CoverageSpec { orbit_every: 0, jitter_std: 0.0, ..Default::default() };
        let set = capture_posed_images(&scene, 1, &cov).unwrap();
        assert_eq!(set.views.len(), 1);
        let t = set.views[0].camera.pose.translation;
        // rig-mounted at the path start (forward offset along +x)
        assert!((t[0] - cov.rig.forward_offset).abs() < 1e-9 && t[1].abs() < 1e-9);
    }

    #[test]
    fn capture_cameras_inside_bounds_and_cover_path() {
        let scene = build_deployment_scene(&small_spec(TrackShape::LTurn)).unwrap();
        let cov = CoverageSpec::default();
        let n = 36;
        let set = capture_posed_images(&scene, n, &cov).unwrap();
        assert_eq!(set.views.len(), n);
        for v in &set.views {
            assert!(scene.field.bounds.contains(v.camera.pose.translation));
        }
        // every waypoint visible from at least 3 cameras
        for w in [[0.0, 0.0], [3.0, 0.0], [5.0, 1.0], [6.0, 4.0], [6.0, 6.0]] {
            let p = [w[0], w[1], 0.1];
            let hits = set.views.iter().filter(|v| in_frustum(&v.camera, p)).count();
            assert!(hits >= 3, "waypoint {w:?} seen by {hits} cameras");
        }
    }

    #[test]
    fn capture_deterministic() {
        let scene = build_deployment_scene(&small_spec(TrackShape::Straight)).unwrap();
        let cov = CoverageSpec::default();
        let a = capture_posed_images(&scene, 9, &cov).unwrap();
        let b = capture_posed_images(&scene, 9, &cov).unwrap();
        for (x, y) in a.views.iter().zip(&b.views) {
            assert_eq!(x.rgb, y.rgb);
            assert_eq!(x.camera.pose.translation, y.camera.pose.translation);
        }
    }

    #[test]
    fn psnr_formula() {
        let a = vec![0.5; 300];
        assert_eq!(psnr(&a, &a), 99.0);
        let b: Vec<f64> = a.iter().map(|x| x + 0.1).collect();
        assert!((psnr(&a, &b) - 20.0).abs() < 1e-9);
        let c: Vec<f64> = a.iter().map(|x| x - 0.033).collect();
        let mse = 0.033f64.powi(2);
        assert!((psnr(&a, &c) - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
    }

    fn tiny_fit_cfg() -> FitConfig {
        FitConfig {
            epochs: 0,
            learning_rate: 0.05,
            batch_rays: 64,
            resolution: [6, 6, 4],
            bounds: Aabb::new([-1.0, -1.0, 0.0], [3.0, 1.0, 1.5]).unwrap(),
            scene_samples: 32,
            background: [0.7, 0.2, 0.3],
            init_density_raw: -2.0,
            init_color_raw: 0.0,
            seed: 0,
        }
    }

    fn uniform_views(color: Vec3, n: usize) -> PosedImageSet {
        let rig = CameraRig {
            forward_offset: 0.0,
            height: 0.5,
            pitch: 0.0,
            focal: 5.0,
            image_width: 8,
            image_height: 8,
            near: 0.05,
            far: 10.0,
        };
        let views = (0..n)
            .map(|i| {
                let state = VehicleState::new(-0.5 + 0.3 * i as f64, 0.0, 0.2 * i as f64);
                PosedImage { camera: rig.camera_for(&state), rgb: vec![color[0], color[1], color[2]].repeat(64) }
            })
            .collect();
        PosedImageSet { views, width: 8, height: 8 }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let images = uniform_views([0.7, 0.2, 0.3], 2);
        let cfg = tiny_fit_cfg();
        let r = fit_field(&images, &cfg).unwrap();
        assert!(r.field.density_params.iter().all(|&d| d == -2.0));
        assert!(r.field.color_params.iter().all(|&c| c == 0.0));
        assert!(r.epoch_losses.is_empty());
    }

    #[test]
    fn fit_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let bounds = Aabb::new([-1.0; 3], [1.0; 3]).unwrap();
        let mut field = VoxelField::new([4, 3, 3], bounds).unwrap();
        field.density_params.iter_mut().for_each(|d| *d = rng.gen::<f64>() * 2.0 - 1.0);
        field.color_params.iter_mut().for_each(|c| *c = rng.gen::<f64>() * 2.0 - 1.0);
        let ray = Ray { origin: [-2.0, 0.1, 0.2], direction: math::normalize([1.0, 0.05, -0.02]) };
        let target = [0.3, 0.6, 0.9];
        let bg = [0.5; 3];
        let n = 24;

        let nd = field.density_params.len();
        let mut gd = vec![0.0; nd];
        let mut gc = vec![0.0; 3 * nd];
        fit_ray(&field, &ray, target, 0.05, 10.0, n, bg, Some((&mut gd, &mut gc, 1.0)));

        let eps = 1e-6;
        let mut checked = 0;
        for _ in 0..400 {
            if checked >= 12 {
                break;
            }
            let density = rng.gen::<bool>();
            let k = rng.gen_range(0..if density { nd } else { 3 * nd });
            let slot = |f: &mut VoxelField, v: f64| {
                if density {
                    f.density_params[k] += v;
                } else {
                    f.color_params[k] += v;
                }
            };
            let mut f2 = field.clone();
            slot(&mut f2, eps);
            let hi = fit_ray(&f2, &ray, target, 0.05, 10.0, n, bg, None);
            let mut f2 = field.clone();
            slot(&mut f2, -eps);
            let lo = fit_ray(&f2, &ray, target, 0.05, 10.0, n, bg, None);
            let fd = (hi - lo) / (2.0 * eps);
            let an = if density { gd[k] } else { gc[k] };
            if fd.abs().max(an.abs()) < 1e-10 {
                continue;
            }
            let rel = (fd - an).abs() / fd.abs().max(an.abs());
            assert!(rel < 1e-5, "{} param {k}: fd {fd} vs analytic {an}", if density { "density" } else { "color" });
            checked += 1;
        }
        assert!(checked >= 8, "only {checked} informative coordinates probed");
    }

    #[test]
    fn degenerate_fit_reaches_background() {
        let bg = [0.7, 0.2, 0.3];
        let images = uniform_views(bg, 3);
        let cfg = FitConfig { epochs: 120, ..tiny_fit_cfg() };
        let r = fit_field(&images, &cfg).unwrap();
        let quad = QuadConfig { scene_samples: 32, object_samples: 8, background: bg };
        let p = evaluate_fit(&r.field, &images, &quad);
        assert!(p > 40.0, "uniform-scene fit PSNR {p}");
    }

    #[test]
    fn fit_deterministic_and_loss_improves() {
        let scene = build_deployment_scene(&small_spec(TrackShape::Straight)).unwrap();
        let cov = CoverageSpec {
            rig: CameraRig { image_width: 12, image_height: 12, ..CoverageSpec::default().rig },
            ..Default::default()
        };
        let images = capture_posed_images(&scene, 6, &cov).unwrap();
        let cfg = FitConfig {
            epochs: 3,
            batch_rays: 128,
            resolution: [16, 16, 6],
            bounds: scene.field.bounds,
            background: cov.quad.background,
            ..tiny_fit_cfg()
        };
        let a = fit_field(&images, &cfg).unwrap();
        let b = fit_field(&images, &cfg).unwrap();
        assert_eq!(a.field.density_params, b.field.density_params);
        assert_eq!(a.field.color_params, b.field.color_params);
        // best-so-far loss is non-increasing
        let best: Vec<f64> = a
            .epoch_losses
            .iter()
            .scan(f64::INFINITY, |acc, &l| {
                *acc = acc.min(l);
                Some(*acc)
            })
            .collect();
        assert_eq!(best.last().copied(), a.epoch_losses.iter().copied().reduce(f64::min));
        assert!(a.epoch_losses.last().unwrap() < &a.epoch_losses[0]);
    }

    #[test]
    fn rigid_transform_reexport_sanity() {
        // object assets pair with placements downstream; keep the types aligned
        let f = build_object_field(ObjectKind::Box, [3, 3, 3], [0.5; 3], 10.0).unwrap();
        let xf = RigidTransform::from_yaw(0.3, [1.0, 2.0, 0.5], 0.7).unwrap();
        assert_eq!(f.color_params.len(), 81);
        assert!(xf.scale > 0.0);
    }
}
