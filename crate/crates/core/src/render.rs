//! Quadrature volume rendering of voxel fields with depth-ordered alpha
//! compositing of object fields over a scene field, plus vector-Jacobian
//! products of rendered images with respect to object color parameters.
//!
//! Transmittance uses the standard emissive-media form exp(-integral sigma),
//! discretized as a_i = 1 - exp(-sigma_i * delta) with uniform midpoint
//! samples. Each field is marched independently per ray; per-pixel results
//! are composited in increasing-depth order. Scene density/color and object
//! densities are frozen in the VJP; only object color parameters receive
//! gradients.

use crate::field::{RigidTransform, VoxelField};
use crate::math::{self, Vec3};
use rayon::prelude::*;
use thiserror::Error;

/// Minimum foreground alpha for a composited pixel to adopt the foreground
/// depth; below this the background depth wins (noise guard).
pub const FG_DEPTH_MIN_ALPHA: f64 = 0.01;

/// Transmittance below which a march terminates early.
const MARCH_EARLY_OUT: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("invalid camera: {0}")]
    BadCamera(String),
    #[error("render_vjp_color requires a frame rendered with retain_cache")]
    MissingCache,
    #[error("seed length {got} does not match frame size {expected}")]
    BadSeed { got: usize, expected: usize },
}

/// Pinhole camera. `pose` is camera-to-world with scale 1; the camera frame
/// is +x right, +y down, +z forward, so image rows run top to bottom.
#[derive(Debug, Clone)]
pub struct Camera {
    pub pose: RigidTransform,
    pub focal: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(
        pose: RigidTransform,
        focal: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self, RenderError> {
        if !(near > 0.0 && near < far) {
            return Err(RenderError::BadCamera(format!("need 0 < near < far, got {near}, {far}")));
        }
        if width == 0 || height == 0 {
            return Err(RenderError::BadCamera("zero image dimension".into()));
        }
        if !(focal > 0.0) {
            return Err(RenderError::BadCamera(format!("focal must be positive, got {focal}")));
        }
        Ok(Self { pose, focal, width, height, near, far })
    }

    /// World-frame ray through the center of pixel (col, row).
    pub fn pixel_ray(&self, col: usize, row: usize) -> Ray {
        let dx = (col as f64 + 0.5 - self.width as f64 / 2.0) / self.focal;
        let dy = (row as f64 + 0.5 - self.height as f64 / 2.0) / self.focal;
        let dir_cam = math::normalize([dx, dy, 1.0]);
        Ray {
            origin: self.pose.translation,
            direction: math::mat_vec(&self.pose.rotation, dir_cam),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

/// Quadrature and background settings for a frame.
#[derive(Debug, Clone)]
pub struct QuadConfig {
    pub scene_samples: usize,
    pub object_samples: usize,
    /// Constant background color composited behind all fields.
    pub background: Vec3,
}

impl Default for QuadConfig {
    fn default() -> Self {
        Self { scene_samples: 64, object_samples: 32, background: [0.5, 0.5, 0.5] }
    }
}

/// Result of marching one field along one ray.
/// `color` is premultiplied (sum of T_i a_i c_i); `depth` is the expected
/// termination depth in the ray's own parameter units (0 when alpha is 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarchResult {
    pub color: Vec3,
    pub alpha: f64,
    pub depth: f64,
}

/// Per-field pixel entry for compositing: `color` is intensity (already
/// normalized by the field's own alpha).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSample {
    pub color: Vec3,
    pub alpha: f64,
    pub depth: f64,
}

impl MarchResult {
    pub fn vacuum() -> Self {
        Self { color: [0.0; 3], alpha: 0.0, depth: 0.0 }
    }

    pub fn to_layer(self) -> LayerSample {
        let color = if self.alpha > 0.0 {
            math::scale(self.color, 1.0 / self.alpha)
        } else {
            [0.0; 3]
        };
        LayerSample { color, alpha: self.alpha, depth: self.depth }
    }
}

/// One ray per pixel, row-major, through pixel centers.
pub fn generate_rays(camera: &Camera) -> Vec<Ray> {
    let mut rays = Vec::with_capacity(camera.width * camera.height);
    for row in 0..camera.height {
        for col in 0..camera.width {
            rays.push(camera.pixel_ray(col, row));
        }
    }
    rays
}

/// Uniform-quadrature march of a single field over [near, far].
pub fn march_field(field: &VoxelField, ray: &Ray, n_samples: usize, near: f64, far: f64) -> MarchResult {
    march_range(field, ray.origin, ray.direction, near, far, n_samples)
}

/// March over an explicit t-range (caller clips to the field bounds).
fn march_range(field: &VoxelField, origin: Vec3, dir: Vec3, t0: f64, t1: f64, n: usize) -> MarchResult {
    if !(t1 > t0) || n == 0 {
        return MarchResult::vacuum();
    }
    let dt = (t1 - t0) / n as f64;
    let mut trans = 1.0;
    let mut color = [0.0; 3];
    let mut depth_acc = 0.0;
    for i in 0..n {
        let t = t0 + (i as f64 + 0.5) * dt;
        let p = math::add(origin, math::scale(dir, t));
        let (sigma, c) = field.trilinear_sample(p);
        if sigma > 0.0 {
            let a = 1.0 - (-sigma * dt).exp();
            let w = trans * a;
            for ch in 0..3 {
                color[ch] += w * c[ch];
            }
            depth_acc += w * t;
            trans *= 1.0 - a;
            if trans < MARCH_EARLY_OUT {
                break;
            }
        }
    }
    let alpha = 1.0 - trans;
    let depth = if alpha > 0.0 { depth_acc / alpha } else { 0.0 };
    MarchResult { color, alpha, depth }
}

/// Re-march a field and scatter a premultiplied-color cotangent into the
/// field's color-parameter gradient. Density is frozen; the quadrature
/// weights are recomputed identically to the forward march.
fn march_color_vjp(
    field: &VoxelField,
    origin: Vec3,
    dir: Vec3,
    t0: f64,
    t1: f64,
    n: usize,
    cot_premult: Vec3,
    grad: &mut [f64],
) {
    if !(t1 > t0) || n == 0 {
        return;
    }
    let dt = (t1 - t0) / n as f64;
    let mut trans = 1.0;
    for i in 0..n {
        let t = t0 + (i as f64 + 0.5) * dt;
        let p = math::add(origin, math::scale(dir, t));
        let Some(st) = field.stencil(p) else { continue };
        let (raw_d, raw_c) = field.sample_raw_at(&st);
        let sigma = math::softplus(raw_d);
        if sigma > 0.0 {
            let a = 1.0 - (-sigma * dt).exp();
            let w = trans * a;
            // activation after interpolation: c = sigmoid(raw interp)
            for ch in 0..3 {
                let s = math::sigmoid(raw_c[ch]);
                let cot_raw = w * cot_premult[ch] * math::sigmoid_deriv_from_value(s);
                if cot_raw != 0.0 {
                    for k in 0..8 {
                        grad[3 * st.idx[k] + ch] += st.w[k] * cot_raw;
                    }
                }
            }
            trans *= 1.0 - a;
            if trans < MARCH_EARLY_OUT {
                break;
            }
        }
    }
}

/// Blend two per-pixel layers; the nearer one is foreground.
fn blend(x: LayerSample, y: LayerSample) -> LayerSample {
    if x.alpha <= 0.0 {
        return y;
    }
    if y.alpha <= 0.0 {
        return x;
    }
    let (f, b) = if x.depth <= y.depth { (x, y) } else { (y, x) };
    let denom = f.alpha + b.alpha * (1.0 - f.alpha);
    if denom == 0.0 {
        return b;
    }
    let mut color = [0.0; 3];
    for ch in 0..3 {
        color[ch] = (f.alpha * f.color[ch] + (1.0 - f.alpha) * b.alpha * b.color[ch]) / denom;
    }
    let depth = if f.alpha > FG_DEPTH_MIN_ALPHA { f.depth } else { b.depth };
    LayerSample { color, alpha: denom, depth }
}

/// Depth-ordered pairwise alpha compositing of per-field pixel entries.
pub fn composite_pixel(entries: &[LayerSample]) -> LayerSample {
    let mut order: Vec<usize> = (0..entries.len()).filter(|&i| entries[i].alpha > 0.0).collect();
    order.sort_by(|&a, &b| entries[a].depth.partial_cmp(&entries[b].depth).unwrap().then(a.cmp(&b)));
    let mut acc = LayerSample { color: [0.0; 3], alpha: 0.0, depth: 0.0 };
    for &i in &order {
        acc = blend(acc, entries[i]);
    }
    acc
}

/// Cached per-pixel object march segments for the color VJP.
#[derive(Debug, Clone)]
pub struct QuadCache {
    pub n_objects: usize,
    /// `pixels * n_objects` entries, pixel-major.
    pub segs: Vec<Option<ObjSeg>>,
}

/// Object-frame march range for one (pixel, object) pair, plus the linear
/// coefficient of the final pixel color in this object's premultiplied color.
#[derive(Debug, Clone, Copy)]
pub struct ObjSeg {
    pub t0: f64,
    pub t1: f64,
    pub n: usize,
    pub chain: f64,
}

impl QuadCache {
    pub fn approx_bytes(&self) -> usize {
        self.segs.len() * std::mem::size_of::<Option<ObjSeg>>() + std::mem::size_of::<Self>()
    }
}

/// A rendered frame: per-pixel color in [0,1], opacity, and expected depth
/// in world meters (valid where alpha > 0).
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// H*W*3 row-major RGB, background already composited.
    pub color: Vec<f64>,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
    pub quad_cache: Option<QuadCache>,
}

struct PixelOut {
    color: [f64; 3],
    alpha: f64,
    depth: f64,
    segs: Vec<Option<ObjSeg>>,
}

fn render_pixel(
    scene: Option<&VoxelField>,
    objects: &[(&VoxelField, &RigidTransform)],
    ray: &Ray,
    quad: &QuadConfig,
    near: f64,
    far: f64,
    retain: bool,
) -> PixelOut {
    let mut layers: Vec<LayerSample> = Vec::with_capacity(1 + objects.len());
    let mut premults: Vec<Vec3> = Vec::with_capacity(1 + objects.len());
    // tracks which layer belongs to which object (None = scene)
    let mut owner: Vec<Option<usize>> = Vec::with_capacity(1 + objects.len());
    let mut segs: Vec<Option<ObjSeg>> = if retain { vec![None; objects.len()] } else { Vec::new() };

    if let Some(scene) = scene {
        let m = match scene.bounds.ray_range(ray.origin, ray.direction) {
            Some((a, b)) => {
                let (t0, t1) = (a.max(near), b.min(far));
                march_range(scene, ray.origin, ray.direction, t0, t1, quad.scene_samples)
            }
            None => MarchResult::vacuum(),
        };
        premults.push(m.color);
        layers.push(m.to_layer());
        owner.push(None);
    }

    for (oi, (field, xf)) in objects.iter().enumerate() {
        let (o, d, factor) = xf.transform_ray(ray.origin, ray.direction);
        let m = match field.bounds.ray_range(o, d) {
            Some((a, b)) => {
                let (t0, t1) = (a.max(near / factor), b.min(far / factor));
                let m = march_range(field, o, d, t0, t1, quad.object_samples);
                if retain && t1 > t0 {
                    segs[oi] = Some(ObjSeg { t0, t1, n: quad.object_samples, chain: 0.0 });
                }
                // convert expected depth to world meters
                MarchResult { color: m.color, alpha: m.alpha, depth: m.depth * factor }
            }
            None => MarchResult::vacuum(),
        };
        premults.push(m.color);
        layers.push(m.to_layer());
        owner.push(Some(oi));
    }

    // depth-ordered compositing; chain coefficients follow the same order
    let mut order: Vec<usize> = (0..layers.len()).filter(|&i| layers[i].alpha > 0.0).collect();
    order.sort_by(|&a, &b| layers[a].depth.partial_cmp(&layers[b].depth).unwrap().then(a.cmp(&b)));

    let mut trans = 1.0;
    let mut premult = [0.0; 3];
    let mut depth = 0.0;
    let mut have_depth = false;
    let mut running_alpha = 0.0;
    for &i in &order {
        if retain {
            if let Some(oi) = owner[i] {
                if let Some(seg) = segs[oi].as_mut() {
                    seg.chain = trans;
                }
            }
        }
        for ch in 0..3 {
            premult[ch] += trans * premults[i][ch];
        }
        // fold semantics for depth: keep the accumulated depth once the
        // accumulated alpha exceeds the threshold, else take this layer's
        if !have_depth {
            depth = layers[i].depth;
            have_depth = true;
        } else if running_alpha <= FG_DEPTH_MIN_ALPHA {
            depth = layers[i].depth;
        }
        running_alpha = running_alpha + layers[i].alpha * (1.0 - running_alpha);
        trans *= 1.0 - layers[i].alpha;
    }
    let alpha = 1.0 - trans;
    let color = [
        premult[0] + trans * quad.background[0],
        premult[1] + trans * quad.background[1],
        premult[2] + trans * quad.background[2],
    ];
    PixelOut { color, alpha, depth: if have_depth { depth } else { 0.0 }, segs }
}

/// Render scene + objects at a camera. With `retain_cache`, per-pixel object
/// march segments are kept so [`render_vjp_color`] can run afterwards.
pub fn render_frame(
    scene: &VoxelField,
    objects: &[(&VoxelField, &RigidTransform)],
    camera: &Camera,
    quad: &QuadConfig,
    retain_cache: bool,
) -> RenderOutput {
    render_frame_inner(Some(scene), objects, camera, quad, retain_cache)
}

/// Render only the object fields over an empty black background. Used by the
/// opaque depth compositing path; the color buffer holds premultiplied colors.
pub fn render_objects_frame(
    objects: &[(&VoxelField, &RigidTransform)],
    camera: &Camera,
    quad: &QuadConfig,
) -> RenderOutput {
    let quad = QuadConfig { background: [0.0; 3], ..quad.clone() };
    render_frame_inner(None, objects, camera, &quad, false)
}

fn render_frame_inner(
    scene: Option<&VoxelField>,
    objects: &[(&VoxelField, &RigidTransform)],
    camera: &Camera,
    quad: &QuadConfig,
    retain_cache: bool,
) -> RenderOutput {
    let pixels = camera.width * camera.height;
    let outs: Vec<PixelOut> = (0..pixels)
        .into_par_iter()
        .map(|i| {
            let ray = camera.pixel_ray(i % camera.width, i / camera.width);
            render_pixel(scene, objects, &ray, quad, camera.near, camera.far, retain_cache)
        })
        .collect();

    let mut color = Vec::with_capacity(pixels * 3);
    let mut alpha = Vec::with_capacity(pixels);
    let mut depth = Vec::with_capacity(pixels);
    let mut segs = if retain_cache { Vec::with_capacity(pixels * objects.len()) } else { Vec::new() };
    for o in outs {
        color.extend_from_slice(&o.color);
        alpha.push(o.alpha);
        depth.push(o.depth);
        if retain_cache {
            segs.extend(o.segs);
        }
    }
    let quad_cache = retain_cache.then(|| QuadCache { n_objects: objects.len(), segs });
    RenderOutput { width: camera.width, height: camera.height, color, alpha, depth, quad_cache }
}

/// Gradient of `seed . image` with respect to each object's color parameters.
///
/// Reverse accumulation through the composite, quadrature weights, sigmoid
/// activation, and trilinear weights. Scene parameters and all densities are
/// frozen and receive no gradient.
pub fn render_vjp_color(
    objects: &[(&VoxelField, &RigidTransform)],
    camera: &Camera,
    frame: &RenderOutput,
    seed: &[f64],
) -> Result<Vec<Vec<f64>>, RenderError> {
    let cache = frame.quad_cache.as_ref().ok_or(RenderError::MissingCache)?;
    let pixels = camera.width * camera.height;
    if seed.len() != pixels * 3 {
        return Err(RenderError::BadSeed { got: seed.len(), expected: pixels * 3 });
    }
    debug_assert_eq!(cache.n_objects, objects.len());

    let row_grads: Vec<Vec<Vec<f64>>> = (0..camera.height)
        .into_par_iter()
        .map(|row| {
            let mut grads: Vec<Vec<f64>> =
                objects.iter().map(|(f, _)| vec![0.0; f.color_params.len()]).collect();
            for col in 0..camera.width {
                let pix = row * camera.width + col;
                let cot = [seed[3 * pix], seed[3 * pix + 1], seed[3 * pix + 2]];
                if cot == [0.0; 3] {
                    continue;
                }
                let ray = camera.pixel_ray(col, row);
                for (oi, (field, xf)) in objects.iter().enumerate() {
                    let Some(seg) = cache.segs[pix * objects.len() + oi] else { continue };
                    if seg.chain == 0.0 {
                        continue;
                    }
                    let (o, d, _) = xf.transform_ray(ray.origin, ray.direction);
                    let cot_premult = math::scale(cot, seg.chain);
                    march_color_vjp(field, o, d, seg.t0, seg.t1, seg.n, cot_premult, &mut grads[oi]);
                }
            }
            grads
        })
        .collect();

    // deterministic reduction in row order
    let mut total: Vec<Vec<f64>> =
        objects.iter().map(|(f, _)| vec![0.0; f.color_params.len()]).collect();
    for grads in row_grads {
        for (t, g) in total.iter_mut().zip(grads) {
            for (a, b) in t.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    Ok(total)
}

/// Inject objects into a deployment frame assuming they are fully opaque:
/// per pixel, the nearer of deployment surface and object surface wins.
///
/// `objects` must come from [`render_objects_frame`]. An object pixel counts
/// as a surface where its accumulated opacity exceeds 0.5.
pub fn opaque_depth_composite(deployment: &RenderOutput, objects: &RenderOutput) -> Vec<f64> {
    let pixels = deployment.width * deployment.height;
    let mut out = deployment.color.clone();
    for pix in 0..pixels {
        let oa = objects.alpha[pix];
        if oa <= 0.5 {
            continue;
        }
        let deploy_depth = if deployment.alpha[pix] > FG_DEPTH_MIN_ALPHA {
            deployment.depth[pix]
        } else {
            f64::INFINITY
        };
        if objects.depth[pix] < deploy_depth {
            for ch in 0..3 {
                out[3 * pix + ch] = objects.color[3 * pix + ch] / oa;
            }
        }
    }
    out
}
