//! Dense voxel radiance fields with trilinear interpolation and rigid placement.
//!
//! A field stores pre-activation density and color parameters on a dense grid
//! (x-fastest row-major). Activations are applied after interpolation:
//! density = softplus(raw), color = sigmoid(raw), so attack parameters stay
//! unconstrained while activated values satisfy the type invariants.

use crate::math::{self, Mat3, Vec3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("aabb min must be < max componentwise, got min {min:?} max {max:?}")]
    BadBounds { min: Vec3, max: Vec3 },
    #[error("resolution components must be positive")]
    BadResolution,
    #[error("parameter array length {got} does not match resolution (expected {expected})")]
    BadParamLen { got: usize, expected: usize },
    #[error("rotation matrix is not orthonormal (max deviation {0:.3e})")]
    NotOrthonormal(f64),
    #[error("scale must be positive, got {0}")]
    BadScale(f64),
}

/// Axis-aligned bounding box in world meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self, FieldError> {
        if (0..3).any(|i| !(min[i] < max[i])) {
            return Err(FieldError::BadBounds { min, max });
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Intersection of the ray `origin + t * dir` with the box, as a t-range.
    /// Returns `None` when the ray misses.
    pub fn ray_range(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i].abs() < 1e-15 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
            } else {
                let inv = 1.0 / dir[i];
                let (mut a, mut b) = ((self.min[i] - origin[i]) * inv, (self.max[i] - origin[i]) * inv);
                if a > b {
                    std::mem::swap(&mut a, &mut b);
                }
                t0 = t0.max(a);
                t1 = t1.min(b);
            }
        }
        if t0 <= t1 {
            Some((t0, t1))
        } else {
            None
        }
    }
}

/// Dense voxel grid of pre-activation density and color parameters.
///
/// Storage order is x-fastest row-major: cell (x, y, z) lives at index
/// `x + nx * (y + ny * z)`; colors store 3 consecutive values per cell.
#[derive(Debug, Clone)]
pub struct VoxelField {
    pub resolution: [usize; 3],
    pub density_params: Vec<f64>,
    pub color_params: Vec<f64>,
    pub bounds: Aabb,
}

/// The 8 lattice corners and trilinear weights surrounding a point.
#[derive(Debug, Clone, Copy)]
pub struct TrilinearStencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
}

impl VoxelField {
    pub fn new(resolution: [usize; 3], bounds: Aabb) -> Result<Self, FieldError> {
        if resolution.iter().any(|&n| n == 0) {
            return Err(FieldError::BadResolution);
        }
        let n = resolution[0] * resolution[1] * resolution[2];
        Ok(Self {
            resolution,
            density_params: vec![0.0; n],
            color_params: vec![0.0; 3 * n],
            bounds,
        })
    }

    pub fn with_params(
        resolution: [usize; 3],
        bounds: Aabb,
        density_params: Vec<f64>,
        color_params: Vec<f64>,
    ) -> Result<Self, FieldError> {
        let mut f = Self::new(resolution, bounds)?;
        let n = f.density_params.len();
        if density_params.len() != n {
            return Err(FieldError::BadParamLen { got: density_params.len(), expected: n });
        }
        if color_params.len() != 3 * n {
            return Err(FieldError::BadParamLen { got: color_params.len(), expected: 3 * n });
        }
        f.density_params = density_params;
        f.color_params = color_params;
        Ok(f)
    }

    pub fn cell_count(&self) -> usize {
        self.resolution[0] * self.resolution[1] * self.resolution[2]
    }

    #[inline]
    pub fn cell_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.resolution[0] * (y + self.resolution[1] * z)
    }

    /// World position of lattice point (x, y, z).
    pub fn lattice_point(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let g = [x as f64, y as f64, z as f64];
        let mut p = [0.0; 3];
        for i in 0..3 {
            let n = self.resolution[i];
            let t = if n > 1 { g[i] / (n - 1) as f64 } else { 0.0 };
            p[i] = self.bounds.min[i] + t * (self.bounds.max[i] - self.bounds.min[i]);
        }
        p
    }

    /// Affine map of `bounds` onto [0, resolution-1]^3. Points outside the
    /// bounds map outside that cube.
    pub fn world_to_grid(&self, point: Vec3) -> Vec3 {
        let mut g = [0.0; 3];
        for i in 0..3 {
            let extent = self.bounds.max[i] - self.bounds.min[i];
            let t = (point[i] - self.bounds.min[i]) / extent;
            g[i] = t * (self.resolution[i] - 1) as f64;
        }
        g
    }

    /// Corner indices and trilinear weights for a point, or `None` outside bounds.
    pub fn stencil(&self, point: Vec3) -> Option<TrilinearStencil> {
        if !self.bounds.contains(point) {
            return None;
        }
        let g = self.world_to_grid(point);
        let mut i0 = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = self.resolution[a];
            if n == 1 {
                i0[a] = 0;
                frac[a] = 0.0;
            } else {
                let c = g[a].clamp(0.0, (n - 1) as f64);
                let f = c.floor().min((n - 2) as f64);
                i0[a] = f as usize;
                frac[a] = c - f;
            }
        }
        let step = |a: usize, d: usize| -> usize {
            if self.resolution[a] == 1 {
                0
            } else {
                i0[a] + d
            }
        };
        let mut idx = [0usize; 8];
        let mut w = [0.0f64; 8];
        for k in 0..8 {
            let (dx, dy, dz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
            idx[k] = self.cell_index(step(0, dx), step(1, dy), step(2, dz));
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            w[k] = wx * wy * wz;
        }
        Some(TrilinearStencil { idx, w })
    }

    /// Pre-activation density and color interpolated at `point`.
    pub fn sample_raw(&self, point: Vec3) -> Option<(f64, Vec3)> {
        let st = self.stencil(point)?;
        Some(self.sample_raw_at(&st))
    }

    pub fn sample_raw_at(&self, st: &TrilinearStencil) -> (f64, Vec3) {
        let mut d = 0.0;
        let mut c = [0.0; 3];
        for k in 0..8 {
            let i = st.idx[k];
            let w = st.w[k];
            d += w * self.density_params[i];
            for ch in 0..3 {
                c[ch] += w * self.color_params[3 * i + ch];
            }
        }
        (d, c)
    }

    /// Activated (density, color) at a world point. Outside the bounds this is
    /// vacuum: density 0 and black color.
    pub fn trilinear_sample(&self, point: Vec3) -> (f64, Vec3) {
        match self.sample_raw(point) {
            None => (0.0, [0.0; 3]),
            Some((d, c)) => (
                math::softplus(d),
                [math::sigmoid(c[0]), math::sigmoid(c[1]), math::sigmoid(c[2])],
            ),
        }
    }
}

/// Similarity transform placing an object field in the world frame.
///
/// A point `p` in the object frame maps to `rotation * (scale * p) + translation`.
#[derive(Debug, Clone, Copy)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub scale: f64,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: math::MAT3_IDENTITY, translation: [0.0; 3], scale: 1.0 }
    }

    pub fn new(rotation: Mat3, translation: Vec3, scale: f64) -> Result<Self, FieldError> {
        if !(scale > 0.0) {
            return Err(FieldError::BadScale(scale));
        }
        let xf = Self { rotation, translation, scale };
        let dev = xf.orthonormality_deviation();
        if dev > 1e-9 {
            return Err(FieldError::NotOrthonormal(dev));
        }
        Ok(xf)
    }

    pub fn from_yaw(yaw: f64, translation: Vec3, scale: f64) -> Result<Self, FieldError> {
        Self::new(math::rot_z(yaw), translation, scale)
    }

    pub fn orthonormality_deviation(&self) -> f64 {
        let rt_r = math::mat_mul(&transpose(&self.rotation), &self.rotation);
        let mut dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((rt_r[i][j] - target).abs());
            }
        }
        dev
    }

    pub fn object_to_world(&self, p: Vec3) -> Vec3 {
        math::add(math::mat_vec(&self.rotation, math::scale(p, self.scale)), self.translation)
    }

    pub fn world_to_object(&self, p: Vec3) -> Vec3 {
        math::scale(math::mat_t_vec(&self.rotation, math::sub(p, self.translation)), 1.0 / self.scale)
    }

    /// Map a world-frame ray into the object frame.
    ///
    /// Returns the object-frame ray plus the factor converting object-frame
    /// ray parameter to world distance (the transform's scale), so that
    /// depths measured along the object ray composite in the world frame.
    pub fn transform_ray(&self, origin: Vec3, direction: Vec3) -> (Vec3, Vec3, f64) {
        let o = self.world_to_object(origin);
        let d = math::mat_t_vec(&self.rotation, direction);
        (o, d, self.scale)
    }
}

fn transpose(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}
