//! Differentiable surrogate-scene driving simulator and adversarial-scenario
//! optimizer: voxel radiance fields, depth-ordered object compositing, an
//! image-based steering policy rolled out under simple vehicle dynamics, and
//! constant-memory adjoint gradients of the episode objective with respect to
//! object appearance.

pub mod adjoint;
pub mod attack;
pub mod config;
pub mod field;
pub mod io;
pub mod math;
pub mod opt;
pub mod pipeline;
pub mod policy;
pub mod recon;
pub mod render;
pub mod rollout;
pub mod vehicle;
