//! Artifact persistence: field and policy snapshots, PPM images, depth dumps,
//! posed-image directories, imitation datasets, and trajectory CSVs.
//!
//! Binary formats store parameters as little-endian f32; loading therefore
//! quantizes. Pipelines that report an objective for stored parameters must
//! evaluate the quantized values so the report matches the artifact.

use crate::field::{Aabb, VoxelField};
use crate::policy::{DatasetRecord, ImitationDataset, InputSpec, PolicyNet};
use crate::recon::{PosedImage, PosedImageSet};
use crate::render::Camera;
use crate::rollout::{cte, ReferencePath, Trajectory};
use crate::vehicle::VehicleState;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic in {0}: expected {1}")]
    BadMagic(String, &'static str),
    #[error("unsupported version {0} in {1}")]
    BadVersion(u32, String),
    #[error("malformed {0}: {1}")]
    Malformed(&'static str, String),
    #[error(transparent)]
    Field(#[from] crate::field::FieldError),
    #[error(transparent)]
    Render(#[from] crate::render::RenderError),
}

const FIELD_MAGIC: &[u8; 4] = b"AVSF";
const POLICY_MAGIC: &[u8; 4] = b"AVSP";
const SNAPSHOT_VERSION: u32 = 1;
/// Activation identifiers stored in field snapshots.
const ACT_SOFTPLUS: u32 = 1;
const ACT_SIGMOID: u32 = 2;

fn w_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
fn w_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
fn w_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
fn r_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
fn r_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
fn r_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn write_f32_slice(w: &mut impl Write, vals: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(vals.len() * 4);
    for &v in vals {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_f32_slice(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
}

/// Quantize a parameter vector through the f32 storage type in place, so
/// in-memory values match what a snapshot round-trip would produce.
pub fn quantize_f32(vals: &mut [f64]) {
    for v in vals.iter_mut() {
        *v = *v as f32 as f64;
    }
}

// ---------------------------------------------------------------------------
// Field snapshots

pub fn save_field(field: &VoxelField, path: &Path) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FIELD_MAGIC)?;
    w_u32(&mut w, SNAPSHOT_VERSION)?;
    for r in field.resolution {
        w_u64(&mut w, r as u64)?;
    }
    for v in field.bounds.min.iter().chain(field.bounds.max.iter()) {
        w_f64(&mut w, *v)?;
    }
    w_u32(&mut w, ACT_SOFTPLUS)?;
    w_u32(&mut w, ACT_SIGMOID)?;
    write_f32_slice(&mut w, &field.density_params)?;
    write_f32_slice(&mut w, &field.color_params)?;
    w.flush()?;
    Ok(())
}

pub fn load_field(path: &Path) -> Result<VoxelField, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FIELD_MAGIC {
        return Err(IoError::BadMagic(path.display().to_string(), "AVSF"));
    }
    let version = r_u32(&mut r)?;
    if version != SNAPSHOT_VERSION {
        return Err(IoError::BadVersion(version, path.display().to_string()));
    }
    let resolution = [r_u64(&mut r)? as usize, r_u64(&mut r)? as usize, r_u64(&mut r)? as usize];
    let min = [r_f64(&mut r)?, r_f64(&mut r)?, r_f64(&mut r)?];
    let max = [r_f64(&mut r)?, r_f64(&mut r)?, r_f64(&mut r)?];
    let (act_d, act_c) = (r_u32(&mut r)?, r_u32(&mut r)?);
    if act_d != ACT_SOFTPLUS || act_c != ACT_SIGMOID {
        return Err(IoError::Malformed("field snapshot", format!("unknown activations {act_d}/{act_c}")));
    }
    let bounds = Aabb::new(min, max)?;
    let n = resolution[0] * resolution[1] * resolution[2];
    let density = read_f32_slice(&mut r, n)?;
    let color = read_f32_slice(&mut r, 3 * n)?;
    Ok(VoxelField::with_params(resolution, bounds, density, color)?)
}

// ---------------------------------------------------------------------------
// Policy snapshots

pub fn save_policy(net: &PolicyNet, path: &Path) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(POLICY_MAGIC)?;
    w_u32(&mut w, SNAPSHOT_VERSION)?;
    w_f64(&mut w, net.steering_limit)?;
    for v in [net.spec.height, net.spec.width, net.spec.channels, net.spec.goal_len] {
        w_u64(&mut w, v as u64)?;
    }
    w_u64(&mut w, net.layers.len() as u64)?;
    for l in &net.layers {
        w_u64(&mut w, l.in_dim as u64)?;
        w_u64(&mut w, l.out_dim as u64)?;
    }
    for l in &net.layers {
        write_f32_slice(&mut w, &l.w)?;
        write_f32_slice(&mut w, &l.b)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_policy(path: &Path) -> Result<PolicyNet, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != POLICY_MAGIC {
        return Err(IoError::BadMagic(path.display().to_string(), "AVSP"));
    }
    let version = r_u32(&mut r)?;
    if version != SNAPSHOT_VERSION {
        return Err(IoError::BadVersion(version, path.display().to_string()));
    }
    let steering_limit = r_f64(&mut r)?;
    let spec = InputSpec {
        height: r_u64(&mut r)? as usize,
        width: r_u64(&mut r)? as usize,
        channels: r_u64(&mut r)? as usize,
        goal_len: r_u64(&mut r)? as usize,
    };
    let n_layers = r_u64(&mut r)? as usize;
    let mut dims = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        dims.push((r_u64(&mut r)? as usize, r_u64(&mut r)? as usize));
    }
    if dims.is_empty() {
        return Err(IoError::Malformed("policy snapshot", "no layers".into()));
    }
    let hidden: Vec<usize> = dims[..n_layers - 1].iter().map(|&(_, o)| o).collect();
    let mut net = PolicyNet::zeros(spec, &hidden, steering_limit);
    for (l, &(i, o)) in net.layers.iter_mut().zip(&dims) {
        if l.in_dim != i || l.out_dim != o {
            return Err(IoError::Malformed("policy snapshot", format!("layer shape {i}x{o} inconsistent")));
        }
        l.w = read_f32_slice(&mut r, i * o)?;
        l.b = read_f32_slice(&mut r, o)?;
    }
    Ok(net)
}

// ---------------------------------------------------------------------------
// Images

/// Write an RGB image in [0,1] as binary 8-bit PPM (P6).
pub fn save_ppm(rgb: &[f64], width: usize, height: usize, path: &Path) -> Result<(), IoError> {
    if rgb.len() != width * height * 3 {
        return Err(IoError::Malformed("ppm", format!("{} values for {width}x{height}", rgb.len())));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Read a binary 8-bit PPM into [0,1] RGB.
pub fn load_ppm(path: &Path) -> Result<(Vec<f64>, usize, usize), IoError> {
    let data = fs::read(path)?;
    if !data.starts_with(b"P6") {
        return Err(IoError::BadMagic(path.display().to_string(), "P6"));
    }
    // parse three whitespace-separated header tokens after the magic
    let mut pos = 2;
    let mut tokens = Vec::new();
    while tokens.len() < 3 && pos < data.len() {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(
            std::str::from_utf8(&data[start..pos])
                .ok()
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| IoError::Malformed("ppm", "bad header token".into()))?,
        );
    }
    pos += 1; // single whitespace after maxval
    let (width, height, maxval) = (tokens[0], tokens[1], tokens[2]);
    if maxval != 255 {
        return Err(IoError::Malformed("ppm", format!("unsupported maxval {maxval}")));
    }
    let n = width * height * 3;
    if data.len() < pos + n {
        return Err(IoError::Malformed("ppm", "truncated pixel data".into()));
    }
    let rgb = data[pos..pos + n].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((rgb, width, height))
}

/// Write a single-channel depth image: text header (magic, dimensions) in the
/// PPM convention, then raw little-endian f32 values row-major.
pub fn save_depth(depth: &[f64], width: usize, height: usize, path: &Path) -> Result<(), IoError> {
    if depth.len() != width * height {
        return Err(IoError::Malformed("depth", format!("{} values for {width}x{height}", depth.len())));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "DF32\n{width} {height}\n")?;
    write_f32_slice(&mut w, depth)?;
    w.flush()?;
    Ok(())
}

pub fn load_depth(path: &Path) -> Result<(Vec<f64>, usize, usize), IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim() != "DF32" {
        return Err(IoError::BadMagic(path.display().to_string(), "DF32"));
    }
    line.clear();
    r.read_line(&mut line)?;
    let dims: Vec<usize> = line.split_whitespace().filter_map(|t| t.parse().ok()).collect();
    if dims.len() != 2 {
        return Err(IoError::Malformed("depth", "bad dimension line".into()));
    }
    let vals = read_f32_slice(&mut r, dims[0] * dims[1])?;
    Ok((vals, dims[0], dims[1]))
}

// ---------------------------------------------------------------------------
// Posed image sets

/// Write PPM images plus a poses file; each pose line holds the filename, the
/// 12 row-major camera-to-world floats, focal, width, height.
pub fn save_posed_images(set: &PosedImageSet, dir: &Path) -> Result<(), IoError> {
    fs::create_dir_all(dir)?;
    let mut poses = BufWriter::new(File::create(dir.join("poses.txt"))?);
    for (i, v) in set.views.iter().enumerate() {
        let name = format!("view_{i:04}.ppm");
        save_ppm(&v.rgb, set.width, set.height, &dir.join(&name))?;
        let r = &v.camera.pose.rotation;
        let t = &v.camera.pose.translation;
        write!(poses, "{name}")?;
        for row in 0..3 {
            write!(
                poses,
                " {:.17e} {:.17e} {:.17e} {:.17e}",
                r[row][0], r[row][1], r[row][2], t[row]
            )?;
        }
        writeln!(poses, " {:.17e} {} {}", v.camera.focal, v.camera.width, v.camera.height)?;
    }
    poses.flush()?;
    Ok(())
}

pub fn load_posed_images(dir: &Path, near: f64, far: f64) -> Result<PosedImageSet, IoError> {
    let file = File::open(dir.join("poses.txt"))?;
    let mut views = Vec::new();
    let (mut width, mut height) = (0, 0);
    for line in BufReader::new(file).lines() {
        let line = line?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 16 {
            return Err(IoError::Malformed("poses", format!("{} fields in line", parts.len())));
        }
        let f: Vec<f64> = parts[1..]
            .iter()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| IoError::Malformed("poses", e.to_string()))?;
        let rotation = [[f[0], f[1], f[2]], [f[4], f[5], f[6]], [f[8], f[9], f[10]]];
        let translation = [f[3], f[7], f[11]];
        let (focal, w, h) = (f[12], f[13] as usize, f[14] as usize);
        let pose = crate::field::RigidTransform::new(rotation, translation, 1.0)?;
        let camera = Camera::new(pose, focal, w, h, near, far)?;
        let (rgb, iw, ih) = load_ppm(&dir.join(parts[0]))?;
        if iw != w || ih != h {
            return Err(IoError::Malformed("poses", format!("{}: image {iw}x{ih} vs pose {w}x{h}", parts[0])));
        }
        (width, height) = (w, h);
        views.push(PosedImage { camera, rgb });
    }
    Ok(PosedImageSet { views, width, height })
}

// ---------------------------------------------------------------------------
// Imitation datasets

/// PPM frame per record plus an index of (filename, goal, steering).
pub fn save_dataset(ds: &ImitationDataset, dir: &Path) -> Result<(), IoError> {
    fs::create_dir_all(dir)?;
    let mut index = BufWriter::new(File::create(dir.join("index.tsv"))?);
    for (i, rec) in ds.records.iter().enumerate() {
        let name = format!("obs_{i:05}.ppm");
        save_ppm(&rec.rgb, ds.width, ds.height, &dir.join(&name))?;
        let goal = rec.goal.map_or("-".to_string(), |g| g.to_string());
        writeln!(index, "{name}\t{goal}\t{:.17e}", rec.steering)?;
    }
    index.flush()?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<ImitationDataset, IoError> {
    let file = File::open(dir.join("index.tsv"))?;
    let mut records = Vec::new();
    let (mut width, mut height) = (0, 0);
    for line in BufReader::new(file).lines() {
        let line = line?;
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(IoError::Malformed("dataset index", format!("{} fields", parts.len())));
        }
        let (rgb, w, h) = load_ppm(&dir.join(parts[0]))?;
        let goal = if parts[1] == "-" {
            None
        } else {
            Some(parts[1].parse().map_err(|_| IoError::Malformed("dataset index", "bad goal".into()))?)
        };
        let steering =
            parts[2].parse().map_err(|_| IoError::Malformed("dataset index", "bad steering".into()))?;
        (width, height) = (w, h);
        records.push(DatasetRecord { rgb, goal, steering, lateral: 0.0 });
    }
    Ok(ImitationDataset { width, height, records })
}

// ---------------------------------------------------------------------------
// Trajectories

/// CSV with header t,x,y,heading,u,cte; 9 significant digits; the final state
/// row carries an empty control cell.
pub fn save_trajectory_csv(traj: &Trajectory, path: &ReferencePath, file: &Path) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(file)?);
    writeln!(w, "t,x,y,heading,u,cte")?;
    for (t, s) in traj.states.iter().enumerate() {
        let u = traj.controls.get(t).map_or(String::new(), |u| format!("{u:.8e}"));
        let c = cte(s, path).0;
        writeln!(w, "{t},{:.8e},{:.8e},{:.8e},{u},{c:.8e}", s.x, s.y, s.heading)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_trajectory_csv(file: &Path) -> Result<(Vec<VehicleState>, Vec<f64>), IoError> {
    let f = File::open(file)?;
    let mut states = Vec::new();
    let mut controls = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if i == 0 {
            if !line.starts_with("t,") {
                return Err(IoError::BadMagic(file.display().to_string(), "t,x,y,heading,u,cte"));
            }
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(IoError::Malformed("trajectory csv", format!("{} fields", parts.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| IoError::Malformed("trajectory csv", e.to_string()));
        states.push(VehicleState::new(num(parts[1])?, num(parts[2])?, num(parts[3])?));
        if !parts[4].is_empty() {
            controls.push(num(parts[4])?);
        }
    }
    Ok((states, controls))
}
