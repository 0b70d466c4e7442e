//! Image-to-steering policy, ground-truth expert controller, dataset
//! generation, and behavior-cloning training.
//!
//! The policy is a fully-connected network on a flattened (image + optional
//! goal one-hot) input with tanh hidden activations; the output is squashed
//! by steering_limit * tanh. Forward and reverse passes are hand-written so
//! the attack pipeline needs no autodiff framework.

use crate::opt::AdamState;
use crate::rollout::ReferencePath;
use crate::vehicle::VehicleState;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("observation length {got} does not match input spec ({expected})")]
    ObsShape { got: usize, expected: usize },
    #[error("goal length {got} does not match input spec ({expected})")]
    GoalShape { got: usize, expected: usize },
    #[error("empty dataset")]
    EmptyDataset,
}

/// Observation layout the network expects. `channels` is 1 (grayscale, the
/// mean of RGB) or 3 (raw RGB); an optional goal one-hot is appended to the
/// flattened image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub goal_len: usize,
}

impl InputSpec {
    pub fn obs_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn input_len(&self) -> usize {
        self.obs_len() + self.goal_len
    }
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    /// Row-major out_dim x in_dim.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { w: vec![0.0; in_dim * out_dim], b: vec![0.0; out_dim], in_dim, out_dim }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.b[o];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            out.push(acc);
        }
    }
}

#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub spec: InputSpec,
    pub steering_limit: f64,
    pub layers: Vec<DenseLayer>,
}

impl PolicyNet {
    /// All-zero parameters (outputs 0 for any input).
    pub fn zeros(spec: InputSpec, hidden: &[usize], steering_limit: f64) -> Self {
        let mut dims = vec![spec.input_len()];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let layers = dims.windows(2).map(|w| DenseLayer::zeros(w[0], w[1])).collect();
        Self { spec, steering_limit, layers }
    }

    /// Gaussian init scaled by 1/sqrt(fan-in).
    pub fn random_init(spec: InputSpec, hidden: &[usize], steering_limit: f64, rng: &mut impl Rng) -> Self {
        let mut net = Self::zeros(spec, hidden, steering_limit);
        for layer in &mut net.layers {
            let std = 1.0 / (layer.in_dim as f64).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            layer.w.iter_mut().for_each(|w| *w = dist.sample(rng));
        }
        net
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            v.extend_from_slice(&l.w);
            v.extend_from_slice(&l.b);
        }
        v
    }

    pub fn set_params_flat(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.param_count());
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&p[off..off + nw]);
            off += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
    }

    /// Convert a rendered H*W*3 RGB frame to this policy's observation space.
    pub fn observe(&self, rgb: &[f64]) -> Vec<f64> {
        match self.spec.channels {
            3 => rgb.to_vec(),
            1 => rgb.chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect(),
            c => panic!("unsupported channel count {c}"),
        }
    }

    /// Adjoint of [`observe`]: map an observation cotangent back to RGB.
    pub fn obs_cot_to_rgb(&self, cot: &[f64]) -> Vec<f64> {
        match self.spec.channels {
            3 => cot.to_vec(),
            1 => {
                let mut rgb = Vec::with_capacity(cot.len() * 3);
                for &g in cot {
                    let v = g / 3.0;
                    rgb.extend_from_slice(&[v, v, v]);
                }
                rgb
            }
            c => panic!("unsupported channel count {c}"),
        }
    }

    fn build_input(&self, obs: &[f64], goal: Option<&[f64]>) -> Result<Vec<f64>, PolicyError> {
        if obs.len() != self.spec.obs_len() {
            return Err(PolicyError::ObsShape { got: obs.len(), expected: self.spec.obs_len() });
        }
        let goal_len = goal.map_or(0, |g| g.len());
        if goal_len != self.spec.goal_len {
            return Err(PolicyError::GoalShape { got: goal_len, expected: self.spec.goal_len });
        }
        let mut input = Vec::with_capacity(self.spec.input_len());
        input.extend_from_slice(obs);
        if let Some(g) = goal {
            input.extend_from_slice(g);
        }
        Ok(input)
    }

    /// Steering command for an observation; bounded by steering_limit.
    pub fn forward(&self, obs: &[f64], goal: Option<&[f64]>) -> Result<f64, PolicyError> {
        Ok(self.forward_cached(obs, goal)?.0)
    }

    /// Forward pass retaining per-layer activations for backprop.
    /// `acts[0]` is the input; `acts[k]` (k >= 1) is layer k-1's post-tanh
    /// output except the last, which is the pre-squash scalar.
    fn forward_cached(&self, obs: &[f64], goal: Option<&[f64]>) -> Result<(f64, Vec<Vec<f64>>), PolicyError> {
        let input = self.build_input(obs, goal)?;
        let mut acts = vec![input];
        let n = self.layers.len();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::new();
            layer.apply(acts.last().unwrap(), &mut out);
            if k + 1 < n {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(out);
        }
        let z = acts.last().unwrap()[0];
        Ok((self.steering_limit * z.tanh(), acts))
    }

    /// seed * du/dobs by reverse accumulation (observation-space cotangent).
    pub fn input_grad(&self, obs: &[f64], goal: Option<&[f64]>, seed: f64) -> Result<Vec<f64>, PolicyError> {
        let (_, acts) = self.forward_cached(obs, goal)?;
        let (input_cot, _) = self.backward(&acts, seed);
        Ok(input_cot[..self.spec.obs_len()].to_vec())
    }

    /// Reverse pass: returns (input cotangent, flat parameter gradient).
    fn backward(&self, acts: &[Vec<f64>], seed: f64) -> (Vec<f64>, Vec<f64>) {
        let n = self.layers.len();
        let z = acts[n][0];
        let th = z.tanh();
        // cotangent of the last layer's linear output
        let mut cot = vec![seed * self.steering_limit * (1.0 - th * th)];

        let mut wgrads: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut bgrads: Vec<Vec<f64>> = Vec::with_capacity(n);
        for k in (0..n).rev() {
            let layer = &self.layers[k];
            let x = &acts[k];
            let mut wg = vec![0.0; layer.w.len()];
            for o in 0..layer.out_dim {
                let c = cot[o];
                if c != 0.0 {
                    let row = &mut wg[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (g, xi) in row.iter_mut().zip(x) {
                        *g = c * xi;
                    }
                }
            }
            let bg = cot.clone();
            // propagate to layer input
            let mut prev = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let c = cot[o];
                if c != 0.0 {
                    let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (p, wi) in prev.iter_mut().zip(row) {
                        *p += c * wi;
                    }
                }
            }
            if k > 0 {
                // chain through the tanh that produced acts[k]
                for (p, h) in prev.iter_mut().zip(&acts[k][..]) {
                    *p *= 1.0 - h * h;
                }
            }
            wgrads.push(wg);
            bgrads.push(bg);
            cot = prev;
        }
        wgrads.reverse();
        bgrads.reverse();
        let mut flat = Vec::with_capacity(self.param_count());
        for (wg, bg) in wgrads.into_iter().zip(bgrads) {
            flat.extend(wg);
            flat.extend(bg);
        }
        (cot, flat)
    }
}

/// Pure-pursuit style ground-truth controller configuration.
#[derive(Debug, Clone, Copy)]
pub struct ExpertConfig {
    /// Lookahead distance along the path, meters.
    pub lookahead: f64,
    /// Proportional gain on the bearing error.
    pub gain: f64,
    /// Output clamp, radians (or rad/s for Dubins).
    pub steering_limit: f64,
}

/// Steer toward the path point `lookahead` meters ahead of the closest point.
/// Positive output increases heading (turns left).
pub fn expert_control(state: &VehicleState, path: &ReferencePath, cfg: &ExpertConfig) -> f64 {
    let s = path.closest_arclength([state.x, state.y]);
    let target = path.point_at(s + cfg.lookahead);
    let bearing = (target[1] - state.y).atan2(target[0] - state.x);
    let err = crate::math::wrap_angle(bearing - state.heading);
    (cfg.gain * err).clamp(-cfg.steering_limit, cfg.steering_limit)
}

#[derive(Debug, Clone)]
pub struct DatasetRecord {
    /// H*W*3 RGB frame as rendered.
    pub rgb: Vec<f64>,
    pub goal: Option<usize>,
    pub steering: f64,
    /// Sampled lateral offset used to generate the record (diagnostics).
    pub lateral: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ImitationDataset {
    pub width: usize,
    pub height: usize,
    pub records: Vec<DatasetRecord>,
}

impl ImitationDataset {
    pub fn merge(&mut self, other: ImitationDataset) {
        self.records.extend(other.records);
    }
}

/// Sample recovery states around the reference (Gaussian lateral and heading
/// noise), render observations, and label them with expert actions.
pub fn generate_dataset(
    render: &(dyn Fn(&VehicleState) -> Vec<f64> + Sync),
    width: usize,
    height: usize,
    path: &ReferencePath,
    expert: &ExpertConfig,
    lateral_std: f64,
    heading_std: f64,
    n: usize,
    rng: &mut impl Rng,
) -> ImitationDataset {
    use rayon::prelude::*;
    let lat_dist = Normal::new(0.0, lateral_std.max(1e-300)).unwrap();
    let head_dist = Normal::new(0.0, heading_std.max(1e-300)).unwrap();
    let total = path.total_length();
    let states: Vec<(VehicleState, f64)> = (0..n)
        .map(|_| {
            let s = rng.gen::<f64>() * total;
            let lateral = if lateral_std > 0.0 { lat_dist.sample(rng) } else { 0.0 };
            let dh = if heading_std > 0.0 { head_dist.sample(rng) } else { 0.0 };
            let p = path.point_at(s);
            let tangent = path.tangent_at(s);
            let heading = tangent[1].atan2(tangent[0]) + dh;
            let normal = [-tangent[1], tangent[0]]; // left of travel
            let state = VehicleState::new(p[0] + lateral * normal[0], p[1] + lateral * normal[1], heading);
            (state, lateral)
        })
        .collect();
    let records: Vec<DatasetRecord> = states
        .par_iter()
        .map(|(state, lateral)| DatasetRecord {
            rgb: render(state),
            goal: None,
            steering: expert_control(state, path, expert),
            lateral: *lateral,
        })
        .collect();
    ImitationDataset { width, height, records }
}

/// Behavior cloning: minimize mean squared steering error with Adam.
/// Returns the per-epoch training loss history; `net` is updated in place so
/// zero epochs leaves the initialization untouched. Gaussian pixel noise of
/// `noise_std` is applied to observations during training only.
pub fn train_policy_bc(
    dataset: &ImitationDataset,
    net: &mut PolicyNet,
    epochs: usize,
    lr: f64,
    noise_std: f64,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, PolicyError> {
    if dataset.records.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let obs: Vec<Vec<f64>> = dataset.records.iter().map(|r| net.observe(&r.rgb)).collect();
    let noise = Normal::new(0.0, noise_std.max(1e-300)).unwrap();
    let mut adam = AdamState::new(net.param_count());
    let mut params = net.params_flat();
    let mut history = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..dataset.records.len()).collect();
    let mut noisy = Vec::new();
    for _ in 0..epochs {
        // Fisher-Yates with the caller's rng keeps runs reproducible
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(batch_size) {
            let mut grad = vec![0.0; params.len()];
            let mut batch_loss = 0.0;
            for &idx in batch {
                noisy.clear();
                noisy.extend_from_slice(&obs[idx]);
                if noise_std > 0.0 {
                    noisy.iter_mut().for_each(|p| *p += noise.sample(rng));
                }
                let (u, acts) = net.forward_cached(&noisy, None)?;
                let err = u - dataset.records[idx].steering;
                batch_loss += err * err;
                let (_, pg) = net.backward(&acts, 2.0 * err / batch.len() as f64);
                for (g, p) in grad.iter_mut().zip(pg) {
                    *g += p;
                }
            }
            adam.step(&mut params, &grad, lr);
            net.set_params_flat(&params);
            epoch_loss += batch_loss;
        }
        history.push(epoch_loss / dataset.records.len() as f64);
    }
    Ok(history)
}

/// Mean squared steering error of `net` on a dataset slice (no noise).
pub fn bc_loss(dataset: &ImitationDataset, net: &PolicyNet, indices: &[usize]) -> f64 {
    let mut loss = 0.0;
    for &i in indices {
        let o = net.observe(&dataset.records[i].rgb);
        let u = net.forward(&o, None).unwrap();
        let e = u - dataset.records[i].steering;
        loss += e * e;
    }
    loss / indices.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec() -> InputSpec {
        InputSpec { height: 1, width: 2, channels: 1, goal_len: 0 }
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = PolicyNet::zeros(tiny_spec(), &[4], 0.8);
        let u = net.forward(&[0.3, -0.9], None).unwrap();
        assert_eq!(u, 0.0);
    }

    #[test]
    fn output_bounded_by_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = PolicyNet::random_init(tiny_spec(), &[8, 4], 0.7, &mut rng);
        for _ in 0..50 {
            let obs = [rng.gen::<f64>() * 100.0 - 50.0, rng.gen::<f64>() * 100.0 - 50.0];
            let u = net.forward(&obs, None).unwrap();
            assert!(u.abs() < 0.7);
        }
    }

    #[test]
    fn single_layer_hand_computed() {
        let mut net = PolicyNet::zeros(tiny_spec(), &[], 2.0);
        net.layers[0].w = vec![0.5, -1.0];
        net.layers[0].b = vec![0.25];
        let obs = [0.4, 0.3];
        let z: f64 = 0.5 * 0.4 - 1.0 * 0.3 + 0.25;
        let expect = 2.0 * z.tanh();
        assert!((net.forward(&obs, None).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let net = PolicyNet::zeros(tiny_spec(), &[4], 1.0);
        assert!(net.forward(&[0.0; 3], None).is_err());
        assert!(net.forward(&[0.0; 2], Some(&[1.0])).is_err());
    }

    #[test]
    fn input_grad_zero_net_and_linearity() {
        let zero = PolicyNet::zeros(tiny_spec(), &[4], 1.0);
        let g = zero.input_grad(&[0.1, 0.2], None, 1.0).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = PolicyNet::random_init(tiny_spec(), &[6], 1.0, &mut rng);
        let obs = [0.3, -0.2];
        let g1 = net.input_grad(&obs, None, 1.5).unwrap();
        let g2 = net.input_grad(&obs, None, 3.0).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn input_grad_matches_finite_differences() {
        let spec = InputSpec { height: 5, width: 5, channels: 1, goal_len: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = PolicyNet::random_init(spec, &[12, 6], 1.2, &mut rng);
        let mut obs: Vec<f64> = (0..25).map(|_| rng.gen::<f64>()).collect();
        let seed = 0.9;
        let g = net.input_grad(&obs, None, seed).unwrap();
        let eps = 1e-6;
        for _ in 0..20 {
            let k = rng.gen_range(0..25);
            let base = obs[k];
            obs[k] = base + eps;
            let hi = net.forward(&obs, None).unwrap();
            obs[k] = base - eps;
            let lo = net.forward(&obs, None).unwrap();
            obs[k] = base;
            let fd = seed * (hi - lo) / (2.0 * eps);
            let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-9);
            assert!(rel < 1e-5, "pixel {k}: fd {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn param_grad_matches_finite_differences() {
        let spec = tiny_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let net = PolicyNet::random_init(spec, &[5], 1.0, &mut rng);
        let obs = [0.7, -0.4];
        let (_, acts) = net.forward_cached(&obs, None).unwrap();
        let (_, pg) = net.backward(&acts, 1.0);
        let mut params = net.params_flat();
        let eps = 1e-6;
        for k in 0..params.len() {
            let mut probe = net.clone();
            let base = params[k];
            params[k] = base + eps;
            probe.set_params_flat(&params);
            let hi = probe.forward(&obs, None).unwrap();
            params[k] = base - eps;
            probe.set_params_flat(&params);
            let lo = probe.forward(&obs, None).unwrap();
            params[k] = base;
            let fd = (hi - lo) / (2.0 * eps);
            assert!((fd - pg[k]).abs() < 1e-8, "param {k}: fd {fd} vs {}", pg[k]);
        }
    }

    fn straight_path() -> ReferencePath {
        ReferencePath::new(vec![[0.0, 0.0], [10.0, 0.0]], false).unwrap()
    }

    #[test]
    fn expert_on_path_aligned_is_zero() {
        let cfg = ExpertConfig { lookahead: 1.0, gain: 1.0, steering_limit: 1.0 };
        let u = expert_control(&VehicleState::new(3.0, 0.0, 0.0), &straight_path(), &cfg);
        assert!(u.abs() < 1e-12);
    }

    #[test]
    fn expert_left_offset_steers_right() {
        let cfg = ExpertConfig { lookahead: 1.0, gain: 1.0, steering_limit: 1.0 };
        let u = expert_control(&VehicleState::new(3.0, 0.5, 0.0), &straight_path(), &cfg);
        assert!(u < 0.0, "left of path must steer right (negative u), got {u}");
    }

    #[test]
    fn expert_hand_computed_bearing() {
        let cfg = ExpertConfig { lookahead: 1.0, gain: 1.0, steering_limit: 1.0 };
        let u = expert_control(&VehicleState::new(3.0, 0.5, 0.0), &straight_path(), &cfg);
        let expect = (-0.5f64).atan2(1.0);
        assert!((u - expect).abs() < 1e-12, "{u} vs {expect}");
    }

    fn synthetic_render(width: usize, height: usize) -> impl Fn(&VehicleState) -> Vec<f64> + Sync {
        move |s: &VehicleState| {
            // brightness encodes lateral position; enough signal for BC to fit
            let v = (0.5 + 0.4 * (s.y - 0.0).tanh() + 0.1 * s.heading.tanh()).clamp(0.0, 1.0);
            vec![v; width * height * 3]
        }
    }

    #[test]
    fn dataset_zero_std_stays_on_reference() {
        let path = straight_path();
        let cfg = ExpertConfig { lookahead: 1.0, gain: 2.0, steering_limit: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let render = synthetic_render(2, 2);
        let ds = generate_dataset(&render, 2, 2, &path, &cfg, 0.0, 0.0, 20, &mut rng);
        for r in &ds.records {
            assert_eq!(r.lateral, 0.0);
            assert!(r.steering.abs() < 1e-9);
        }
    }

    #[test]
    fn dataset_lateral_std_matches_request() {
        let path = straight_path();
        let cfg = ExpertConfig { lookahead: 1.0, gain: 2.0, steering_limit: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let render = synthetic_render(2, 2);
        let ds = generate_dataset(&render, 2, 2, &path, &cfg, 0.3, 0.1, 1000, &mut rng);
        let mean: f64 = ds.records.iter().map(|r| r.lateral).sum::<f64>() / 1000.0;
        let var: f64 = ds.records.iter().map(|r| (r.lateral - mean).powi(2)).sum::<f64>() / 999.0;
        let std = var.sqrt();
        assert!((std - 0.3).abs() / 0.3 < 0.15, "empirical std {std}");
    }

    #[test]
    fn bc_fits_constant_labels() {
        let spec = InputSpec { height: 2, width: 2, channels: 1, goal_len: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let records = (0..64)
            .map(|_| DatasetRecord {
                rgb: (0..12).map(|_| rng.gen::<f64>()).collect(),
                goal: None,
                steering: 0.37,
                lateral: 0.0,
            })
            .collect();
        let ds = ImitationDataset { width: 2, height: 2, records };
        let mut net = PolicyNet::random_init(spec, &[8], 1.0, &mut rng);
        train_policy_bc(&ds, &mut net, 300, 1e-2, 0.0, 16, &mut rng).unwrap();
        for r in &ds.records {
            let u = net.forward(&net.observe(&r.rgb), None).unwrap();
            assert!((u - 0.37).abs() < 1e-2, "got {u}");
        }
    }

    #[test]
    fn bc_zero_epochs_keeps_init() {
        let spec = tiny_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ds = ImitationDataset {
            width: 2,
            height: 1,
            records: vec![DatasetRecord { rgb: vec![0.5; 6], goal: None, steering: 0.1, lateral: 0.0 }],
        };
        let mut net = PolicyNet::random_init(spec, &[4], 1.0, &mut rng);
        let before = net.params_flat();
        train_policy_bc(&ds, &mut net, 0, 1e-2, 0.0, 8, &mut rng).unwrap();
        assert_eq!(before, net.params_flat());
    }

    #[test]
    fn bc_heldout_loss_decreases() {
        let spec = InputSpec { height: 2, width: 2, channels: 1, goal_len: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // labels are a smooth function of the image mean
        let records: Vec<DatasetRecord> = (0..200)
            .map(|_| {
                let rgb: Vec<f64> = {
                    let v = rng.gen::<f64>();
                    vec![v; 12]
                };
                let steering = 0.5 * (rgb[0] - 0.5);
                DatasetRecord { rgb, goal: None, steering, lateral: 0.0 }
            })
            .collect();
        let ds = ImitationDataset { width: 2, height: 2, records };
        let holdout: Vec<usize> = (180..200).collect();
        let mut net = PolicyNet::random_init(spec, &[8], 1.0, &mut rng);
        let before = bc_loss(&ds, &net, &holdout);
        let hist = train_policy_bc(&ds, &mut net, 100, 5e-3, 0.0, 32, &mut rng).unwrap();
        let after = bc_loss(&ds, &net, &holdout);
        assert!(after < before, "held-out loss {after} !< {before}");
        assert!(*hist.last().unwrap() < hist[0]);
    }
}
