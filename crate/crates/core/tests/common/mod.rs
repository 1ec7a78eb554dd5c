#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use scdn_core::geometry_channel::{ChannelParams, Position3};
use scdn_core::network_dynamics::{DeviceSpec, FailureModel};
use scdn_core::scdn_problem::{DeviceRound, RoundSnapshot, ServerEnergyParams};
use scdn_core::seeding::{self, Stream};
use scdn_core::vfl_engine::{Block, OptimizerSpec, Targets, TrainingState, VerticalDataset};

pub const REGION: [f64; 3] = [1000.0, 1000.0, 10.0];

pub fn device_round(id: usize, position: Position3) -> DeviceRound {
    DeviceRound {
        id,
        position,
        model_bits: 1000.0,
        conn_count: 1e4,
        flops_per_cycle: 4.0,
        capacitance: 1e-28,
        batch_size: 32.0,
        cpu_min: 1e8,
        cpu_max: 2e9,
        power_cap: 0.01,
        gamma: 1.0 + id as f64 / 4.0,
        survival: 0.9,
        optimizer: OptimizerSpec::standard(0.05),
        smoothness: 2.0,
        q_max: 1.0,
        sigma: 0.5,
    }
}

/// `n` ground devices placed uniformly in the region.
pub fn snapshot(n: usize, seed: u64, t_max: f64, prev_pose: Position3) -> RoundSnapshot {
    let mut rng = seeding::rng(seed, Stream::Placement, 0, 0);
    let devices = (0..n)
        .map(|i| {
            let p = Position3::new(rng.gen_range(0.0..REGION[0]), rng.gen_range(0.0..REGION[1]), 0.0);
            device_round(i, p)
        })
        .collect();
    RoundSnapshot {
        devices,
        tau_g: 5.0,
        t_max,
        global_smoothness: 2.0 * n as f64,
        initial_loss: 2.3,
        rounds: 30,
        channel: ChannelParams::default(),
        server: ServerEnergyParams::default(),
        region_max: REGION,
        prev_pose,
    }
}

/// Two ground devices at different ranges from the region centre.
pub fn two_device(t_max: f64) -> RoundSnapshot {
    let mut s = snapshot(0, 0, t_max, Position3::new(500.0, 500.0, 5.0));
    s.devices = vec![
        device_round(0, Position3::new(350.0, 450.0, 0.0)),
        device_round(1, Position3::new(800.0, 700.0, 0.0)),
    ];
    s.global_smoothness = 4.0;
    s
}

pub fn device_spec(id: usize, features: Vec<usize>, hidden: Vec<usize>) -> DeviceSpec {
    DeviceSpec {
        id,
        position: Position3::new(100.0 * (id + 1) as f64, 200.0, 0.0),
        features,
        hidden,
        batch_size: 4,
        model_bits: 1000.0,
        conn_count: 1e4,
        flops_per_cycle: 4.0,
        capacitance: 1e-28,
        cpu_min_hz: 1e8,
        cpu_max_hz: 2e9,
        power_cap_w: 0.01,
        optimizer: OptimizerSpec::standard(0.05),
        failure: FailureModel::new(1.0),
    }
}

/// Gaussian features; classification labels from the sign pattern of the
/// first two columns, regression targets linear in all columns.
pub fn tiny_data(seed: u64, rows: usize, cols: usize, classification: bool) -> VerticalDataset {
    let mut rng = seeding::rng(seed, Stream::Dataset, 99, 0);
    let features = DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    let targets = if classification {
        let labels = (0..rows)
            .map(|i| (features[(i, 0)] > 0.0) as usize + 2 * (features[(i, 1.min(cols - 1))] > 0.0) as usize)
            .collect();
        Targets::Classes { labels, n_classes: 4 }
    } else {
        Targets::Values(DMatrix::from_fn(rows, 1, |i, _| {
            (0..cols).map(|j| features[(i, j)] * (j as f64 + 1.0) / cols as f64).sum()
        }))
    };
    VerticalDataset {
        features,
        targets,
        train: (0..rows).collect(),
        test: Vec::new(),
    }
}

/// Small VFL instance: `n_dev` devices over contiguous column slices of width 2.
pub fn tiny_state(seed: u64, n_dev: usize, rows: usize, hidden: Vec<usize>, classification: bool) -> TrainingState {
    state_on(tiny_data(seed, rows, 2 * n_dev, classification), seed, n_dev, hidden)
}

/// Rescales every feature row to unit Euclidean norm.
pub fn unit_rows(mut data: VerticalDataset) -> VerticalDataset {
    for mut row in data.features.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    data
}

fn state_on(data: VerticalDataset, seed: u64, n_dev: usize, hidden: Vec<usize>) -> TrainingState {
    let devices: Vec<DeviceSpec> = (0..n_dev)
        .map(|i| device_spec(i, vec![2 * i, 2 * i + 1], hidden.clone()))
        .collect();
    TrainingState::new(data, &devices, 2, vec![4], OptimizerSpec::standard(0.05), 4, seed).unwrap()
}

/// Linear device and fusion nets on unit-norm rows: the loss is smooth in
/// every block and its smoothness has a closed-form bound.
pub fn linear_state(seed: u64, classification: bool) -> TrainingState {
    let data = unit_rows(tiny_data(seed, 12, 4, classification));
    let devices: Vec<DeviceSpec> = (0..2).map(|i| device_spec(i, vec![2 * i, 2 * i + 1], Vec::new())).collect();
    TrainingState::new(data, &devices, 2, Vec::new(), OptimizerSpec::standard(0.05), 4, seed).unwrap()
}

/// Exact smoothness bound of any minibatch loss w.r.t. a single-layer device
/// block under a linear fusion net: `max‖x̃‖² · ‖W_f,block‖² · c`, with `c` the
/// curvature bound of the loss in the logits (1/2 for softmax cross-entropy,
/// 2/k for the k-output mean squared error).
pub fn linear_block_smoothness(st: &TrainingState, id: usize) -> f64 {
    let m = &st.models[&id];
    let k = st.fusion_order.iter().position(|&d| d == id).unwrap();
    let wf = st.fusion.layers[0].w.columns(k * st.emb_dim, st.emb_dim).into_owned();
    let wf_norm = wf.singular_values().max();
    let x_norm_sq = st
        .data
        .train
        .iter()
        .map(|&r| 1.0 + m.features.iter().map(|&c| st.data.features[(r, c)].powi(2)).sum::<f64>())
        .fold(0.0, f64::max);
    let curvature = if st.is_classification() {
        0.5
    } else {
        2.0 / st.data.targets.output_dim() as f64
    };
    x_norm_sq * wf_norm * wf_norm * curvature
}

/// Within-round gradient drift of device 0 against its bound: the largest
/// (over steps q) mean squared drift, and the bound itself.
pub fn drift_bound_check(seed: u64) -> (f64, f64) {
    use scdn_core::theory;
    use scdn_core::vfl_engine::local_round;

    let mut st = linear_state(seed, seed.is_multiple_of(2));
    let spec = if seed.is_multiple_of(3) {
        OptimizerSpec::momentum(0.05, 0.2)
    } else if seed % 3 == 1 {
        OptimizerSpec::proximal(0.05, 0.5)
    } else {
        OptimizerSpec::standard(0.05)
    };
    st.models.get_mut(&0).unwrap().optimizer = spec;
    let tau = 5usize;
    let block = Block::Device(0);
    let l = linear_block_smoothness(&st, 0);
    let stats = theory::estimate_grad_stats(&st, block, 16, seed).unwrap();
    let (_, w_max) = theory::scale_stats(&spec, tau as f64);
    let bound = theory::gradient_drift_bound(tau as f64, stats.q_max, stats.sigma, spec.learning_rate, l, w_max);

    let theta0 = st.models[&0].net.params();
    let repeats = 8;
    let mut drift = vec![0.0; tau];
    let mut net = st.models[&0].net.clone();
    for rep in 0..repeats {
        let mut rng = seeding::rng(seed, Stream::Minibatch, 1000 + rep, 0);
        local_round(&theta0, tau, &spec, |theta, q| {
            let rows = st.sample_batch(4, &mut rng);
            net.set_params(theta);
            let gq = st.device_grad(0, &net, &rows).unwrap();
            net.set_params(&theta0);
            let g0 = st.device_grad(0, &net, &rows).unwrap();
            drift[q] += gq.iter().zip(&g0).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / repeats as f64;
            gq
        });
    }
    (drift.iter().copied().fold(0.0, f64::max), bound)
}

/// Summed squared block gradients at round starts against the summed
/// stationarity bound, over a short standard-SGD training run.
pub fn stationarity_bound_check(seed: u64) -> (f64, f64) {
    use scdn_core::theory::{self, DeviceTheory, GlobalTheory};
    use scdn_core::vfl_engine::{DevicePlan, RoundPlan};

    let n = 2;
    let rounds = 6;
    let tau = 3usize;
    let mut st = tiny_state(seed, n, 12, vec![3], seed % 2 == 1);
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for r in 0..rounds {
        let ls: Vec<f64> = (0..n).map(|i| theory::block_smoothness(&st, Block::Device(i)).unwrap()).collect();
        let global = GlobalTheory {
            smoothness: ls.iter().copied().fold(0.0, f64::max) * n as f64,
            initial_loss: st.initial_loss,
            rounds,
            n_active: n,
        };
        for (i, &l) in ls.iter().enumerate() {
            let g = st.partial_grad(Block::Device(i), &st.data.train).unwrap();
            lhs += g.iter().map(|v| v * v).sum::<f64>();
            let spec = st.models[&i].optimizer;
            let stats = theory::estimate_grad_stats(&st, Block::Device(i), 16, seed ^ r as u64).unwrap();
            let (w_mean, w_max) = theory::scale_stats(&spec, tau as f64);
            let d = DeviceTheory {
                smoothness: l,
                q_max: stats.q_max,
                sigma: stats.sigma,
                eta: spec.learning_rate,
                w_mean,
                w_max,
                tau_eff: theory::effective_tau(tau as f64, 1.0),
            };
            rhs += theory::stationarity_term(&d, &global).unwrap();
        }
        let plan = RoundPlan {
            devices: (0..n).map(|i| (i, DevicePlan { tau, upload: true })).collect(),
            server_tau: tau,
        };
        st.train_round(&plan, r).unwrap();
    }
    (lhs, rhs)
}

/// Outcome of one solve checked for a monotone, settled objective trace.
#[derive(Debug, Clone)]
pub struct TraceCheck {
    pub n: usize,
    pub policy: scdn_core::sim_cli::PosePolicy,
    /// Largest relative rise after the second iteration, over both stages.
    pub worst_rise: f64,
    /// Relative change between the last two fixed-stage iterates.
    pub final_change: f64,
    pub iterations: usize,
    pub secs: f64,
}

impl TraceCheck {
    pub fn passes(&self) -> bool {
        self.worst_rise <= 1e-8 && self.final_change < 1e-4 && self.iterations <= 30 && self.secs < 60.0
    }
}

fn worst_rise(trace: &[f64]) -> f64 {
    trace
        .windows(2)
        .skip(1)
        .map(|w| (w[1] - w[0]) / w[0].abs())
        .fold(0.0, f64::max)
}

pub fn trace_check(n: usize, policy: scdn_core::sim_cli::PosePolicy) -> TraceCheck {
    use scdn_core::scdn_problem::{solve_round, ObjectiveWeights, SolveCriteria};
    let pose = policy.pose(REGION, 7 + n as u64);
    let snap = snapshot(n, 100 + n as u64, 5e-4, pose);
    let t = std::time::Instant::now();
    let d = solve_round(&snap, &ObjectiveWeights::default(), None, &SolveCriteria::default()).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let tr = &d.trace;
    let final_change = match tr.len() {
        0 | 1 => f64::INFINITY,
        k => (tr[k - 1] - tr[k - 2]).abs() / tr[k - 2].abs(),
    };
    TraceCheck {
        n,
        policy,
        worst_rise: worst_rise(&d.relaxed_trace).max(worst_rise(tr)),
        final_change,
        iterations: tr.len(),
        secs,
    }
}

/// Active-device counts and the final decision over a decreasing deadline sweep
/// on the two-device fixture.
pub fn tmax_sweep(deadlines: &[f64]) -> Vec<(f64, usize, scdn_core::scdn_problem::RoundDecision)> {
    use scdn_core::scdn_problem::{solve_round, ObjectiveWeights, SolveCriteria};
    deadlines
        .iter()
        .map(|&t| {
            let d = solve_round(&two_device(t), &ObjectiveWeights::default(), None, &SolveCriteria::default()).unwrap();
            (t, d.devices.iter().filter(|x| x.active).count(), d)
        })
        .collect()
}

pub const TMAX_SWEEP: [f64; 8] = [5e-4, 2e-4, 1e-4, 5e-5, 2e-5, 5e-6, 1e-6, 5e-7];

/// Relative gap of relax–round against exhaustive enumeration.
pub fn relax_round_gap(n: usize, seed: u64, t_max: f64) -> f64 {
    use scdn_core::scdn_problem::{enumerate_alpha, solve_round, ObjectiveWeights, SolveCriteria};
    let snap = snapshot(n, seed, t_max, Position3::new(500.0, 500.0, 5.0));
    let (w, crit) = (ObjectiveWeights::default(), SolveCriteria::default());
    let rr = solve_round(&snap, &w, None, &crit).unwrap().objective;
    let (_, best) = enumerate_alpha(&snap, &w, &crit).unwrap();
    (rr - best) / best.abs()
}

/// Relative L2 error, falling back to absolute when both sides vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn central_difference(state: &TrainingState, block: Block, params: &[f64], rows: &[usize], h: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let x = p[i];
            p[i] = x + h;
            let up = state.block_loss(block, &p, rows).unwrap();
            p[i] = x - h;
            let down = state.block_loss(block, &p, rows).unwrap();
            p[i] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn block_params(state: &TrainingState, block: Block) -> Vec<f64> {
    match block {
        Block::Server => state.fusion.params(),
        Block::Device(id) => state.models[&id].net.params(),
    }
}

/// Bisection on `w e^w = −1/(2√e)` over `w ≤ −1`, written out independently.
pub fn threshold_oracle() -> f64 {
    let target = -1.0 / (2.0 * 1f64.exp().sqrt());
    let (mut lo, mut hi) = (-20.0f64, -1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid * mid.exp() > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi) + 0.5).exp()
}
