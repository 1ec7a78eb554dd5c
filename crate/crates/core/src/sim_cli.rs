//! Simulation driver: configuration, the per-round loop, baselines, sweeps and
//! metrics files.
//!
//! Each round collects device parameters and theory estimates, computes
//! importance, decides resources (optimized or heuristic), trains with the
//! rounded iteration counts over the links that meet the deadline, and then
//! advances the device population.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry_channel::{self, ChannelConfig, ChannelParams, Position3};
use crate::importance::{self, ImportanceScaling};
use crate::network_dynamics::{self, ArrivalModel, DeviceSpec, NetworkState};
use crate::scdn_problem::{
    self, DeviceDecision, DeviceRound, ObjectiveTerms, ObjectiveWeights, RoundDecision, RoundSnapshot, ScdnError,
    ServerEnergyParams, SolveCriteria,
};
use crate::seeding::{self, Stream};
use crate::theory::{self, TheoryError};
use crate::vfl_engine::{self, Block, DevicePlan, OptimizerSpec, RoundPlan, Targets, TrainingState, VerticalDataset, VflError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Vfl(#[from] VflError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error("round {round}: {source}")]
    Solver { round: usize, source: ScdnError },
}

pub const METRICS_HEADER: [&str; 19] = [
    "round",
    "loss",
    "perf",
    "avg_tau",
    "avg_alpha",
    "avg_power_w",
    "avg_cpu_hz",
    "server_x",
    "server_y",
    "server_z",
    "e_tx_j",
    "e_p_j",
    "e_m_j",
    "obj_a",
    "obj_b",
    "obj_c",
    "obj_d",
    "solver_iters",
    "wall_ms",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Optimized rounds; exited devices keep their last embedding.
    Scdn,
    /// Standard-anchor decisions without optimization; exited devices keep their last embedding.
    ScdnNoOpt,
    /// Everyone trains `τ_g` iterations at full power and CPU; stationary server.
    MaxVfl,
    /// Standard-anchor decisions; exited devices are removed from the fusion input.
    Zoc,
    /// Optimized rounds; exited devices are removed from the fusion input.
    ZocWithOpt,
}

impl Method {
    pub fn optimizes(self) -> bool {
        matches!(self, Method::Scdn | Method::ZocWithOpt)
    }

    pub fn zero_out_exits(self) -> bool {
        matches!(self, Method::Zoc | Method::ZocWithOpt)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Scdn => "scdn",
            Method::ScdnNoOpt => "scdn_no_opt",
            Method::MaxVfl => "max_vfl",
            Method::Zoc => "zoc",
            Method::ZocWithOpt => "zoc_with_opt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosePolicy {
    Center,
    Random,
    Origin,
    Max,
    RandomEdge,
}

impl PosePolicy {
    pub const ALL: [PosePolicy; 5] = [
        PosePolicy::Center,
        PosePolicy::Random,
        PosePolicy::Origin,
        PosePolicy::Max,
        PosePolicy::RandomEdge,
    ];

    pub fn pose(self, region: [f64; 3], seed: u64) -> Position3 {
        let mut rng = seeding::rng(seed, Stream::Placement, u64::MAX, 0);
        match self {
            PosePolicy::Center => Position3::new(region[0] / 2.0, region[1] / 2.0, region[2] / 2.0),
            PosePolicy::Origin => Position3::default(),
            PosePolicy::Max => Position3::from_array(region),
            PosePolicy::Random => Position3::new(
                rng.gen::<f64>() * region[0],
                rng.gen::<f64>() * region[1],
                rng.gen::<f64>() * region[2],
            ),
            PosePolicy::RandomEdge => {
                let along = rng.gen::<f64>();
                let z = rng.gen::<f64>() * region[2];
                match rng.gen_range(0..4) {
                    0 => Position3::new(along * region[0], 0.0, z),
                    1 => Position3::new(along * region[0], region[1], z),
                    2 => Position3::new(0.0, along * region[1], z),
                    _ => Position3::new(region[0], along * region[1], z),
                }
            }
        }
    }
}

fn default_box() -> f64 {
    10.0
}

fn default_test_fraction() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Isotropic Gaussian clusters with uniformly drawn centres.
    Blobs {
        n_samples: usize,
        n_features: usize,
        n_classes: usize,
        cluster_std: f64,
        #[serde(default = "default_box")]
        center_box: f64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    /// Numeric CSV with a header row. Classification targets must be
    /// non-negative integers.
    Csv {
        path: PathBuf,
        target_column: String,
        #[serde(default)]
        regression: bool,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub emb_dim: usize,
    pub fusion_hidden: Vec<usize>,
    pub server_optimizer: OptimizerSpec,
    pub server_batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iters: usize,
    pub relax_kappa: f64,
    /// Minibatches drawn per device when estimating gradient bounds.
    pub grad_samples: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let c = SolveCriteria::default();
        Self {
            tol: c.tol,
            max_iters: c.max_iters,
            relax_kappa: c.relax_kappa,
            grad_samples: 8,
        }
    }
}

impl SolverConfig {
    fn criteria(&self) -> SolveCriteria {
        SolveCriteria {
            tol: self.tol,
            max_iters: self.max_iters,
            relax_kappa: self.relax_kappa,
            ..SolveCriteria::default()
        }
    }
}

fn default_gamma_max() -> f64 {
    importance::DEFAULT_GAMMA_MAX
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub rounds: usize,
    /// Synchronization period `τ_g`.
    pub sync_period: usize,
    /// Informational; `rounds` is authoritative.
    #[serde(default)]
    pub total_iterations: Option<usize>,
    pub t_max: f64,
    pub region_max: [f64; 3],
    pub initial_pose: PosePolicy,
    #[serde(default)]
    pub weights: ObjectiveWeights,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub server_energy: ServerEnergyParams,
    pub devices: Vec<DeviceSpec>,
    #[serde(default = "ArrivalModel::none")]
    pub arrivals: ArrivalModel,
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    pub method: Method,
    pub seed: u64,
    #[serde(default = "default_gamma_max")]
    pub gamma_max: f64,
    #[serde(default)]
    pub importance_scaling: ImportanceScaling,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Fill `wall_ms`; off by default so that metrics files are reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let cfg: SimConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if self.rounds < 1 {
            return bad("rounds must be at least 1");
        }
        if self.sync_period < 1 {
            return bad("sync_period must be at least 1");
        }
        if self.region_max.iter().any(|v| !(*v > 0.0)) {
            return bad("region_max must be positive on every axis");
        }
        if !(self.t_max > 0.0) {
            return bad("t_max must be positive");
        }
        if self.gamma_max < importance::GAMMA_MIN {
            return bad("gamma_max must be at least 1");
        }
        if self.model.emb_dim == 0 || self.model.server_batch == 0 {
            return bad("emb_dim and server_batch must be positive");
        }
        let mut ids = std::collections::BTreeSet::new();
        for d in &self.devices {
            if !ids.insert(d.id) {
                return Err(SimError::Config(format!("duplicate device id {}", d.id)));
            }
            if d.cpu_min_hz > d.cpu_max_hz || !(d.power_cap_w > 0.0) || d.batch_size == 0 {
                return Err(SimError::Config(format!("device {} has invalid hardware limits", d.id)));
            }
        }
        if self.arrivals.rate > 0.0 && self.arrivals.template.is_none() {
            return bad("arrivals with a positive rate need a device template");
        }
        Ok(())
    }
}

/// `n_samples` points in `n_classes` Gaussian clusters; labels are assigned
/// round-robin so classes are balanced.
pub fn make_blobs(
    n_samples: usize,
    n_features: usize,
    n_classes: usize,
    cluster_std: f64,
    center_box: f64,
    seed: u64,
) -> (DMatrix<f64>, Vec<usize>) {
    let mut rng = seeding::rng(seed, Stream::Dataset, 0, 0);
    let centers = DMatrix::from_fn(n_classes, n_features, |_, _| rng.gen_range(-center_box..center_box));
    let labels: Vec<usize> = (0..n_samples).map(|i| i % n_classes.max(1)).collect();
    let x = DMatrix::from_fn(n_samples, n_features, |i, j| {
        let z: f64 = rng.sample(StandardNormal);
        centers[(labels[i], j)] + cluster_std * z
    });
    (x, labels)
}

fn split_rows(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeding::rng(seed, Stream::Dataset, 1, 0));
    let n_test = ((n as f64) * test_fraction.clamp(0.0, 0.9)).round() as usize;
    let mut test = idx.split_off(n - n_test);
    idx.sort_unstable();
    test.sort_unstable();
    (idx, test)
}

pub fn load_dataset(src: &DatasetSource, seed: u64) -> Result<VerticalDataset, SimError> {
    match src {
        DatasetSource::Blobs {
            n_samples,
            n_features,
            n_classes,
            cluster_std,
            center_box,
            test_fraction,
        } => {
            if *n_samples < 2 || *n_features == 0 || *n_classes < 2 {
                return Err(SimError::Config("blobs need ≥ 2 samples, ≥ 1 feature, ≥ 2 classes".into()));
            }
            let (features, labels) = make_blobs(*n_samples, *n_features, *n_classes, *cluster_std, *center_box, seed);
            let (train, test) = split_rows(*n_samples, *test_fraction, seed);
            Ok(VerticalDataset {
                features,
                targets: Targets::Classes {
                    labels,
                    n_classes: *n_classes,
                },
                train,
                test,
            })
        }
        DatasetSource::Csv {
            path,
            target_column,
            regression,
            test_fraction,
        } => {
            let mut rdr = csv::Reader::from_path(path)?;
            let headers = rdr.headers()?.clone();
            let t = headers
                .iter()
                .position(|h| h == target_column)
                .ok_or_else(|| SimError::Config(format!("no column named {target_column}")))?;
            let mut rows: Vec<Vec<f64>> = Vec::new();
            for rec in rdr.records() {
                let rec = rec?;
                let vals = rec
                    .iter()
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| SimError::Config(format!("non-numeric CSV cell: {e}")))?;
                rows.push(vals);
            }
            let n = rows.len();
            let d = headers.len() - 1;
            if n < 2 || d == 0 {
                return Err(SimError::Config("CSV needs at least two rows and one feature".into()));
            }
            let features = DMatrix::from_fn(n, d, |i, j| rows[i][if j < t { j } else { j + 1 }]);
            let targets = if *regression {
                Targets::Values(DMatrix::from_fn(n, 1, |i, _| rows[i][t]))
            } else {
                let labels = rows
                    .iter()
                    .map(|r| {
                        let v = r[t];
                        if v >= 0.0 && v.fract() == 0.0 {
                            Ok(v as usize)
                        } else {
                            Err(SimError::Config(format!("class label {v} is not a non-negative integer")))
                        }
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let n_classes = labels.iter().max().map(|m| m + 1).unwrap_or(0).max(2);
                Targets::Classes { labels, n_classes }
            };
            let (train, test) = split_rows(n, *test_fraction, seed);
            Ok(VerticalDataset {
                features,
                targets,
                train,
                test,
            })
        }
    }
}

/// Devices without explicit features get contiguous, near-equal column slices.
fn assign_default_features(devices: &mut [DeviceSpec], n_features: usize) {
    let n = devices.len().max(1);
    for (k, d) in devices.iter_mut().enumerate() {
        if d.features.is_empty() {
            let lo = k * n_features / n;
            let hi = ((k + 1) * n_features / n).max(lo + 1).min(n_features);
            d.features = (lo..hi).collect();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub loss: f64,
    pub perf: f64,
    pub avg_tau: f64,
    pub avg_alpha: f64,
    pub avg_power_w: f64,
    pub avg_cpu_hz: f64,
    pub server: Position3,
    pub e_tx: f64,
    pub e_p: f64,
    pub e_m: f64,
    pub terms: ObjectiveTerms,
    pub solver_iters: usize,
    pub wall_ms: u64,
    pub gamma: Vec<f64>,
    pub active: Vec<usize>,
    /// Executed iterations and processing energy per active device.
    pub taus: Vec<usize>,
    pub device_energy: Vec<f64>,
    pub exited: Vec<usize>,
    pub entered: Vec<usize>,
}

impl RoundMetrics {
    fn csv_row(&self) -> Vec<String> {
        let f = |v: f64| format!("{v}");
        vec![
            self.round.to_string(),
            f(self.loss),
            f(self.perf),
            f(self.avg_tau),
            f(self.avg_alpha),
            f(self.avg_power_w),
            f(self.avg_cpu_hz),
            f(self.server.x),
            f(self.server.y),
            f(self.server.z),
            f(self.e_tx),
            f(self.e_p),
            f(self.e_m),
            f(self.terms.a),
            f(self.terms.b),
            f(self.terms.c),
            f(self.terms.d),
            self.solver_iters.to_string(),
            self.wall_ms.to_string(),
        ]
    }
}

/// One executed round: what was decided and what it cost.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecisionRecord {
    pub round: usize,
    pub decision: RoundDecision,
    pub executed_tau: Vec<usize>,
    pub uploaded: Vec<bool>,
    pub conn_count: Vec<f64>,
    pub capacitance: Vec<f64>,
    pub batch_size: Vec<f64>,
    pub flops_per_cycle: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub initial_loss: f64,
    pub initial_perf: f64,
    pub metrics: Vec<RoundMetrics>,
    pub decisions: Vec<DecisionRecord>,
}

impl RunResult {
    pub fn final_perf(&self) -> f64 {
        self.metrics.last().map(|m| m.perf).unwrap_or(self.initial_perf)
    }

    pub fn first_exit_round(&self) -> Option<usize> {
        self.metrics.iter().position(|m| !m.exited.is_empty())
    }

    /// Performance change into round `r` (positive means a drop).
    pub fn perf_drop_at(&self, r: usize) -> f64 {
        let before = if r == 0 {
            self.initial_perf
        } else {
            self.metrics[r - 1].perf
        };
        before - self.metrics[r].perf
    }

    pub fn total_processing_energy(&self) -> f64 {
        self.metrics.iter().map(|m| m.e_p).sum()
    }

    pub fn metrics_csv(&self) -> Result<String, SimError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(METRICS_HEADER)?;
        for m in &self.metrics {
            w.write_record(m.csv_row())?;
        }
        let bytes = w.into_inner().map_err(|e| SimError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Snapshot of the active devices for the optimizer, including theory estimates.
fn round_snapshot(
    cfg: &SimConfig,
    net: &NetworkState,
    state: &TrainingState,
    active: &[usize],
    gamma: &[f64],
    channel: &ChannelParams,
    round: usize,
) -> Result<RoundSnapshot, SimError> {
    let mut devices = Vec::with_capacity(active.len());
    let mut l_max: f64 = 0.0;
    for (k, &id) in active.iter().enumerate() {
        let spec = net.device(id);
        let smoothness = theory::block_smoothness(state, Block::Device(id))?;
        l_max = l_max.max(smoothness);
        let seed = seeding::derive(cfg.seed, Stream::GradStats, round as u64, id as u64);
        let stats = theory::estimate_grad_stats(state, Block::Device(id), cfg.solver.grad_samples, seed)?;
        devices.push(DeviceRound {
            id,
            position: spec.position,
            model_bits: spec.model_bits,
            conn_count: spec.conn_count,
            flops_per_cycle: spec.flops_per_cycle,
            capacitance: spec.capacitance,
            batch_size: spec.batch_size as f64,
            cpu_min: spec.cpu_min_hz,
            cpu_max: spec.cpu_max_hz,
            power_cap: spec.power_cap_w,
            gamma: gamma[k],
            survival: network_dynamics::survival(&spec.failure),
            optimizer: spec.optimizer,
            smoothness,
            q_max: stats.q_max,
            sigma: stats.sigma,
        });
    }
    Ok(RoundSnapshot {
        devices,
        tau_g: cfg.sync_period as f64,
        t_max: cfg.t_max,
        global_smoothness: l_max * net.historical.len().max(1) as f64,
        initial_loss: state.initial_loss,
        rounds: cfg.rounds,
        channel: *channel,
        server: cfg.server_energy,
        region_max: cfg.region_max,
        prev_pose: net.server_pose,
    })
}

/// Heuristic decision with every device active and a stationary server.
fn fixed_decision(snap: &RoundSnapshot, greedy: bool) -> RoundDecision {
    let devices = snap
        .devices
        .iter()
        .map(|d| DeviceDecision {
            id: d.id,
            tx_power: if greedy { d.power_cap } else { d.power_cap / 2.0 },
            cpu_freq: if greedy { d.cpu_max } else { (d.cpu_min + d.cpu_max) / 2.0 },
            tau: if greedy { snap.tau_g } else { snap.tau_g / 2.0 },
            active: true,
        })
        .collect();
    RoundDecision {
        devices,
        server_pose: snap.prev_pose,
        altitude_power: 0.0,
        point: None,
        objective: f64::NAN,
        relaxed_trace: Vec::new(),
        trace: Vec::new(),
        solver_iters: 0,
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Runs one simulation end to end.
pub fn run(cfg: &SimConfig) -> Result<RunResult, SimError> {
    cfg.validate()?;
    let data = load_dataset(&cfg.dataset, cfg.seed)?;
    let mut devices = cfg.devices.clone();
    assign_default_features(&mut devices, data.n_features());
    for d in &devices {
        if d.features.iter().any(|&c| c >= data.n_features()) {
            return Err(SimError::Config(format!("device {} references a missing feature column", d.id)));
        }
    }
    let mut arrivals = cfg.arrivals.clone();
    if arrivals.n_features == 0 {
        arrivals.n_features = data.n_features();
    }
    let channel = ChannelParams::from_config(&cfg.channel);
    let pose0 = cfg.initial_pose.pose(cfg.region_max, cfg.seed);
    let mut net = NetworkState::new(devices.clone(), pose0, arrivals);
    let mut state = TrainingState::new(
        data,
        &devices,
        cfg.model.emb_dim,
        cfg.model.fusion_hidden.clone(),
        cfg.model.server_optimizer,
        cfg.model.server_batch,
        cfg.seed,
    )?;
    let criteria = cfg.solver.criteria();
    let initial_loss = state.initial_loss;
    let initial_perf = state.performance()?;
    let mut metrics = Vec::with_capacity(cfg.rounds);
    let mut decisions = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds {
        let t0 = Instant::now();
        let active: Vec<usize> = net.active.iter().copied().collect();

        let losses = importance::exclusion_losses(&state, &active)?;
        let gamma = importance::scale_importance(&losses, cfg.gamma_max, cfg.importance_scaling);
        let snap = round_snapshot(cfg, &net, &state, &active, &gamma, &channel, round)?;

        let decision = if cfg.method.optimizes() {
            scdn_problem::solve_round(&snap, &cfg.weights, None, &criteria)
                .map_err(|source| SimError::Solver { round, source })?
        } else {
            fixed_decision(&snap, cfg.method == Method::MaxVfl)
        };

        // execution: rounded iterations over links that meet the deadline
        let mut plan = RoundPlan {
            devices: BTreeMap::new(),
            server_tau: cfg.sync_period,
        };
        let mut executed_tau = Vec::with_capacity(active.len());
        let mut uploaded = Vec::with_capacity(active.len());
        let mut e_tx = 0.0;
        let mut device_energy = Vec::with_capacity(active.len());
        for (d, dd) in snap.devices.iter().zip(&decision.devices) {
            let tau = if dd.active { vfl_engine::round_tau(dd.tau) } else { 0 };
            let mut ok = false;
            if dd.active {
                if let Ok(link) = geometry_channel::link_state(
                    &channel,
                    &decision.server_pose,
                    &d.position,
                    dd.tx_power,
                    d.model_bits,
                    cfg.t_max,
                ) {
                    ok = !link.failed;
                    if link.rate > 0.0 {
                        e_tx += d.model_bits * dd.tx_power / link.rate;
                    }
                }
            }
            plan.devices.insert(d.id, DevicePlan { tau, upload: ok });
            let e_p = scdn_problem::processing_energy(d, tau as f64, dd.cpu_freq);
            executed_tau.push(tau);
            uploaded.push(ok);
            device_energy.push(e_p);
        }
        state.train_round(&plan, round)?;
        let e_p: f64 = device_energy.iter().sum();
        let e_m = scdn_problem::movement_energy(
            &cfg.server_energy,
            &snap.prev_pose,
            &decision.server_pose,
            decision.altitude_power,
        );
        let terms = scdn_problem::objective_terms(&decision, &snap, &cfg.weights);

        // population update, then metrics on the post-update model
        let pop_seed = seeding::derive(cfg.seed, Stream::Population, round as u64, 0);
        let (mut next, events) = network_dynamics::step_population(&net, pop_seed);
        next.server_pose = decision.server_pose;
        for &id in &events.exited {
            if cfg.method.zero_out_exits() {
                state.remove_device(id)?;
            } else {
                state.on_exit(id)?;
            }
        }
        for &id in &events.entered {
            state.on_entry(next.device(id))?;
        }
        net = next;
        let loss = state.global_loss()?;
        let perf = state.performance()?;

        let n_act = decision.devices.len();
        metrics.push(RoundMetrics {
            round,
            loss,
            perf,
            avg_tau: mean(executed_tau.iter().map(|&t| t as f64)),
            avg_alpha: mean(decision.devices.iter().map(|d| if d.active { 1.0 } else { 0.0 })),
            avg_power_w: mean(decision.devices.iter().map(|d| d.tx_power)),
            avg_cpu_hz: mean(decision.devices.iter().map(|d| d.cpu_freq)),
            server: decision.server_pose,
            e_tx,
            e_p,
            e_m,
            terms,
            solver_iters: decision.solver_iters,
            wall_ms: if cfg.record_wall_time {
                t0.elapsed().as_millis() as u64
            } else {
                0
            },
            gamma,
            active: active.clone(),
            taus: executed_tau.clone(),
            device_energy,
            exited: events.exited,
            entered: events.entered,
        });
        debug_assert_eq!(n_act, active.len());
        decisions.push(DecisionRecord {
            round,
            decision,
            executed_tau,
            uploaded,
            conn_count: snap.devices.iter().map(|d| d.conn_count).collect(),
            capacitance: snap.devices.iter().map(|d| d.capacitance).collect(),
            batch_size: snap.devices.iter().map(|d| d.batch_size).collect(),
            flops_per_cycle: snap.devices.iter().map(|d| d.flops_per_cycle).collect(),
        });
    }
    Ok(RunResult {
        method: cfg.method,
        seed: cfg.seed,
        initial_loss,
        initial_perf,
        metrics,
        decisions,
    })
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    config: &'a SimConfig,
    seed: u64,
    code_version: &'static str,
    final_decision: Option<&'a RoundDecision>,
}

/// Writes `metrics.csv` and `manifest.json` into `out`.
pub fn write_run(cfg: &SimConfig, result: &RunResult, out: &Path) -> Result<(), SimError> {
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.csv"), result.metrics_csv()?)?;
    let manifest = Manifest {
        config: cfg,
        seed: result.seed,
        code_version: env!("CARGO_PKG_VERSION"),
        final_decision: result.decisions.last().map(|d| &d.decision),
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Replaces the value at a dotted path (`weights.psi_s`, `devices.0.power_cap_w`).
pub fn set_path(cfg: &SimConfig, path: &str, value: serde_json::Value) -> Result<SimConfig, SimError> {
    let mut root = serde_json::to_value(cfg)?;
    let mut node = &mut root;
    for key in path.split('.') {
        node = match node {
            serde_json::Value::Object(map) => map.get_mut(key),
            serde_json::Value::Array(items) => key.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| SimError::Config(format!("unknown parameter path {path}")))?;
    }
    *node = value;
    let out: SimConfig = serde_json::from_value(root)?;
    out.validate()?;
    Ok(out)
}

/// Parses a sweep value: JSON when it parses, otherwise a plain string.
pub fn parse_value(s: &str) -> serde_json::Value {
    serde_json::from_str(s).unwrap_or_else(|_| serde_json::Value::String(s.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub final_perf: f64,
    pub final_loss: f64,
    /// Devices with `α = 1` in the last round.
    pub active_devices: usize,
    pub mean_active_devices: f64,
    pub mean_tau: f64,
    pub server_xy_displacement: f64,
    pub final_server_z: f64,
    pub total_e_tx: f64,
    pub total_e_p: f64,
    pub total_e_m: f64,
}

fn sweep_row(value: String, cfg: &SimConfig, r: &RunResult) -> SweepRow {
    let start = cfg.initial_pose.pose(cfg.region_max, cfg.seed);
    let last = r.metrics.last();
    let count = |d: &DecisionRecord| d.decision.devices.iter().filter(|x| x.active).count();
    let end = last.map(|m| m.server).unwrap_or(start);
    SweepRow {
        value,
        final_perf: r.final_perf(),
        final_loss: last.map(|m| m.loss).unwrap_or(r.initial_loss),
        active_devices: r.decisions.last().map(count).unwrap_or(0),
        mean_active_devices: mean(r.decisions.iter().map(|d| count(d) as f64)),
        mean_tau: mean(r.metrics.iter().map(|m| m.avg_tau)),
        server_xy_displacement: ((end.x - start.x).powi(2) + (end.y - start.y).powi(2)).sqrt(),
        final_server_z: end.z,
        total_e_tx: r.metrics.iter().map(|m| m.e_tx).sum(),
        total_e_p: r.metrics.iter().map(|m| m.e_p).sum(),
        total_e_m: r.metrics.iter().map(|m| m.e_m).sum(),
    }
}

/// Independent runs over `values` of one parameter, in parallel.
pub fn sweep(cfg: &SimConfig, path: &str, values: &[String]) -> Result<Vec<SweepRow>, SimError> {
    let configs = values
        .iter()
        .map(|v| set_path(cfg, path, parse_value(v)))
        .collect::<Result<Vec<_>, _>>()?;
    configs
        .par_iter()
        .zip(values.par_iter())
        .map(|(c, v)| run(c).map(|r| sweep_row(v.clone(), c, &r)))
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String, SimError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "value",
            "final_perf",
            "final_loss",
            "active_devices",
            "mean_active_devices",
            "mean_tau",
            "server_xy_displacement",
            "final_server_z",
            "total_e_tx",
            "total_e_p",
            "total_e_m",
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| SimError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stats {
    pub avg: f64,
    pub min: f64,
    pub max: f64,
    pub std: f64,
}

impl Stats {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self {
                avg: 0.0,
                min: 0.0,
                max: 0.0,
                std: 0.0,
            };
        }
        let avg = mean(xs.iter().copied());
        let var = mean(xs.iter().map(|x| (x - avg).powi(2)));
        Self {
            avg,
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub label: String,
    pub method: Method,
    pub final_perf: f64,
    /// Per device and round processing energy.
    pub energy: Stats,
    /// Executed local iterations per device and round.
    pub iters: Stats,
}

pub fn compare_row(label: String, r: &RunResult) -> CompareRow {
    let energy: Vec<f64> = r.metrics.iter().flat_map(|m| m.device_energy.iter().copied()).collect();
    let iters: Vec<f64> = r.metrics.iter().flat_map(|m| m.taus.iter().map(|&t| t as f64)).collect();
    CompareRow {
        label,
        method: r.method,
        final_perf: r.final_perf(),
        energy: Stats::of(&energy),
        iters: Stats::of(&iters),
    }
}

/// Side-by-side summary of several configurations, run in parallel.
pub fn compare(configs: &[(String, SimConfig)]) -> Result<Vec<CompareRow>, SimError> {
    configs
        .par_iter()
        .map(|(label, c)| run(c).map(|r| compare_row(label.clone(), &r)))
        .collect()
}

pub fn compare_csv(rows: &[CompareRow]) -> Result<String, SimError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "config",
        "method",
        "final_perf",
        "avg_energy",
        "min_energy",
        "max_energy",
        "std_energy",
        "avg_iters",
        "min_iters",
        "max_iters",
        "std_iters",
    ])?;
    for r in rows {
        let f = |v: f64| format!("{v}");
        w.write_record([
            r.label.clone(),
            r.method.name().to_string(),
            f(r.final_perf),
            f(r.energy.avg),
            f(r.energy.min),
            f(r.energy.max),
            f(r.energy.std),
            f(r.iters.avg),
            f(r.iters.min),
            f(r.iters.max),
            f(r.iters.std),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| SimError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Ready-made configuration: vertically partitioned blobs over `n_devices`
/// ground devices with Poisson arrivals. Device 0 holds half of the feature
/// columns and tends to leave around round 14; the others hold two columns
/// each and rarely leave.
pub fn blobs_preset(n_devices: usize, method: Method, seed: u64) -> SimConfig {
    let n_devices = n_devices.max(1);
    let n_features = 6 + 2 * (n_devices - 1);
    let template = DeviceSpec {
        id: 0,
        position: Position3::default(),
        features: Vec::new(),
        hidden: vec![8],
        batch_size: 32,
        model_bits: 1000.0,
        conn_count: 1e4,
        flops_per_cycle: 4.0,
        capacitance: 1e-28,
        cpu_min_hz: 1e8,
        cpu_max_hz: 2e9,
        power_cap_w: 0.01,
        optimizer: OptimizerSpec::standard(0.05),
        failure: network_dynamics::FailureModel {
            shape: 3.0,
            scale: 500.0,
            entry_round: 0,
            fixed_bias: None,
        },
    };
    let spots = [
        (400.0, 420.0),
        (610.0, 380.0),
        (380.0, 640.0),
        (590.0, 600.0),
        (500.0, 300.0),
        (300.0, 500.0),
        (700.0, 500.0),
        (500.0, 700.0),
    ];
    let devices = (0..n_devices)
        .map(|i| {
            let (x, y) = spots[i % spots.len()];
            let mut d = DeviceSpec {
                id: i,
                position: Position3::new(x, y, 0.0),
                features: (4 + 2 * i..6 + 2 * i).collect(),
                ..template.clone()
            };
            if i == 0 {
                d.features = (0..6).collect();
                d.failure.shape = 6.0;
                d.failure.scale = 14.0;
            }
            d
        })
        .collect();
    SimConfig {
        rounds: 30,
        sync_period: 5,
        total_iterations: Some(150),
        t_max: 5e-4,
        region_max: [1000.0, 1000.0, 10.0],
        initial_pose: PosePolicy::Center,
        weights: ObjectiveWeights::default(),
        channel: ChannelConfig::default(),
        server_energy: ServerEnergyParams::default(),
        devices,
        arrivals: ArrivalModel {
            rate: 0.1,
            region_lo: [300.0, 300.0, 0.0],
            region_hi: [700.0, 700.0, 0.0],
            template: Some(template),
            n_features,
            slice_width: 4,
            overlap: true,
            shape_choices: vec![1.0, 2.0],
            scale: 60.0,
        },
        dataset: DatasetSource::Blobs {
            n_samples: 600,
            n_features,
            n_classes: 6,
            cluster_std: 4.0,
            center_box: 5.0,
            test_fraction: 0.25,
        },
        model: ModelConfig {
            emb_dim: 4,
            fusion_hidden: vec![16],
            server_optimizer: OptimizerSpec::standard(0.05),
            server_batch: 64,
        },
        method,
        seed,
        gamma_max: importance::DEFAULT_GAMMA_MAX,
        importance_scaling: ImportanceScaling::Value,
        solver: SolverConfig::default(),
        record_wall_time: false,
    }
}
