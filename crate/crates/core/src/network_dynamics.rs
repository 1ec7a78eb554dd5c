//! Device population churn: Weibull-biased Bernoulli exits and Poisson arrivals.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry_channel::Position3;
use crate::vfl_engine::OptimizerSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("weibull density undefined for r = {0} < 0")]
    Domain(f64),
}

/// Upper clamp on the per-round exit probability derived from the hazard.
pub const MAX_EXIT_BIAS: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureModel {
    pub shape: f64,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub entry_round: usize,
    /// Bypasses the hazard and uses this exit probability verbatim.
    #[serde(default)]
    pub fixed_bias: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl FailureModel {
    pub fn new(shape: f64) -> Self {
        Self {
            shape,
            scale: 1.0,
            entry_round: 0,
            fixed_bias: None,
        }
    }

    pub fn with_bias(bias: f64) -> Self {
        Self {
            fixed_bias: Some(bias),
            ..Self::new(1.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub id: usize,
    pub position: Position3,
    #[serde(default)]
    pub features: Vec<usize>,
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    /// Size of the uploaded payload in bits.
    pub model_bits: f64,
    /// Total connections of the local model.
    pub conn_count: f64,
    /// Floating point operations per CPU cycle.
    pub flops_per_cycle: f64,
    /// Effective switched capacitance.
    pub capacitance: f64,
    pub cpu_min_hz: f64,
    pub cpu_max_hz: f64,
    pub power_cap_w: f64,
    pub optimizer: OptimizerSpec,
    pub failure: FailureModel,
}

/// Poisson arrivals placed uniformly in an axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrivalModel {
    pub rate: f64,
    pub region_lo: [f64; 3],
    pub region_hi: [f64; 3],
    /// Hardware and model template for newcomers; id, position, features and
    /// failure model are overwritten.
    pub template: Option<DeviceSpec>,
    pub n_features: usize,
    pub slice_width: usize,
    pub overlap: bool,
    /// Weibull shapes drawn uniformly for newcomers.
    pub shape_choices: Vec<f64>,
    #[serde(default = "one")]
    pub scale: f64,
}

impl ArrivalModel {
    pub fn none() -> Self {
        Self {
            rate: 0.0,
            region_lo: [0.0; 3],
            region_hi: [0.0; 3],
            template: None,
            n_features: 0,
            slice_width: 0,
            overlap: true,
            shape_choices: vec![1.0],
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub round: usize,
    pub active: BTreeSet<usize>,
    pub historical: BTreeSet<usize>,
    pub devices: BTreeMap<usize, DeviceSpec>,
    pub server_pose: Position3,
    pub arrivals: ArrivalModel,
    pub next_id: usize,
}

/// Outcome of one population step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PopulationEvents {
    pub exited: Vec<usize>,
    pub entered: Vec<usize>,
}

impl NetworkState {
    pub fn new(devices: Vec<DeviceSpec>, server_pose: Position3, arrivals: ArrivalModel) -> Self {
        let next_id = devices.iter().map(|d| d.id + 1).max().unwrap_or(0);
        let ids: BTreeSet<usize> = devices.iter().map(|d| d.id).collect();
        Self {
            round: 0,
            active: ids.clone(),
            historical: ids,
            devices: devices.into_iter().map(|d| (d.id, d)).collect(),
            server_pose,
            arrivals,
            next_id,
        }
    }

    pub fn device(&self, id: usize) -> &DeviceSpec {
        &self.devices[&id]
    }

    /// Rounds since the device first appeared in the active set.
    pub fn age(&self, id: usize) -> usize {
        self.round.saturating_sub(self.devices[&id].failure.entry_round)
    }
}

pub fn weibull_pdf(r: f64, k: f64, lambda: f64) -> Result<f64, DynamicsError> {
    if r < 0.0 {
        return Err(DynamicsError::Domain(r));
    }
    let x = r / lambda;
    Ok(k / lambda * x.powf(k - 1.0) * (-x.powf(k)).exp())
}

pub fn weibull_cdf(r: f64, k: f64, lambda: f64) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    1.0 - (-(r / lambda).powf(k)).exp()
}

/// Per-round exit probability at the given age: the discrete hazard
/// `(F(a+1) - F(a)) / (1 - F(a))`, clamped to `[0, MAX_EXIT_BIAS]`.
pub fn failure_bias(model: &FailureModel, age: usize) -> f64 {
    if let Some(b) = model.fixed_bias {
        return b.clamp(0.0, 1.0);
    }
    let a = age as f64 / model.scale;
    let b = (age + 1) as f64 / model.scale;
    // 1 - S(a+1)/S(a) with S = exp(-x^k), computed without cancellation.
    let h = -(a.powf(model.shape) - b.powf(model.shape)).exp_m1();
    h.clamp(0.0, MAX_EXIT_BIAS)
}

/// Survival factor `exp(-(r_A)^k)` keyed on the entry round.
pub fn survival(model: &FailureModel) -> f64 {
    if model.entry_round == 0 {
        return 1.0;
    }
    (-(model.entry_round as f64).powf(model.shape)).exp()
}

/// Advance the population by one round. Pure in `(state, seed)`.
pub fn step_population(state: &NetworkState, seed: u64) -> (NetworkState, PopulationEvents) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next = state.clone();
    let mut events = PopulationEvents::default();

    for &id in &state.active {
        let bias = failure_bias(&state.devices[&id].failure, state.age(id));
        let u: f64 = rng.gen();
        if u < bias {
            events.exited.push(id);
        }
    }
    for id in &events.exited {
        next.active.remove(id);
    }

    let arrivals = &state.arrivals;
    let count = if arrivals.rate > 0.0 {
        Poisson::new(arrivals.rate)
            .map(|p| p.sample(&mut rng) as usize)
            .unwrap_or(0)
    } else {
        0
    };
    if let Some(template) = &arrivals.template {
        for _ in 0..count {
            let id = next.next_id;
            next.next_id += 1;
            let mut pos = [0.0; 3];
            for (j, p) in pos.iter_mut().enumerate() {
                let (lo, hi) = (arrivals.region_lo[j], arrivals.region_hi[j]);
                *p = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            }
            let shape = arrivals.shape_choices[rng.gen_range(0..arrivals.shape_choices.len())];
            let features = assign_features(&next, arrivals, &mut rng);
            let spec = DeviceSpec {
                id,
                position: Position3::from_array(pos),
                features,
                failure: FailureModel {
                    shape,
                    scale: arrivals.scale,
                    entry_round: state.round + 1,
                    fixed_bias: template.failure.fixed_bias,
                },
                ..template.clone()
            };
            next.devices.insert(id, spec);
            next.active.insert(id);
            next.historical.insert(id);
            events.entered.push(id);
        }
    }
    next.round += 1;
    (next, events)
}

fn assign_features(state: &NetworkState, arrivals: &ArrivalModel, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let d = arrivals.n_features;
    let w = arrivals.slice_width.clamp(1, d.max(1));
    if d == 0 {
        return Vec::new();
    }
    if !arrivals.overlap {
        let seen: BTreeSet<usize> = state
            .historical
            .iter()
            .flat_map(|id| state.devices[id].features.iter().copied())
            .collect();
        let unseen: Vec<usize> = (0..d).filter(|c| !seen.contains(c)).collect();
        if !unseen.is_empty() {
            let take = w.min(unseen.len());
            let start = rng.gen_range(0..=unseen.len() - take);
            return unseen[start..start + take].to_vec();
        }
    }
    let start = rng.gen_range(0..=d - w);
    (start..start + w).collect()
}
