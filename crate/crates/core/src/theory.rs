//! Convergence-bound quantities: smoothness estimates, the per-device
//! stationarity bound and its ingredients, cumulative-gap constants, and
//! optimizer admissibility conditions.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::seeding::{self, Stream};
use crate::vfl_engine::{Block, DenseNet, Layer, OptimizerSpec, OptimizerVariant, TrainingState, VflError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("convergence bracket {0:e} is not positive")]
    NonPositiveDenominator(f64),
    #[error(transparent)]
    Vfl(#[from] VflError),
}

/// Multiplier applied to empirical gradient bounds.
pub const SAFETY_FACTOR: f64 = 1.5;
/// Brackets at or below this are treated as violating the convergence condition.
pub const DENOM_TOL: f64 = 1e-12;

const POWER_ITERS: usize = 50;
const POWER_RTOL: f64 = 1e-8;

/// Largest singular value by power iteration on `WᵀW` from a seeded start.
pub fn spectral_norm(w: &DMatrix<f64>, seed: u64) -> f64 {
    if w.is_empty() || w.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    let mut rng = seeding::rng(seed, Stream::Smoothness, w.nrows() as u64, w.ncols() as u64);
    let mut v = DVector::from_fn(w.ncols(), |_, _| rng.gen_range(0.5..1.5));
    v /= v.norm();
    let mut sigma = 0.0;
    for _ in 0..POWER_ITERS {
        let u = w * &v;
        let next = w.transpose() * &u;
        let n = next.norm();
        if n == 0.0 {
            return 0.0;
        }
        v = next / n;
        let s = (w * &v).norm();
        let done = sigma > 0.0 && ((s - sigma) / s).abs() < POWER_RTOL;
        sigma = s;
        if done {
            break;
        }
    }
    sigma
}

/// `(Π ‖W‖₂)²` with a unit loss constant.
pub fn smoothness_of_layers<'a, I>(layers: I) -> f64
where
    I: IntoIterator<Item = &'a Layer>,
{
    let prod: f64 = layers.into_iter().map(|l| spectral_norm(&l.w, 0)).product();
    prod * prod
}

pub fn estimate_smoothness(net: &DenseNet) -> f64 {
    smoothness_of_layers(&net.layers)
}

/// Smoothness of the loss w.r.t. one block. Device blocks reach the loss
/// through the fusion net, so both nets' layers enter the product.
pub fn block_smoothness(state: &TrainingState, block: Block) -> Result<f64, TheoryError> {
    match block {
        Block::Server => Ok(estimate_smoothness(&state.fusion)),
        Block::Device(id) => {
            let m = state.models.get(&id).ok_or(VflError::UnknownDevice(id))?;
            Ok(smoothness_of_layers(m.net.layers.iter().chain(&state.fusion.layers)))
        }
    }
}

pub fn effective_tau(tau: f64, survival: f64) -> f64 {
    tau * survival
}

/// Per-device constants entering the stationarity bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceTheory {
    pub smoothness: f64,
    pub q_max: f64,
    pub sigma: f64,
    pub eta: f64,
    pub w_mean: f64,
    pub w_max: f64,
    pub tau_eff: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalTheory {
    pub smoothness: f64,
    pub initial_loss: f64,
    pub rounds: usize,
    pub n_active: usize,
}

fn bracket(d: &DeviceTheory) -> f64 {
    d.tau_eff * d.eta * (d.w_mean - 0.5 * d.w_max)
}

pub fn upsilon(d: &DeviceTheory) -> Result<f64, TheoryError> {
    let b = bracket(d);
    if b <= DENOM_TOL {
        return Err(TheoryError::NonPositiveDenominator(b));
    }
    Ok(1.0 / b)
}

/// `υ` with the `ε_G` shift that keeps it finite as `τ_eff → 0`.
pub fn upsilon_shifted(d: &DeviceTheory, eps_g: f64) -> f64 {
    1.0 / (bracket(d) + eps_g)
}

pub fn big_upsilon(d: &DeviceTheory, global_smoothness: f64) -> f64 {
    let ew = d.eta * d.w_max;
    (d.tau_eff * d.smoothness).powi(2) * ew.powi(3) + global_smoothness * (d.tau_eff * ew).powi(2)
}

/// `F0/(R N) + 2(Q² + σ²) Υ`.
fn bound_bracket(d: &DeviceTheory, g: &GlobalTheory) -> f64 {
    g.initial_loss / (g.rounds as f64 * g.n_active.max(1) as f64)
        + 2.0 * (d.q_max.powi(2) + d.sigma.powi(2)) * big_upsilon(d, g.smoothness)
}

pub fn xi_bound(d: &DeviceTheory, g: &GlobalTheory, gamma: f64, eps_g: f64) -> f64 {
    gamma * upsilon_shifted(d, eps_g) * bound_bracket(d, g)
}

/// One summand of the right-hand side of the stationarity bound (no shift, no weight).
pub fn stationarity_term(d: &DeviceTheory, g: &GlobalTheory) -> Result<f64, TheoryError> {
    Ok(upsilon(d)? * bound_bracket(d, g))
}

/// Bound on `E‖g(θ_q) − g(θ_0)‖²` within one round.
pub fn gradient_drift_bound(tau: f64, q_max: f64, sigma: f64, eta: f64, smoothness: f64, w_max: f64) -> f64 {
    4.0 * tau * (q_max * q_max + sigma * sigma) * (eta * smoothness * w_max).powi(2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapInputs {
    pub tau_g: f64,
    pub tau_max: f64,
    pub smoothness_max: f64,
    pub eta_max: f64,
    pub w_max: f64,
    pub q_max: f64,
    pub sigma: f64,
}

/// `(C1, C2, C3)` of the cumulative ideal-vs-real gap bound.
pub fn gap_constants(p: &GapInputs) -> (f64, f64, f64) {
    let noise = p.q_max.powi(2) + p.sigma.powi(2);
    let c1 = 64.0 * p.tau_g * (p.tau_max * p.smoothness_max).powi(2) * (p.eta_max * p.w_max).powi(4) * noise;
    let c2 = 32.0 * (p.tau_max * p.smoothness_max * p.eta_max * p.w_max).powi(2);
    let c3 = 8.0 * ((p.tau_g - p.tau_max) * p.eta_max * p.w_max).powi(2) * noise;
    (c1, c2, c3)
}

/// Lower branch `W₋₁(x)` for `x ∈ [−1/e, 0)`, by bisection on `w e^w = x`, `w ≤ −1`.
pub fn lambert_w_minus1(x: f64) -> f64 {
    let f = |w: f64| w * w.exp() - x;
    // f is decreasing on (−∞, −1]; f(−1) ≤ 0 and f → −x > 0 as w → −∞.
    let mut lo = -1.0;
    while f(lo) < 0.0 {
        lo *= 2.0;
    }
    let mut hi = -1.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Largest admissible momentum coefficient, `exp(W₋₁(−1/(2√e)) + ½)`.
pub fn momentum_rho_threshold() -> f64 {
    let x = -1.0 / (2.0 * 0.5f64.exp());
    (lambert_w_minus1(x) + 0.5).exp()
}

/// `τ(1−ρ)²(w̄ − ½ w_max)` for momentum with the asymptotic `w_max`.
pub fn h_tau(rho: f64, tau: u32) -> f64 {
    let t = tau as f64;
    rho.powi(tau as i32 + 1) + t / 2.0 - rho - t * rho / 2.0
}

/// Mean and max of the unrolled scale coefficients over a round of `tau` steps.
/// Momentum uses `1/(1−ρ)` as its max, the large-τ limit.
pub fn scale_stats(spec: &OptimizerSpec, tau: f64) -> (f64, f64) {
    match spec.variant {
        OptimizerVariant::Standard => (1.0, 1.0),
        OptimizerVariant::Momentum => {
            let r = spec.rho;
            if tau <= 0.0 {
                return (1.0, 1.0 / (1.0 - r));
            }
            let mean = 1.0 / (1.0 - r) + (r.powf(tau + 1.0) - r) / (tau * (1.0 - r).powi(2));
            (mean, 1.0 / (1.0 - r))
        }
        OptimizerVariant::Proximal => {
            let a = spec.learning_rate * spec.mu;
            if tau <= 0.0 || a == 0.0 {
                return (1.0, 1.0);
            }
            ((1.0 - (1.0 - a).powf(tau)) / (a * tau), 1.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConditionReport {
    /// `None` when the condition does not apply to the variant.
    pub momentum_ok: Option<bool>,
    pub proximal_ok: Option<bool>,
}

impl ConditionReport {
    pub fn passed(&self) -> bool {
        self.momentum_ok.unwrap_or(true) && self.proximal_ok.unwrap_or(true)
    }
}

pub fn check_conditions(spec: &OptimizerSpec, tau: f64) -> ConditionReport {
    match spec.variant {
        OptimizerVariant::Standard => ConditionReport {
            momentum_ok: None,
            proximal_ok: None,
        },
        OptimizerVariant::Momentum => ConditionReport {
            momentum_ok: Some(spec.rho > 0.0 && spec.rho < momentum_rho_threshold()),
            proximal_ok: None,
        },
        OptimizerVariant::Proximal => ConditionReport {
            momentum_ok: None,
            proximal_ok: Some(
                spec.learning_rate > 0.0 && spec.learning_rate < 1.0 / (2.0 * tau * spec.mu),
            ),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradStats {
    pub q_max: f64,
    pub sigma: f64,
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Empirical gradient bound and minibatch noise level for a block at its
/// current parameters, both inflated by [`SAFETY_FACTOR`].
pub fn estimate_grad_stats(
    state: &TrainingState,
    block: Block,
    n_samples: usize,
    seed: u64,
) -> Result<GradStats, TheoryError> {
    let full = state.partial_grad(block, &state.data.train)?;
    let batch = match block {
        Block::Server => state.server_batch,
        Block::Device(id) => state.models.get(&id).ok_or(VflError::UnknownDevice(id))?.batch_size,
    };
    let tag = match block {
        Block::Server => u64::MAX,
        Block::Device(id) => id as u64,
    };
    let mut rng = seeding::rng(seed, Stream::GradStats, tag, 0);
    let mut q = norm_sq(&full).sqrt();
    let mut dev = 0.0;
    for _ in 0..n_samples {
        let rows = state.sample_batch(batch, &mut rng);
        let g = state.partial_grad(block, &rows)?;
        q = q.max(norm_sq(&g).sqrt());
        dev += g.iter().zip(&full).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    let sigma = if n_samples > 0 {
        (dev / n_samples as f64).sqrt()
    } else {
        0.0
    };
    Ok(GradStats {
        q_max: SAFETY_FACTOR * q,
        sigma: SAFETY_FACTOR * sigma,
    })
}
