//! Per-round resource/training problem in geometric-programming form, solved
//! by successive inner approximation.
//!
//! Every non-GP expression is bounded by an auxiliary variable, posynomial
//! denominators are condensed at the previous iterate, and the resulting GP is
//! re-solved until the objective settles. Binary activations are handled by a
//! relaxed solve, rounding, a fixed-activation solve, and repair.

use std::f64::consts::{LN_2, PI};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry_channel::{self, ChannelParams, PathClass, Position3};
use crate::gp_core::{self, condense, ExpTerm, GpError, GpProblem, Monomial, Posynomial, SolverSettings, VarId};
use crate::theory::{self, DeviceTheory, GlobalTheory};
use crate::vfl_engine::OptimizerSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScdnError {
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error("anchor value for {0} is not strictly positive")]
    InfeasibleAnchor(String),
    #[error("no activation pattern admits a feasible solution")]
    NoFeasibleActivation,
    #[error("enumeration supports at most {max} devices, got {got}")]
    TooManyDevices { max: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveWeights {
    pub psi_g: f64,
    pub psi_r: f64,
    pub psi_p: f64,
    pub psi_s: f64,
    /// Penalty on auxiliary variables.
    pub psi_hat: f64,
    pub eps_g: f64,
    pub eps_m: f64,
    pub eps_pr: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            psi_g: 1e-3,
            psi_r: 1e3,
            psi_p: 1e-9,
            psi_s: 1e-4,
            psi_hat: 1e-4,
            eps_g: 1e-6,
            eps_m: 1e-6,
            eps_pr: 1e-6,
        }
    }
}

/// Server movement energy coefficients: hover (J), altitude (J), lateral (J/m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerEnergyParams {
    pub k_h: f64,
    pub k_a: f64,
    pub k_l: f64,
}

impl Default for ServerEnergyParams {
    fn default() -> Self {
        Self {
            k_h: 1.0,
            k_a: 1.0,
            k_l: 0.1,
        }
    }
}

/// Everything the optimizer needs to know about one active device this round.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceRound {
    pub id: usize,
    pub position: Position3,
    pub model_bits: f64,
    pub conn_count: f64,
    pub flops_per_cycle: f64,
    pub capacitance: f64,
    pub batch_size: f64,
    pub cpu_min: f64,
    pub cpu_max: f64,
    pub power_cap: f64,
    pub gamma: f64,
    pub survival: f64,
    pub optimizer: OptimizerSpec,
    pub smoothness: f64,
    pub q_max: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundSnapshot {
    pub devices: Vec<DeviceRound>,
    pub tau_g: f64,
    pub t_max: f64,
    pub global_smoothness: f64,
    pub initial_loss: f64,
    pub rounds: usize,
    pub channel: ChannelParams,
    pub server: ServerEnergyParams,
    pub region_max: [f64; 3],
    pub prev_pose: Position3,
}

impl RoundSnapshot {
    pub fn global(&self) -> GlobalTheory {
        GlobalTheory {
            smoothness: self.global_smoothness,
            initial_loss: self.initial_loss,
            rounds: self.rounds,
            n_active: self.devices.len(),
        }
    }

    pub fn device_theory(&self, i: usize, tau: f64) -> DeviceTheory {
        let d = &self.devices[i];
        let (w_mean, w_max) = theory::scale_stats(&d.optimizer, tau);
        DeviceTheory {
            smoothness: d.smoothness,
            q_max: d.q_max,
            sigma: d.sigma,
            eta: d.optimizer.learning_rate,
            w_mean,
            w_max,
            tau_eff: theory::effective_tau(tau, d.survival),
        }
    }

    fn server_lo(&self) -> [f64; 3] {
        [
            self.region_max[0] * XY_LO_FRAC,
            self.region_max[1] * XY_LO_FRAC,
            self.region_max[2] * Z_LO_FRAC,
        ]
    }

    fn server_hi(&self) -> [f64; 3] {
        [self.region_max[0], self.region_max[1], self.region_max[2] * Z_HI_FRAC]
    }
}

const AUX_LO: f64 = 1e-12;
const AUX_HI: f64 = 1e12;
const AUX_ANCHOR: f64 = 1e-6;
const TAU_LO: f64 = 1e-15;
const ALPHA_LO: f64 = 1e-3;
const POWER_LO_FRAC: f64 = 1e-6;
const XY_LO_FRAC: f64 = 1e-6;
const Z_LO_FRAC: f64 = 1e-6;
/// The altitude constraint divides by `φ_max − z`, so z stays strictly below the ceiling.
const Z_HI_FRAC: f64 = 1.0 - 1e-3;
const LOOSEN: f64 = 1.0 + 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveCriteria {
    pub tol: f64,
    pub max_iters: usize,
    /// Exponent of the relaxed-stage coupling `τ^κ ≤ τ_g^κ α`.
    pub relax_kappa: f64,
    pub solver: SolverSettings,
}

impl Default for SolveCriteria {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iters: 30,
            relax_kappa: 0.2,
            solver: SolverSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DevicePoint {
    pub power: f64,
    pub cpu: f64,
    pub tau: f64,
    pub alpha: f64,
    pub chi_d: f64,
    pub chi_z: f64,
    pub chi_pr: f64,
    pub chi_pr_hat: f64,
    pub chi_los: f64,
    pub chi_nlos: f64,
    pub chi_t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ServerPoint {
    pub pose: Position3,
    pub altitude_power: f64,
    pub chi_l: f64,
    pub chi_a: f64,
    pub chi_e_hat: f64,
}

/// A full assignment of decision and auxiliary variables.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Point {
    pub devices: Vec<DevicePoint>,
    pub server: ServerPoint,
}

fn path_params(snap: &RoundSnapshot, dev: &Position3) -> (PathClass, geometry_channel::PathParams) {
    // The server altitude is a positive variable, so only the device altitude decides.
    let class = if dev.z > 0.0 { PathClass::A2A } else { PathClass::A2G };
    (class, *snap.channel.path(class))
}

/// `(180/π)(u + u³/6)`, the truncated arcsine in degrees.
fn taylor_angle(u: f64) -> f64 {
    180.0 / PI * (u + u * u * u / 6.0)
}

/// Fills auxiliaries so that every constraint holds with a sliver of slack
/// for the given primary values.
pub fn tighten(snap: &RoundSnapshot, w: &ObjectiveWeights, point: &mut Point) {
    let pose = point.server.pose;
    for (d, p) in snap.devices.iter().zip(point.devices.iter_mut()) {
        let dist2 = geometry_channel::euclidean_distance(&pose, &d.position).powi(2);
        p.chi_d = dist2 * LOOSEN + AUX_ANCHOR;
        p.chi_z = ((pose.z - d.position.z).abs() * LOOSEN).max(AUX_ANCHOR);
        let (_, pp) = path_params(snap, &d.position);
        let base = 1.0 + pp.los_b * pp.los_a - pp.los_b * taylor_angle(p.chi_z / p.chi_d.sqrt());
        if base > AUX_ANCHOR {
            p.chi_pr = AUX_ANCHOR;
            p.chi_pr_hat = base + p.chi_pr;
        } else {
            p.chi_pr_hat = AUX_ANCHOR;
            p.chi_pr = p.chi_pr_hat - base;
        }
        let q = pp.los_a * p.chi_pr_hat;
        p.chi_los = LOOSEN / (1.0 + q);
        p.chi_nlos = LOOSEN * q / (1.0 + q);
        p.chi_t = (p.tau * (1.0 - p.alpha)).max(0.0) * LOOSEN + AUX_ANCHOR;
    }
    let s = &mut point.server;
    let prev = snap.prev_pose;
    let dxy2 = (prev.x - s.pose.x).powi(2) + (prev.y - s.pose.y).powi(2);
    s.chi_l = dxy2 * LOOSEN + AUX_ANCHOR;
    let zmax = snap.region_max[2];
    let ratio = (zmax - prev.z.min(zmax)) / (zmax - s.pose.z);
    let t = AUX_ANCHOR.max(10.0 * w.eps_m);
    s.chi_a = t;
    s.chi_e_hat = ratio.max(1.0) + 2.0 * t;
    s.altitude_power = s.chi_e_hat - 1.0 - s.chi_a;
}

/// Standard starting point: half power, mid CPU, half the iteration budget,
/// everyone active, server at the previous pose pulled inside the box.
pub fn initial_point(snap: &RoundSnapshot, w: &ObjectiveWeights) -> Point {
    let lo = snap.server_lo();
    let hi = snap.server_hi();
    let mut inner = [0.0; 3];
    let mut upper = [0.0; 3];
    for j in 0..3 {
        let span = hi[j] - lo[j];
        inner[j] = lo[j] + 1e-3 * span;
        upper[j] = hi[j] - 1e-3 * span;
    }
    let pose = snap.prev_pose.clamp(inner, upper);
    let mut p = Point {
        devices: snap
            .devices
            .iter()
            .map(|d| DevicePoint {
                power: d.power_cap / 2.0,
                cpu: (d.cpu_min + d.cpu_max) / 2.0,
                tau: snap.tau_g / 2.0,
                alpha: 1.0,
                chi_d: 1.0,
                chi_z: 1.0,
                chi_pr: 1.0,
                chi_pr_hat: 1.0,
                chi_los: 1.0,
                chi_nlos: 1.0,
                chi_t: 1.0,
            })
            .collect(),
        server: ServerPoint {
            pose,
            altitude_power: 1.0,
            chi_l: 1.0,
            chi_a: 1.0,
            chi_e_hat: 1.0,
        },
    };
    tighten(snap, w, &mut p);
    p
}

#[derive(Debug, Clone, PartialEq)]
pub enum AlphaMode {
    /// `α ∈ [1e-3, 1]` with the coupling `τ^κ ≤ τ_g^κ α`.
    Relaxed,
    /// `α` held at 1 (`true`) or 0 (`false`) per device.
    Fixed(Vec<bool>),
}

impl AlphaMode {
    fn fixed(&self, i: usize) -> Option<bool> {
        match self {
            AlphaMode::Relaxed => None,
            AlphaMode::Fixed(p) => Some(p[i]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct TrainVars {
    power: VarId,
    cpu: VarId,
    tau: VarId,
    chi_t: VarId,
    alpha: Option<VarId>,
}

/// Geometry auxiliaries exist for every device; training variables only for
/// devices that may train (`τ = 0` is substituted for fixed idle devices).
#[derive(Debug, Clone, PartialEq)]
struct DevVars {
    idx: usize,
    train: Option<TrainVars>,
    chi_d: VarId,
    chi_z: VarId,
    chi_pr: VarId,
    chi_pr_hat: VarId,
    chi_los: VarId,
    chi_nlos: VarId,
}

/// Where each entry of a [`Point`] lives in the GP variable vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    devs: Vec<DevVars>,
    x: VarId,
    y: VarId,
    z: VarId,
    p_a: VarId,
    chi_l: VarId,
    chi_a: VarId,
    chi_e: VarId,
    n: usize,
}

impl Layout {
    pub fn to_vec(&self, p: &Point) -> Vec<f64> {
        let mut v = vec![0.0; self.n];
        let s = &p.server;
        v[self.x] = s.pose.x;
        v[self.y] = s.pose.y;
        v[self.z] = s.pose.z;
        v[self.p_a] = s.altitude_power;
        v[self.chi_l] = s.chi_l;
        v[self.chi_a] = s.chi_a;
        v[self.chi_e] = s.chi_e_hat;
        for dv in &self.devs {
            let d = &p.devices[dv.idx];
            if let Some(t) = &dv.train {
                v[t.power] = d.power;
                v[t.cpu] = d.cpu;
                v[t.tau] = d.tau;
                v[t.chi_t] = d.chi_t;
                if let Some(a) = t.alpha {
                    v[a] = d.alpha;
                }
            }
            v[dv.chi_d] = d.chi_d;
            v[dv.chi_z] = d.chi_z;
            v[dv.chi_pr] = d.chi_pr;
            v[dv.chi_pr_hat] = d.chi_pr_hat;
            v[dv.chi_los] = d.chi_los;
            v[dv.chi_nlos] = d.chi_nlos;
        }
        v
    }

    /// Writes a solution back.
    pub fn read(&self, v: &[f64], p: &mut Point) {
        let s = &mut p.server;
        s.pose = Position3::new(v[self.x], v[self.y], v[self.z]);
        s.altitude_power = v[self.p_a];
        s.chi_l = v[self.chi_l];
        s.chi_a = v[self.chi_a];
        s.chi_e_hat = v[self.chi_e];
        for dv in &self.devs {
            let d = &mut p.devices[dv.idx];
            // idle devices keep their training anchor for later stages
            match &dv.train {
                Some(t) => {
                    d.power = v[t.power];
                    d.cpu = v[t.cpu];
                    d.tau = v[t.tau];
                    d.chi_t = v[t.chi_t];
                    d.alpha = t.alpha.map(|a| v[a]).unwrap_or(1.0);
                }
                None => d.alpha = 0.0,
            }
            d.chi_d = v[dv.chi_d];
            d.chi_z = v[dv.chi_z];
            d.chi_pr = v[dv.chi_pr];
            d.chi_pr_hat = v[dv.chi_pr_hat];
            d.chi_los = v[dv.chi_los];
            d.chi_nlos = v[dv.chi_nlos];
        }
    }
}

fn v(id: VarId) -> Monomial {
    Monomial::var(id)
}

fn c(k: f64) -> Monomial {
    Monomial::constant(k)
}

/// Distance, altitude-gap and LoS auxiliaries of one device.
#[allow(clippy::too_many_arguments)]
fn add_geometry(
    gp: &mut GpProblem,
    obj: &mut Posynomial,
    snap: &RoundSnapshot,
    w: &ObjectiveWeights,
    dv: &DevVars,
    pp: &geometry_channel::PathParams,
    av: &[f64],
    server_xyz: [VarId; 3],
) -> Result<(), ScdnError> {
    let d = &snap.devices[dv.idx];
    let id = d.id;
    let z = server_xyz[2];
    // distance bound d² ≤ χ_D
    let dpos = d.position.as_array();
    let mut num = Posynomial::default();
    for &sv in &server_xyz {
        num.push(Monomial::power(sv, 2.0));
    }
    num.push(c(dpos.iter().map(|q| q * q).sum()));
    let mut den = Posynomial::from(v(dv.chi_d));
    for j in 0..3 {
        den.push(v(server_xyz[j]).scale(2.0 * dpos[j]));
    }
    let den_hat = condense(&den, av)?;
    gp.add_le(format!("dist_{id}"), num, &den_hat);

    // |Δz| ≤ χ_z
    let dz = d.position.z;
    let den = Posynomial::new(vec![c(dz), v(dv.chi_z)]);
    gp.add_le(format!("absz_pos_{id}"), v(z).into(), &condense(&den, av)?);
    if dz > 0.0 {
        let den = Posynomial::new(vec![v(z), v(dv.chi_z)]);
        gp.add_le(format!("absz_neg_{id}"), c(dz).into(), &condense(&den, av)?);
    }

    // LoS exponent pair around χ̂_Pr ≈ 1 + βψ − βθ + χ_Pr
    let u = v(dv.chi_z) * Monomial::power(dv.chi_d, -0.5);
    let angle = Posynomial::new(vec![
        u.clone().scale(180.0 * pp.los_b / PI),
        u.pow(3.0).scale(30.0 * pp.los_b / PI),
    ]);
    let konst = pp.los_b * pp.los_a + 1.0;
    let q_pos_den = Posynomial::from(v(dv.chi_pr_hat)) + angle.clone() + c(w.eps_pr);
    gp.add_le(
        format!("los_exp_pos_{id}"),
        Posynomial::new(vec![v(dv.chi_pr), c(konst)]),
        &condense(&q_pos_den, av)?,
    );
    let q_neg_den = Posynomial::new(vec![v(dv.chi_pr), c(konst + w.eps_pr)]);
    gp.add_le(
        format!("los_exp_neg_{id}"),
        Posynomial::from(v(dv.chi_pr_hat)) + angle,
        &condense(&q_neg_den, av)?,
    );

    // LoS / NLoS probability bounds
    let r_los = Posynomial::new(vec![
        v(dv.chi_los),
        (v(dv.chi_los) * v(dv.chi_pr_hat)).scale(pp.los_a),
    ]);
    gp.add_le(format!("p_los_{id}"), c(1.0).into(), &condense(&r_los, av)?);
    let r_nlos = Posynomial::new(vec![
        v(dv.chi_nlos),
        (v(dv.chi_nlos) * v(dv.chi_pr_hat)).scale(pp.los_a),
    ]);
    gp.add_le(
        format!("p_nlos_{id}"),
        v(dv.chi_pr_hat).scale(pp.los_a).into(),
        &condense(&r_nlos, av)?,
    );

    for q in [dv.chi_d, dv.chi_z, dv.chi_pr, dv.chi_los, dv.chi_nlos] {
        obj.push(v(q).scale(w.psi_hat));
    }
    Ok(())
}

/// Assembles the condensed GP around `anchor`.
pub fn build_round_problem(
    snap: &RoundSnapshot,
    w: &ObjectiveWeights,
    mode: &AlphaMode,
    anchor: &Point,
    kappa: f64,
) -> Result<(GpProblem, Layout), ScdnError> {
    let mut gp = GpProblem::new();
    let lo = snap.server_lo();
    let hi = snap.server_hi();
    let x = gp.add_var("x_s", lo[0], hi[0]);
    let y = gp.add_var("y_s", lo[1], hi[1]);
    let z = gp.add_var("z_s", lo[2], hi[2]);
    let p_a = gp.add_var("p_alt", AUX_LO, AUX_HI);
    let chi_l = gp.add_var("chi_l", AUX_LO, AUX_HI);
    let chi_a = gp.add_var("chi_a", AUX_LO, AUX_HI);
    let chi_e = gp.add_var("chi_e_hat", AUX_LO, AUX_HI);
    let mut devs = Vec::new();
    for (i, d) in snap.devices.iter().enumerate() {
        let id = d.id;
        let (cpu_lo, cpu_hi) = if d.cpu_max > d.cpu_min {
            (d.cpu_min, d.cpu_max)
        } else {
            (d.cpu_min * (1.0 - 1e-9), d.cpu_min * (1.0 + 1e-9))
        };
        let train = (mode.fixed(i) != Some(false)).then(|| TrainVars {
            power: gp.add_var(format!("p_{id}"), d.power_cap * POWER_LO_FRAC, d.power_cap),
            cpu: gp.add_var(format!("g_{id}"), cpu_lo, cpu_hi),
            tau: gp.add_var(format!("tau_{id}"), TAU_LO, snap.tau_g),
            chi_t: gp.add_var(format!("chi_t_{id}"), AUX_LO, AUX_HI),
            alpha: matches!(mode, AlphaMode::Relaxed).then(|| gp.add_var(format!("alpha_{id}"), ALPHA_LO, 1.0)),
        });
        devs.push(DevVars {
            idx: i,
            train,
            chi_d: gp.add_var(format!("chi_d_{id}"), AUX_LO, AUX_HI),
            chi_z: gp.add_var(format!("chi_z_{id}"), AUX_LO, AUX_HI),
            chi_pr: gp.add_var(format!("chi_pr_{id}"), AUX_LO, AUX_HI),
            chi_pr_hat: gp.add_var(format!("chi_pr_hat_{id}"), AUX_LO, AUX_HI),
            chi_los: gp.add_var(format!("chi_los_{id}"), AUX_LO, AUX_HI),
            chi_nlos: gp.add_var(format!("chi_nlos_{id}"), AUX_LO, AUX_HI),
        });
    }
    let layout = Layout {
        devs,
        x,
        y,
        z,
        p_a,
        chi_l,
        chi_a,
        chi_e,
        n: gp.n_vars(),
    };
    let av = layout.to_vec(anchor);
    for (k, val) in av.iter().enumerate() {
        if !(*val > 0.0) || !val.is_finite() {
            return Err(ScdnError::InfeasibleAnchor(gp.vars[k].name.clone()));
        }
    }

    let mut obj = Posynomial::default();
    let global = snap.global();
    let n_act = snap.devices.len().max(1) as f64;

    for dv in &layout.devs {
        let d = &snap.devices[dv.idx];
        let id = d.id;
        let (_, pp) = path_params(snap, &d.position);
        let Some(t) = &dv.train else {
            let th = snap.device_theory(dv.idx, 0.0);
            obj.push(c(w.psi_g * theory::xi_bound(&th, &global, d.gamma, w.eps_g)));
            add_geometry(&mut gp, &mut obj, snap, w, dv, &pp, &av, [x, y, z])?;
            continue;
        };
        let dp = &anchor.devices[dv.idx];
        let alpha_m = t.alpha.map(v).unwrap_or_else(|| c(1.0));

        // (a) convergence: γ (K0 + K2 τ²) / Â(τ)
        let th = snap.device_theory(dv.idx, dp.tau);
        let ew = th.eta * th.w_max;
        let k0 = global.initial_loss / (global.rounds as f64 * n_act);
        let k2 = 2.0
            * (th.q_max.powi(2) + th.sigma.powi(2))
            * d.survival.powi(2)
            * (th.smoothness.powi(2) * ew.powi(3) + global.smoothness * ew.powi(2));
        // a violated step-size condition leaves only the ε_G floor
        let slope = (d.survival * th.eta * (th.w_mean - 0.5 * th.w_max)).max(0.0);
        let a_tilde = Posynomial::new(vec![v(t.tau).scale(slope), c(w.eps_g)]);
        let a_hat = condense(&a_tilde, &av)?;
        let xi_num = Posynomial::new(vec![c(k0), Monomial::power(t.tau, 2.0).scale(k2)]);
        obj = obj + (xi_num * &a_hat.inv()).scale(w.psi_g * d.gamma);

        // (b) transmit energy with the rational rate approximation
        let sig2 = snap.channel.noise_power();
        let geo = Monomial::power(dv.chi_d, pp.path_loss_exponent / 2.0)
            .scale(snap.channel.mu_pl().powf(pp.path_loss_exponent) * sig2);
        let s = Posynomial::new(vec![
            v(dv.chi_los).scale(pp.excess_los) * geo.clone(),
            v(dv.chi_nlos).scale(pp.excess_nlos) * geo.clone(),
        ]);
        let t_tilde = (s.clone().scale(6.0) + v(t.power)).scale(snap.channel.bandwidth);
        let t_hat = condense(&t_tilde, &av)?;
        let etx = (s.clone() * (s.clone().scale(3.0) + v(t.power).scale(2.0)))
            .scale(2.0 * d.model_bits * LN_2)
            * &t_hat.inv();
        obj = obj + (etx.clone() * &alpha_m).scale(w.psi_r);
        gp.add_constraint(
            format!("timing_{id}"),
            (etx * &(alpha_m.clone() / v(t.power))).scale(1.0 / snap.t_max),
        );

        // (c) processing energy and the CPU coupling
        let e_coef = 3.0 * d.conn_count * d.capacitance * d.batch_size / (2.0 * d.flops_per_cycle);
        obj.push((v(t.tau) * Monomial::power(t.cpu, 2.0)).scale(w.psi_p * e_coef));
        gp.add_constraint(
            format!("cpu_{id}"),
            (v(t.tau) / v(t.cpu))
                .scale(3.0 * d.batch_size * d.conn_count / (4.0 * d.flops_per_cycle))
                .into(),
        );

        // τ(1 − α) ≤ χ_T
        let x_tilde = Posynomial::new(vec![v(t.chi_t), v(t.tau) * alpha_m.clone()]);
        gp.add_le(format!("idle_{id}"), v(t.tau).into(), &condense(&x_tilde, &av)?);
        if let Some(a) = t.alpha {
            gp.add_constraint(
                format!("couple_{id}"),
                (Monomial::power(t.tau, kappa) / v(a)).scale(snap.tau_g.powf(-kappa)).into(),
            );
        }
        obj.push(v(t.chi_t).scale(w.psi_hat));
        add_geometry(&mut gp, &mut obj, snap, w, dv, &pp, &av, [x, y, z])?;
    }

    // (d) server movement
    let prev = snap.prev_pose;
    let num = Posynomial::new(vec![
        Monomial::power(x, 2.0),
        Monomial::power(y, 2.0),
        c(prev.x * prev.x + prev.y * prev.y),
    ]);
    let den = Posynomial::new(vec![v(chi_l), v(x).scale(2.0 * prev.x), v(y).scale(2.0 * prev.y)]);
    gp.add_le("lateral", num, &condense(&den, &av)?);

    let e_minus = Posynomial::new(vec![v(chi_e), c(w.eps_m)]);
    gp.add_le(
        "alt_exp_neg",
        Posynomial::new(vec![v(chi_a), v(p_a), c(1.0)]),
        &condense(&e_minus, &av)?,
    );
    let e_plus = Posynomial::new(vec![v(chi_a), c(1.0 + w.eps_m), v(p_a)]);
    gp.add_le("alt_exp_pos", v(chi_e).into(), &condense(&e_plus, &av)?);
    let zmax = snap.region_max[2];
    let o_tilde = Posynomial::new(vec![v(chi_e).scale(zmax), c(prev.z.min(zmax))]);
    gp.add_le(
        "altitude",
        Posynomial::new(vec![c(zmax), v(chi_e) * v(z)]),
        &condense(&o_tilde, &av)?,
    );

    let sv = &snap.server;
    obj.push(v(p_a).scale(w.psi_s * sv.k_a));
    obj.push(Monomial::power(chi_l, 0.5).scale(w.psi_s * sv.k_l));
    obj.push(v(chi_l).scale(w.psi_hat));
    obj.push(v(chi_a).scale(w.psi_hat));
    gp.objective = obj;
    if w.psi_s * sv.k_h > 0.0 {
        gp.objective_exp.push(ExpTerm {
            coef: w.psi_s * sv.k_h,
            var: z,
            rate: 1.0,
        });
    }
    Ok((gp, layout))
}

/// Result of one successive-approximation loop at a fixed alpha mode.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerResult {
    pub point: Point,
    /// Objective of each condensed problem at the accepted iterate.
    pub trace: Vec<f64>,
    pub newton_iters: usize,
}

/// Iterates condense → solve from `init` until the relative objective change
/// drops below `crit.tol`.
pub fn inner_loop(
    snap: &RoundSnapshot,
    w: &ObjectiveWeights,
    mode: &AlphaMode,
    init: &Point,
    crit: &SolveCriteria,
) -> Result<InnerResult, ScdnError> {
    let mut anchor = init.clone();
    let mut trace: Vec<f64> = Vec::new();
    let mut newton_iters = 0;
    for b in 0..crit.max_iters {
        let (gp, layout) = build_round_problem(snap, w, mode, &anchor, crit.relax_kappa)?;
        let x0 = layout.to_vec(&anchor);
        let rep = gp_core::solve(&gp, &x0, &crit.solver)?;
        newton_iters += rep.iterations;
        let (mut x, mut value) = (rep.x, rep.objective);
        if b > 0 {
            // The previous iterate is feasible here and scores no worse than
            // last time; keep it if the solver came back marginally worse.
            let at_anchor = gp.objective_value(&x0)?;
            if at_anchor < value && gp.max_violation(&x0)? <= 1e-9 {
                x = x0;
                value = at_anchor;
            }
        }
        layout.read(&x, &mut anchor);
        let done = trace
            .last()
            .map(|&prev| (prev - value).abs() <= crit.tol * prev.abs().max(f64::MIN_POSITIVE))
            .unwrap_or(false);
        trace.push(value);
        if done {
            break;
        }
    }
    Ok(InnerResult {
        point: anchor,
        trace,
        newton_iters,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceDecision {
    pub id: usize,
    pub tx_power: f64,
    pub cpu_freq: f64,
    /// Continuous iteration count; execution rounds it.
    pub tau: f64,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundDecision {
    pub devices: Vec<DeviceDecision>,
    pub server_pose: Position3,
    pub altitude_power: f64,
    /// Final iterate including auxiliaries; `None` for heuristic decisions.
    pub point: Option<Point>,
    pub objective: f64,
    pub relaxed_trace: Vec<f64>,
    pub trace: Vec<f64>,
    pub solver_iters: usize,
}

fn decision_from_point(snap: &RoundSnapshot, p: &Point, pattern: &[bool]) -> Vec<DeviceDecision> {
    snap.devices
        .iter()
        .zip(&p.devices)
        .zip(pattern)
        .map(|((d, dp), &on)| DeviceDecision {
            id: d.id,
            tx_power: if on { dp.power } else { 0.0 },
            cpu_freq: if on { dp.cpu } else { d.cpu_min },
            tau: if on { dp.tau } else { 0.0 },
            active: on,
        })
        .collect()
}

/// Index of the active device whose link at full power from the anchor pose
/// misses the deadline by the widest margin.
fn worst_timing(snap: &RoundSnapshot, pose: &Position3, pattern: &[bool]) -> Option<usize> {
    let mut worst: Option<(usize, f64)> = None;
    for (i, d) in snap.devices.iter().enumerate() {
        if !pattern[i] {
            continue;
        }
        let ratio = match geometry_channel::link_state(&snap.channel, pose, &d.position, d.power_cap, d.model_bits, snap.t_max) {
            Ok(l) => l.delay / snap.t_max,
            Err(_) => 0.0,
        };
        if worst.map(|(_, r)| ratio > r).unwrap_or(true) {
            worst = Some((i, ratio));
        }
    }
    worst.map(|(i, _)| i)
}

fn is_infeasible(e: &ScdnError) -> bool {
    matches!(e, ScdnError::Gp(GpError::Infeasible(_)))
}

/// Runs the fixed-activation loop, deactivating devices until it is feasible.
fn fixed_with_repair(
    snap: &RoundSnapshot,
    w: &ObjectiveWeights,
    init: &Point,
    mut pattern: Vec<bool>,
    crit: &SolveCriteria,
) -> Result<(Vec<bool>, InnerResult), ScdnError> {
    loop {
        match inner_loop(snap, w, &AlphaMode::Fixed(pattern.clone()), init, crit) {
            Ok(r) => return Ok((pattern, r)),
            Err(e) if is_infeasible(&e) => {
                let i = worst_timing(snap, &init.server.pose, &pattern).ok_or(ScdnError::NoFeasibleActivation)?;
                pattern[i] = false;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Anchor for the relaxed stage. Condensing `χ_T + τα` at `α = 1`, `χ_T ≈ 0`
/// puts all weight on `τα` and pins `α` at 1, so the relaxed loop starts from
/// the midpoint with `τ` inside the coupling.
pub fn relaxed_anchor(init: &Point, snap: &RoundSnapshot, kappa: f64) -> Point {
    let mut p = init.clone();
    for d in &mut p.devices {
        d.alpha = 0.5;
        d.tau = d.tau.min(0.5 * snap.tau_g * 0.5f64.powf(1.0 / kappa));
        d.chi_t = d.tau * (1.0 - d.alpha) * LOOSEN + AUX_ANCHOR;
    }
    p
}

/// Relax, round at ½, re-solve with activations fixed, repair if infeasible.
pub fn solve_round(
    snap: &RoundSnapshot,
    w: &ObjectiveWeights,
    init: Option<&Point>,
    crit: &SolveCriteria,
) -> Result<RoundDecision, ScdnError> {
    let fresh = initial_point(snap, w);
    let init = init.unwrap_or(&fresh);
    let relaxed_init = relaxed_anchor(init, snap, crit.relax_kappa);
    let (pattern, relaxed_trace, relaxed_iters) = match inner_loop(snap, w, &AlphaMode::Relaxed, &relaxed_init, crit) {
        Ok(r) => (
            r.point.devices.iter().map(|d| d.alpha >= 0.5).collect::<Vec<_>>(),
            r.trace,
            r.newton_iters,
        ),
        // even the relaxed activations cannot meet the deadline; start the
        // repair from everyone active
        Err(e) if is_infeasible(&e) => (vec![true; snap.devices.len()], Vec::new(), 0),
        Err(e) => return Err(e),
    };
    let (pattern, fixed) = fixed_with_repair(snap, w, init, pattern, crit)?;
    Ok(RoundDecision {
        devices: decision_from_point(snap, &fixed.point, &pattern),
        server_pose: fixed.point.server.pose,
        altitude_power: fixed.point.server.altitude_power,
        objective: *fixed.trace.last().unwrap_or(&f64::NAN),
        point: Some(fixed.point),
        relaxed_trace,
        trace: fixed.trace,
        solver_iters: relaxed_iters + fixed.newton_iters,
    })
}

pub const ENUMERATION_MAX: usize = 6;

/// Exhaustive search over activation patterns. Returns the best pattern and
/// its converged objective.
pub fn enumerate_alpha(
    snap: &RoundSnapshot,
    w: &ObjectiveWeights,
    crit: &SolveCriteria,
) -> Result<(Vec<bool>, f64), ScdnError> {
    let n = snap.devices.len();
    if n > ENUMERATION_MAX {
        return Err(ScdnError::TooManyDevices {
            max: ENUMERATION_MAX,
            got: n,
        });
    }
    let init = initial_point(snap, w);
    let mut best: Option<(Vec<bool>, f64)> = None;
    for mask in 0..(1u32 << n) {
        let pattern: Vec<bool> = (0..n).map(|i| mask & (1 << i) != 0).collect();
        match inner_loop(snap, w, &AlphaMode::Fixed(pattern.clone()), &init, crit) {
            Ok(r) => {
                let obj = *r.trace.last().unwrap_or(&f64::INFINITY);
                if best.as_ref().map(|(_, b)| obj < *b).unwrap_or(true) {
                    best = Some((pattern, obj));
                }
            }
            Err(e) if is_infeasible(&e) => {}
            Err(e) => return Err(e),
        }
    }
    best.ok_or(ScdnError::NoFeasibleActivation)
}

/// Transmit energy under the rational approximation of `log2(1 + P/s)`,
/// `s = σ² η_eff G`.
pub fn pade_tx_energy(model_bits: f64, tx_power: f64, noise: f64, eta_eff: f64, geometry: f64, bandwidth: f64) -> f64 {
    let s = noise * eta_eff * geometry;
    2.0 * model_bits * LN_2 * s * (3.0 * s + 2.0 * tx_power) / (bandwidth * (6.0 * s + tx_power))
}

/// `τ · 3ϕaB/(2ϕ̂) · g²`.
pub fn processing_energy(d: &DeviceRound, tau: f64, cpu: f64) -> f64 {
    tau * 3.0 * d.conn_count * d.capacitance * d.batch_size / (2.0 * d.flops_per_cycle) * cpu * cpu
}

pub fn movement_energy(params: &ServerEnergyParams, prev: &Position3, pose: &Position3, altitude_power: f64) -> f64 {
    let dxy = ((prev.x - pose.x).powi(2) + (prev.y - pose.y).powi(2)).sqrt();
    params.k_h * pose.z.exp() + params.k_a * altitude_power + params.k_l * dxy
}

/// Smallest altitude power that permits moving from `prev_z` to `z`.
pub fn required_altitude_power(prev_z: f64, z: f64, z_max: f64) -> f64 {
    ((1.0 - prev_z / z_max).ln() - (1.0 - z / z_max).ln()).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Energies {
    pub tx: Vec<f64>,
    pub processing: Vec<f64>,
    pub movement: f64,
}

/// Exact physical energies of a decision (true log rate, no approximations).
pub fn decision_energies(decision: &RoundDecision, snap: &RoundSnapshot) -> Energies {
    let mut tx = Vec::with_capacity(snap.devices.len());
    let mut processing = Vec::with_capacity(snap.devices.len());
    for (d, dd) in snap.devices.iter().zip(&decision.devices) {
        let e_tx = if dd.active && dd.tx_power > 0.0 {
            geometry_channel::link_state(&snap.channel, &decision.server_pose, &d.position, dd.tx_power, d.model_bits, snap.t_max)
                .map(|l| if l.rate > 0.0 { d.model_bits * dd.tx_power / l.rate } else { f64::INFINITY })
                .unwrap_or(f64::INFINITY)
        } else {
            0.0
        };
        tx.push(e_tx);
        processing.push(processing_energy(d, dd.tau, dd.cpu_freq));
    }
    Energies {
        tx,
        processing,
        movement: movement_energy(&snap.server, &snap.prev_pose, &decision.server_pose, decision.altitude_power),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ObjectiveTerms {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

/// Weighted objective terms evaluated with the exact formulas.
pub fn objective_terms(decision: &RoundDecision, snap: &RoundSnapshot, w: &ObjectiveWeights) -> ObjectiveTerms {
    let e = decision_energies(decision, snap);
    let global = snap.global();
    let mut t = ObjectiveTerms::default();
    for (i, (d, dd)) in snap.devices.iter().zip(&decision.devices).enumerate() {
        let th = snap.device_theory(i, dd.tau);
        t.a += w.psi_g * theory::xi_bound(&th, &global, d.gamma, w.eps_g);
        if dd.active {
            t.b += w.psi_r * e.tx[i];
        }
        t.c += w.psi_p * e.processing[i];
    }
    t.d = w.psi_s * e.movement;
    t
}
