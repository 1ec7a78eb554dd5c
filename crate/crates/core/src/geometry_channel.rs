//! Node geometry and the air-to-ground / air-to-air link model.
//!
//! All quantities are linear and SI (W, Hz, m, s). Decibel values only exist
//! in [`ChannelConfig`], which is converted once by [`ChannelParams::from_config`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("nodes are co-located; distance is zero")]
    ZeroDistance,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    /// Componentwise clamp into `[lo, hi]`.
    pub fn clamp(&self, lo: [f64; 3], hi: [f64; 3]) -> Self {
        let a = self.as_array();
        Self::from_array([
            a[0].clamp(lo[0], hi[0]),
            a[1].clamp(lo[1], hi[1]),
            a[2].clamp(lo[2], hi[2]),
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathClass {
    A2G,
    A2A,
}

/// Per-path-class propagation constants in linear units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathParams {
    pub path_loss_exponent: f64,
    pub los_a: f64,
    pub los_b: f64,
    pub excess_los: f64,
    pub excess_nlos: f64,
}

/// Channel constants as they appear in a scenario file (dB where customary).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub noise_density_dbm_hz: f64,
    pub bandwidth_hz: f64,
    pub carrier_freq_hz: f64,
    pub light_speed: f64,
    pub a2g: PathConfig,
    pub a2a: PathConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathConfig {
    pub path_loss_exponent: f64,
    pub los_a: f64,
    pub los_b: f64,
    pub excess_los_db: f64,
    pub excess_nlos_db: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            noise_density_dbm_hz: -174.0,
            bandwidth_hz: 2e6,
            carrier_freq_hz: 2e9,
            light_speed: 299_792_458.0,
            a2g: PathConfig {
                path_loss_exponent: 2.0,
                los_a: 11.95,
                los_b: 0.14,
                excess_los_db: 3.0,
                excess_nlos_db: 23.0,
            },
            a2a: PathConfig {
                path_loss_exponent: 2.2,
                los_a: 10.5,
                los_b: 0.12,
                excess_los_db: 3.0,
                excess_nlos_db: 17.0,
            },
        }
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelParams {
    /// Noise power spectral density, W/Hz.
    pub noise_density: f64,
    pub bandwidth: f64,
    pub carrier_freq: f64,
    pub light_speed: f64,
    pub a2g: PathParams,
    pub a2a: PathParams,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self::from_config(&ChannelConfig::default())
    }
}

impl ChannelParams {
    pub fn from_config(cfg: &ChannelConfig) -> Self {
        let path = |p: &PathConfig| PathParams {
            path_loss_exponent: p.path_loss_exponent,
            los_a: p.los_a,
            los_b: p.los_b,
            excess_los: db_to_linear(p.excess_los_db),
            excess_nlos: db_to_linear(p.excess_nlos_db),
        };
        Self {
            noise_density: dbm_to_watts(cfg.noise_density_dbm_hz),
            bandwidth: cfg.bandwidth_hz,
            carrier_freq: cfg.carrier_freq_hz,
            light_speed: cfg.light_speed,
            a2g: path(&cfg.a2g),
            a2a: path(&cfg.a2a),
        }
    }

    pub fn path(&self, class: PathClass) -> &PathParams {
        match class {
            PathClass::A2G => &self.a2g,
            PathClass::A2A => &self.a2a,
        }
    }

    /// Free-space factor 4πf/c.
    pub fn mu_pl(&self) -> f64 {
        4.0 * std::f64::consts::PI * self.carrier_freq / self.light_speed
    }

    /// Receiver noise power σ² = N0·B̄.
    pub fn noise_power(&self) -> f64 {
        self.noise_density * self.bandwidth
    }
}

pub fn euclidean_distance(a: &Position3, b: &Position3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Elevation angle in degrees, in `[0, 90]`.
pub fn elevation_angle_deg(server: &Position3, device: &Position3) -> Result<f64, ChannelError> {
    let d = euclidean_distance(server, device);
    if d == 0.0 {
        return Err(ChannelError::ZeroDistance);
    }
    let s = ((server.z - device.z).abs() / d).min(1.0);
    Ok(s.asin().to_degrees())
}

/// Air-to-air only when both endpoints are airborne.
pub fn path_class(server: &Position3, device: &Position3) -> PathClass {
    if device.z > 0.0 && server.z > 0.0 {
        PathClass::A2A
    } else {
        PathClass::A2G
    }
}

pub fn p_los(params: &ChannelParams, class: PathClass, angle_deg: f64) -> f64 {
    let p = params.path(class);
    1.0 / (1.0 + p.los_a * (-p.los_b * (angle_deg - p.los_a)).exp())
}

pub fn path_loss(
    params: &ChannelParams,
    class: PathClass,
    distance: f64,
    p_los: f64,
) -> Result<f64, ChannelError> {
    if distance <= 0.0 {
        return Err(ChannelError::ZeroDistance);
    }
    let p = params.path(class);
    let spread = (params.mu_pl() * distance).powf(p.path_loss_exponent);
    Ok(spread * (p_los * p.excess_los + (1.0 - p_los) * p.excess_nlos))
}

/// Shannon rate in bits/s.
pub fn rate(params: &ChannelParams, path_loss: f64, tx_power: f64) -> f64 {
    if tx_power <= 0.0 {
        return 0.0;
    }
    let snr = tx_power / path_loss / params.noise_power();
    params.bandwidth * snr.ln_1p() / std::f64::consts::LN_2
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkState {
    pub path_class: PathClass,
    pub p_los: f64,
    pub path_loss: f64,
    pub rate: f64,
    pub delay: f64,
    pub failed: bool,
}

/// Full link evaluation. A delay equal to `t_max` is a success.
pub fn link_state(
    params: &ChannelParams,
    server: &Position3,
    device: &Position3,
    tx_power: f64,
    model_bits: f64,
    t_max: f64,
) -> Result<LinkState, ChannelError> {
    let class = path_class(server, device);
    let d = euclidean_distance(server, device);
    let angle = elevation_angle_deg(server, device)?;
    let pl_prob = p_los(params, class, angle);
    let pl = path_loss(params, class, d, pl_prob)?;
    let r = rate(params, pl, tx_power);
    let delay = if r > 0.0 { model_bits / r } else { f64::INFINITY };
    Ok(LinkState {
        path_class: class,
        p_los: pl_prob,
        path_loss: pl,
        rate: r,
        delay,
        failed: delay > t_max,
    })
}
