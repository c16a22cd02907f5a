//! Tracking reward: per-axis alignment terms combined by a geometric mean,
//! velocity and effort penalties, and a collision penalty.

use std::f64::consts::FRAC_PI_2;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perception::fov_fraction;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("non-finite relative position")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub beta: f64,
    pub k_v: f64,
    pub k_u: f64,
    pub k_c: f64,
    /// Desired distance along the optical axis, m.
    pub d_r: f64,
    /// Collision distance, m.
    pub d_m: f64,
    pub fov: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            beta: 1.0 / 3.0,
            k_v: 0.4,
            k_u: 0.4,
            k_c: 10.0,
            d_r: 0.5,
            d_m: 0.3,
            fov: FRAC_PI_2,
        }
    }
}

impl RewardConfig {
    /// Returns the offending field and reason on failure.
    pub fn validate(&self) -> Result<(), (&'static str, &'static str)> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(("beta", "must be positive"));
        }
        if !(self.k_c.is_finite() && self.k_c > 0.0) {
            return Err(("k_c", "must be positive"));
        }
        if !(self.k_v.is_finite() && self.k_v >= 0.0) {
            return Err(("k_v", "must be non-negative"));
        }
        if !(self.k_u.is_finite() && self.k_u >= 0.0) {
            return Err(("k_u", "must be non-negative"));
        }
        if !(self.d_m > 0.0 && self.d_m.is_finite()) {
            return Err(("d_m", "must be positive"));
        }
        if !(self.d_r > self.d_m && self.d_r.is_finite()) {
            return Err(("d_r", "must exceed d_m"));
        }
        if !(self.fov > 0.0 && self.fov < std::f64::consts::PI) {
            return Err(("fov", "must lie in (0, π)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardTerms {
    pub r_x: f64,
    pub r_y: f64,
    pub r_z: f64,
    pub r_e: f64,
    pub r_v: f64,
    pub r_u: f64,
    pub collided: bool,
    pub total: f64,
}

/// Per-axis terms and their shaped product `r_e = (r_x r_y r_z)^β ∈ [0, 1]`.
///
/// Angles use `atan2`, so a target behind the camera yields `r_y = r_z = 0`.
pub fn tracking_terms(y: &Vector3<f64>, cfg: &RewardConfig) -> Result<(f64, f64, f64, f64), RewardError> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(RewardError::NonFinite);
    }
    let r_x = (1.0 - (y.x - cfg.d_r).abs()).max(0.0);
    let r_y = (1.0 - fov_fraction(y.y.atan2(y.x), cfg.fov)).max(0.0);
    let r_z = (1.0 - fov_fraction(y.z.atan2(y.x), cfg.fov)).max(0.0);
    let r_e = (r_x * r_y * r_z).powf(cfg.beta).clamp(0.0, 1.0);
    Ok((r_x, r_y, r_z, r_e))
}

/// `‖x‖ / (1 + ‖x‖)` for the relative velocity and the normalized action.
pub fn penalties(v_rel: &Vector3<f64>, u_normalized: &[f64; 4]) -> (f64, f64) {
    let v = v_rel.norm();
    let u = u_normalized.iter().map(|x| x * x).sum::<f64>().sqrt();
    (v / (1.0 + v), u / (1.0 + u))
}

/// Full reward; `‖y‖ ≤ d_m` is a collision and returns `-k_c`.
pub fn total_reward(
    y: &Vector3<f64>,
    v_rel: &Vector3<f64>,
    u_normalized: &[f64; 4],
    cfg: &RewardConfig,
) -> Result<RewardTerms, RewardError> {
    let (r_x, r_y, r_z, r_e) = tracking_terms(y, cfg)?;
    let (r_v, r_u) = penalties(v_rel, u_normalized);
    let collided = y.norm() <= cfg.d_m;
    let total = if collided {
        -cfg.k_c
    } else {
        r_e - cfg.k_v * r_v - cfg.k_u * r_u
    };
    Ok(RewardTerms {
        r_x,
        r_y,
        r_z,
        r_e,
        r_v,
        r_u,
        collided,
        total,
    })
}
