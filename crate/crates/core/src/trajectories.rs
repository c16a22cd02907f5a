//! Kinematic target motion with analytic derivatives.

use std::f64::consts::TAU;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("invalid range for {name}: [{lo}, {hi}]")]
    InvalidRange { name: &'static str, lo: f64, hi: f64 },
    #[error("peak velocity must be positive and finite, got {0}")]
    InvalidPeakVelocity(f64),
}

/// Position, velocity and acceleration of the target at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetSample {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
}

/// Per-axis sinusoid anchored so that evaluation at `t = 0` returns `origin`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinusoidParams {
    #[serde(default)]
    pub origin: Vector3<f64>,
    pub amplitude: Vector3<f64>,
    /// Hz.
    pub frequency: Vector3<f64>,
    pub phase: Vector3<f64>,
}

impl SinusoidParams {
    pub fn eval(&self, t: f64) -> TargetSample {
        let mut s = TargetSample {
            position: self.origin,
            velocity: Vector3::zeros(),
            acceleration: Vector3::zeros(),
        };
        for i in 0..3 {
            let (a, w, phi) = (self.amplitude[i], TAU * self.frequency[i], self.phase[i]);
            let arg = w * t + phi;
            s.position[i] += a * arg.sin() - a * phi.sin();
            s.velocity[i] = a * w * arg.cos();
            s.acceleration[i] = -a * w * w * arg.sin();
        }
        s
    }
}

/// Closed interval used for uniform sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn check(&self, name: &'static str) -> Result<(), TrajectoryError> {
        if self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi {
            Ok(())
        } else {
            Err(TrajectoryError::InvalidRange {
                name,
                lo: self.lo,
                hi: self.hi,
            })
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

/// Sampling ranges for the randomized sinusoid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinusoidRanges {
    pub amplitude: Interval,
    pub frequency: Interval,
    pub phase: Interval,
}

impl Default for SinusoidRanges {
    fn default() -> Self {
        Self {
            amplitude: Interval::new(1.0, 2.5),
            frequency: Interval::new(0.04, 0.25),
            phase: Interval::new(0.0, TAU),
        }
    }
}

impl SinusoidRanges {
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        self.amplitude.check("amplitude")?;
        self.frequency.check("frequency")?;
        self.phase.check("phase")
    }
}

/// Independent uniform per-axis draws of amplitude, frequency and phase.
pub fn sample_sinusoid(ranges: &SinusoidRanges, seed: u64, origin: Vector3<f64>) -> Result<SinusoidParams, TrajectoryError> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = SinusoidParams {
        origin,
        amplitude: Vector3::zeros(),
        frequency: Vector3::zeros(),
        phase: Vector3::zeros(),
    };
    for i in 0..3 {
        p.amplitude[i] = ranges.amplitude.sample(&mut rng);
        p.frequency[i] = ranges.frequency.sample(&mut rng);
        p.phase[i] = ranges.phase.sample(&mut rng);
    }
    Ok(p)
}

/// Frequency grid used by [`sample_with_peak_velocity`]; every sampled
/// frequency is a multiple of it, so the motion repeats after `1/BASE` s.
pub const PEAK_VELOCITY_BASE_FREQUENCY: f64 = 0.01;
const PEAK_SEARCH_STEP: f64 = 1e-3;

/// Maximum speed of a sinusoid over `[0, horizon]`, by dense sampling.
pub fn sampled_peak_speed(p: &SinusoidParams, horizon: f64, step: f64) -> f64 {
    let n = (horizon / step).ceil() as usize;
    (0..=n)
        .map(|k| p.eval(k as f64 * step).velocity.norm())
        .fold(0.0, f64::max)
}

/// Common period of a sinusoid whose frequencies lie on the base grid.
fn common_period(p: &SinusoidParams) -> f64 {
    let slowest = p.frequency.iter().filter(|f| **f > 0.0).fold(f64::INFINITY, |a, b| a.min(*b));
    let on_grid = p
        .frequency
        .iter()
        .all(|f| ((f / PEAK_VELOCITY_BASE_FREQUENCY) - (f / PEAK_VELOCITY_BASE_FREQUENCY).round()).abs() < 1e-9);
    if on_grid {
        1.0 / PEAK_VELOCITY_BASE_FREQUENCY
    } else if slowest.is_finite() {
        // Several periods of the slowest axis; adequate when the axes are incommensurate.
        10.0 / slowest
    } else {
        1.0
    }
}

/// Rescales the amplitudes so the peak speed equals `v_peak`.
pub fn scale_to_peak_speed(p: &mut SinusoidParams, v_peak: f64) -> Result<(), TrajectoryError> {
    if !(v_peak.is_finite() && v_peak > 0.0) {
        return Err(TrajectoryError::InvalidPeakVelocity(v_peak));
    }
    let peak = sampled_peak_speed(p, common_period(p), PEAK_SEARCH_STEP);
    if peak > 0.0 {
        p.amplitude *= v_peak / peak;
    }
    Ok(())
}

/// Random sinusoid whose peak speed is `v_peak`.
///
/// Phases, frequencies (snapped to a 0.01 Hz grid) and amplitude ratios are
/// drawn from `ranges`; amplitudes are then scaled so that the densely sampled
/// maximum of `‖ṗ‖` over one common period equals `v_peak`.
pub fn sample_with_peak_velocity(
    v_peak: f64,
    ranges: &SinusoidRanges,
    seed: u64,
    origin: Vector3<f64>,
) -> Result<SinusoidParams, TrajectoryError> {
    if !(v_peak.is_finite() && v_peak > 0.0) {
        return Err(TrajectoryError::InvalidPeakVelocity(v_peak));
    }
    let mut p = sample_sinusoid(ranges, seed, origin)?;
    for f in p.frequency.iter_mut() {
        *f = ((*f / PEAK_VELOCITY_BASE_FREQUENCY).round() * PEAK_VELOCITY_BASE_FREQUENCY).max(PEAK_VELOCITY_BASE_FREQUENCY);
    }
    scale_to_peak_speed(&mut p, v_peak)?;
    Ok(p)
}

/// Every supported target motion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Trajectory {
    Setpoint {
        #[serde(default)]
        origin: Vector3<f64>,
    },
    Ramp {
        #[serde(default)]
        origin: Vector3<f64>,
        velocity: Vector3<f64>,
    },
    /// Motion along `direction` with offset `c0 + c1 t + c2 t² + c3 t³`.
    Cubic {
        #[serde(default)]
        origin: Vector3<f64>,
        direction: Vector3<f64>,
        coefficients: [f64; 4],
    },
    Sinusoid(SinusoidParams),
    /// Planar figure-eight (Gerono lemniscate) in the horizontal plane.
    Eight2d {
        #[serde(default)]
        origin: Vector3<f64>,
        size: f64,
        period: f64,
    },
    /// Rounded rectangle traced with a smooth `tanh` profile per axis.
    Rect2d {
        #[serde(default)]
        origin: Vector3<f64>,
        width: f64,
        height: f64,
        period: f64,
        sharpness: f64,
    },
    /// Figure-eight with a vertical oscillation at the crossing frequency.
    Eight3d {
        #[serde(default)]
        origin: Vector3<f64>,
        size: f64,
        vertical: f64,
        period: f64,
    },
    /// Horizontal circle with constant climb rate.
    Spiral3d {
        #[serde(default)]
        origin: Vector3<f64>,
        radius: f64,
        period: f64,
        climb_rate: f64,
    },
}

/// `a sin(w t)` and its first two derivatives.
fn sine(a: f64, w: f64, t: f64) -> (f64, f64, f64) {
    let (s, c) = (w * t).sin_cos();
    (a * s, a * w * c, -a * w * w * s)
}

/// `tanh(k g(s))` with `g = cos` or `sin`, returning value and derivatives in `s`.
fn tanh_profile(k: f64, g: f64, dg: f64, ddg: f64) -> (f64, f64, f64) {
    let th = (k * g).tanh();
    let sech2 = 1.0 - th * th;
    let d = k * sech2 * dg;
    let dd = k * sech2 * ddg - 2.0 * k * k * th * sech2 * dg * dg;
    (th, d, dd)
}

impl Trajectory {
    pub fn origin(&self) -> Vector3<f64> {
        match self {
            Trajectory::Setpoint { origin }
            | Trajectory::Ramp { origin, .. }
            | Trajectory::Cubic { origin, .. }
            | Trajectory::Eight2d { origin, .. }
            | Trajectory::Rect2d { origin, .. }
            | Trajectory::Eight3d { origin, .. }
            | Trajectory::Spiral3d { origin, .. } => *origin,
            Trajectory::Sinusoid(p) => p.origin,
        }
    }

    /// Moves the anchor of the trajectory to `origin`.
    pub fn with_origin(mut self, new_origin: Vector3<f64>) -> Self {
        match &mut self {
            Trajectory::Setpoint { origin }
            | Trajectory::Ramp { origin, .. }
            | Trajectory::Cubic { origin, .. }
            | Trajectory::Eight2d { origin, .. }
            | Trajectory::Rect2d { origin, .. }
            | Trajectory::Eight3d { origin, .. }
            | Trajectory::Spiral3d { origin, .. } => *origin = new_origin,
            Trajectory::Sinusoid(p) => p.origin = new_origin,
        }
        self
    }

    pub fn eval(&self, t: f64) -> TargetSample {
        let zero = Vector3::zeros();
        match *self {
            Trajectory::Setpoint { origin } => TargetSample {
                position: origin,
                velocity: zero,
                acceleration: zero,
            },
            Trajectory::Ramp { origin, velocity } => TargetSample {
                position: origin + velocity * t,
                velocity,
                acceleration: zero,
            },
            Trajectory::Cubic {
                origin,
                direction,
                coefficients: [c0, c1, c2, c3],
            } => {
                let s = c0 + t * (c1 + t * (c2 + t * c3));
                let ds = c1 + t * (2.0 * c2 + 3.0 * c3 * t);
                let dds = 2.0 * c2 + 6.0 * c3 * t;
                TargetSample {
                    position: origin + direction * s,
                    velocity: direction * ds,
                    acceleration: direction * dds,
                }
            }
            Trajectory::Sinusoid(p) => p.eval(t),
            Trajectory::Eight2d { origin, size, period } => {
                let w = TAU / period;
                let (x, dx, ddx) = sine(size, w, t);
                let (y, dy, ddy) = sine(0.5 * size, 2.0 * w, t);
                TargetSample {
                    position: origin + Vector3::new(x, y, 0.0),
                    velocity: Vector3::new(dx, dy, 0.0),
                    acceleration: Vector3::new(ddx, ddy, 0.0),
                }
            }
            Trajectory::Eight3d {
                origin,
                size,
                vertical,
                period,
            } => {
                let w = TAU / period;
                let (x, dx, ddx) = sine(size, w, t);
                let (y, dy, ddy) = sine(0.5 * size, 2.0 * w, t);
                let (z, dz, ddz) = sine(vertical, 2.0 * w, t);
                TargetSample {
                    position: origin + Vector3::new(x, y, z),
                    velocity: Vector3::new(dx, dy, dz),
                    acceleration: Vector3::new(ddx, ddy, ddz),
                }
            }
            Trajectory::Rect2d {
                origin,
                width,
                height,
                period,
                sharpness: k,
            } => {
                let w = TAU / period;
                let s = w * t;
                let (sn, cs) = s.sin_cos();
                let norm = k.tanh();
                // x follows tanh(k cos s), y follows tanh(k sin s); both are
                // shifted so the path starts at the origin.
                let (tx, dtx, ddtx) = tanh_profile(k, cs, -sn, -cs);
                let (ty, dty, ddty) = tanh_profile(k, sn, cs, -sn);
                let (ax, ay) = (0.5 * width / norm, 0.5 * height / norm);
                TargetSample {
                    position: origin + Vector3::new(ax * (tx - norm), ay * ty, 0.0),
                    velocity: Vector3::new(ax * dtx * w, ay * dty * w, 0.0),
                    acceleration: Vector3::new(ax * ddtx * w * w, ay * ddty * w * w, 0.0),
                }
            }
            Trajectory::Spiral3d {
                origin,
                radius,
                period,
                climb_rate,
            } => {
                let w = TAU / period;
                let (s, c) = (w * t).sin_cos();
                TargetSample {
                    position: origin + Vector3::new(radius * s, radius * (1.0 - c), climb_rate * t),
                    velocity: Vector3::new(radius * w * c, radius * w * s, climb_rate),
                    acceleration: Vector3::new(-radius * w * w * s, radius * w * w * c, 0.0),
                }
            }
        }
    }

    /// Default shapes for the closed-path test family, sized for desk-scale
    /// flights (peak speeds around 0.5 m/s).
    pub fn eight2d_default(origin: Vector3<f64>) -> Self {
        Trajectory::Eight2d {
            origin,
            size: 1.5,
            period: 20.0,
        }
    }

    pub fn rect2d_default(origin: Vector3<f64>) -> Self {
        Trajectory::Rect2d {
            origin,
            width: 2.0,
            height: 1.5,
            period: 24.0,
            sharpness: 3.0,
        }
    }

    pub fn eight3d_default(origin: Vector3<f64>) -> Self {
        Trajectory::Eight3d {
            origin,
            size: 1.5,
            vertical: 0.5,
            period: 20.0,
        }
    }

    pub fn spiral3d_default(origin: Vector3<f64>) -> Self {
        Trajectory::Spiral3d {
            origin,
            radius: 1.0,
            period: 16.0,
            climb_rate: 0.05,
        }
    }
}

fn positive(name: &'static str, v: f64) -> Result<(), TrajectoryError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(TrajectoryError::InvalidRange { name, lo: v, hi: v })
    }
}

impl Trajectory {
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        match *self {
            Trajectory::Eight2d { size, period, .. } => {
                positive("size", size)?;
                positive("period", period)
            }
            Trajectory::Eight3d { size, period, .. } => {
                positive("size", size)?;
                positive("period", period)
            }
            Trajectory::Rect2d {
                width,
                height,
                period,
                sharpness,
                ..
            } => {
                positive("width", width)?;
                positive("height", height)?;
                positive("period", period)?;
                positive("sharpness", sharpness)
            }
            Trajectory::Spiral3d { radius, period, .. } => {
                positive("radius", radius)?;
                positive("period", period)
            }
            Trajectory::Cubic { direction, .. } if direction.iter().any(|x| !x.is_finite()) => {
                Err(TrajectoryError::InvalidRange {
                    name: "direction",
                    lo: f64::NAN,
                    hi: f64::NAN,
                })
            }
            _ => Ok(()),
        }
    }
}
