//! What the tracker sees: relative state, spherical coordinates, camera
//! projection, a synthetic detector, a small rasterizer and observation
//! stacking.

use std::collections::VecDeque;
use std::f64::consts::FRAC_PI_2;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::VehicleState;
use crate::trajectories::TargetSample;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerceptionError {
    #[error("direction undefined for a zero relative position")]
    ZeroVector,
    #[error("bounding box radius must be positive, got {0}")]
    NonPositiveRadius(f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

/// Target position, velocity and acceleration relative to the tracker,
/// expressed in the tracker body frame (x is the optical axis).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
}

pub fn relative_state(tracker: &VehicleState, tracker_accel: &Vector3<f64>, target: &TargetSample) -> RelativeState {
    let inv = tracker.attitude.inverse();
    RelativeState {
        position: inv * (target.position - tracker.position),
        velocity: inv * (target.velocity - tracker.velocity),
        acceleration: inv * (target.acceleration - tracker_accel),
    }
}

/// Range, elevation and azimuth in the body frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spherical {
    pub rho: f64,
    /// Elevation, `asin(y_z / ρ)`.
    pub theta: f64,
    /// Azimuth, `atan2(y_y, y_x)`.
    pub phi: f64,
}

impl Spherical {
    pub fn to_cartesian(&self) -> Vector3<f64> {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        self.rho * Vector3::new(ct * cp, ct * sp, st)
    }
}

pub fn spherical(y: &Vector3<f64>) -> Result<Spherical, PerceptionError> {
    let rho = y.norm();
    if rho == 0.0 || !rho.is_finite() {
        return Err(PerceptionError::ZeroVector);
    }
    Ok(Spherical {
        rho,
        theta: (y.z / rho).clamp(-1.0, 1.0).asin(),
        phi: y.y.atan2(y.x),
    })
}

/// `|angle| / (fov/2)`: below one means the angle is inside the half-FoV.
///
/// Shared by the visibility test and the per-axis tracking reward so both
/// agree bit-for-bit at the boundary.
pub fn fov_fraction(angle: f64, fov: f64) -> f64 {
    angle.abs() / (0.5 * fov)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraModel {
    /// Full field-of-view amplitude, rad. Applied to both image axes.
    pub fov: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            fov: FRAC_PI_2,
            width: 84,
            height: 84,
        }
    }
}

impl CameraModel {
    /// Focal length in pixels, from the horizontal FoV.
    pub fn focal(&self) -> f64 {
        0.5 * self.width as f64 / (0.5 * self.fov).tan()
    }

    pub fn validate(&self) -> Result<(), PerceptionError> {
        if !(self.fov > 0.0 && self.fov < std::f64::consts::PI) {
            return Err(PerceptionError::InvalidCamera(format!("fov {} outside (0, π)", self.fov)));
        }
        if self.width < 8 || self.height < 8 {
            return Err(PerceptionError::InvalidCamera(format!(
                "image {}x{} smaller than 8x8",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn is_visible(&self, y: &Vector3<f64>) -> bool {
        y.x > 0.0 && fov_fraction(y.y.atan2(y.x), self.fov) < 1.0 && fov_fraction(y.z.atan2(y.x), self.fov) < 1.0
    }
}

/// Target bounding disc in pixel coordinates (origin at the top-left corner).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub confidence: f64,
}

/// Pinhole projection of a sphere of radius `target_radius` at body position `y`.
pub fn project(y: &Vector3<f64>, cam: &CameraModel, target_radius: f64) -> Option<BBox> {
    if !cam.is_visible(y) {
        return None;
    }
    let f = cam.focal();
    Some(BBox {
        cx: 0.5 * cam.width as f64 - f * y.y / y.x,
        cy: 0.5 * cam.height as f64 - f * y.z / y.x,
        radius: f * target_radius / y.x,
        confidence: 1.0,
    })
}

/// Inverse of [`project`].
pub fn estimate_relative(bbox: &BBox, cam: &CameraModel, target_radius: f64) -> Result<Vector3<f64>, PerceptionError> {
    if !(bbox.radius > 0.0) {
        return Err(PerceptionError::NonPositiveRadius(bbox.radius));
    }
    let f = cam.focal();
    let x = f * target_radius / bbox.radius;
    Ok(Vector3::new(
        x,
        -x * (bbox.cx - 0.5 * cam.width as f64) / f,
        -x * (bbox.cy - 0.5 * cam.height as f64) / f,
    ))
}

/// Noise model of the synthetic detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorNoise {
    /// Standard deviation of the center error, pixels.
    pub pixel_sigma: f64,
    pub miss_probability: f64,
    /// Standard deviation of the multiplicative radius error.
    pub radius_jitter: f64,
}

impl Default for DetectorNoise {
    fn default() -> Self {
        Self {
            pixel_sigma: 0.0,
            miss_probability: 0.0,
            radius_jitter: 0.0,
        }
    }
}

impl DetectorNoise {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.pixel_sigma >= 0.0 && self.pixel_sigma.is_finite()) {
            return Err("pixel_sigma must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.miss_probability) {
            return Err("miss_probability must lie in [0, 1)".into());
        }
        if !(self.radius_jitter >= 0.0 && self.radius_jitter.is_finite()) {
            return Err("radius_jitter must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn is_noiseless(&self) -> bool {
        self.pixel_sigma == 0.0 && self.miss_probability == 0.0 && self.radius_jitter == 0.0
    }
}

/// Synthetic stand-in for a learned single-object tracker.
///
/// Draws a fixed number of variates per call whatever the branch taken, so a
/// detector stream stays aligned across episodes that differ only in what is
/// visible.
pub fn detect(truth: Option<&BBox>, noise: &DetectorNoise, cam: &CameraModel, rng: &mut impl Rng) -> Option<BBox> {
    let u: f64 = rng.random();
    let n: [f64; 3] = [0; 3].map(|_| rng.sample(rand_distr::StandardNormal));
    let b = truth?;
    if noise.is_noiseless() {
        return Some(*b);
    }
    if u < noise.miss_probability {
        return None;
    }
    let (w, h) = (cam.width as f64, cam.height as f64);
    let radius = (b.radius * (1.0 + noise.radius_jitter * n[2])).max(0.5);
    Some(BBox {
        cx: (b.cx + noise.pixel_sigma * n[0]).clamp(0.0, w),
        cy: (b.cy + noise.pixel_sigma * n[1]).clamp(0.0, h),
        radius,
        confidence: b.confidence,
    })
}

/// Row-major 8-bit image; `channels` is 1 (gray) or 3 (gray triplicated).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn pixel(&self, x: u32, y: u32) -> u8 {
        self.data[((y * self.width + x) * self.channels as u32) as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub background: u8,
    pub target_intensity: u8,
    pub clutter_discs: u32,
    pub clutter_intensity: u8,
    /// Target sphere radius, m.
    pub target_radius: f64,
    pub rgb: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            background: 48,
            target_intensity: 255,
            clutter_discs: 0,
            clutter_intensity: 140,
            target_radius: 0.15,
            rgb: false,
        }
    }
}

fn fill_disc(data: &mut [u8], width: u32, height: u32, cx: f64, cy: f64, r: f64, value: u8) {
    let x0 = ((cx - r).floor().max(0.0)) as i64;
    let x1 = ((cx + r).ceil().min(width as f64)) as i64;
    let y0 = ((cy - r).floor().max(0.0)) as i64;
    let y1 = ((cy + r).ceil().min(height as f64)) as i64;
    for py in y0..y1 {
        for px in x0..x1 {
            let dx = px as f64 + 0.5 - cx;
            let dy = py as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= r * r {
                data[(py as u32 * width + px as u32) as usize] = value;
            }
        }
    }
    // Sub-pixel discs still mark the pixel holding their center.
    if cx >= 0.0 && cy >= 0.0 && cx < width as f64 && cy < height as f64 {
        data[(cy as u32 * width + cx as u32) as usize] = value;
    }
}

/// Renders the target as a filled disc over a flat (optionally cluttered) background.
pub fn render_frame(y: &Vector3<f64>, cam: &CameraModel, scene: &SceneConfig, seed: u64) -> Frame {
    let (w, h) = (cam.width, cam.height);
    let mut data = vec![scene.background; (w * h) as usize];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clutter_value = if scene.clutter_intensity == scene.target_intensity {
        scene.clutter_intensity.wrapping_sub(1)
    } else {
        scene.clutter_intensity
    };
    for _ in 0..scene.clutter_discs {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let r = rng.random_range(1.0..(w.min(h) as f64 / 8.0).max(1.5));
        fill_disc(&mut data, w, h, cx, cy, r, clutter_value);
    }
    if let Some(b) = project(y, cam, scene.target_radius) {
        fill_disc(&mut data, w, h, b.cx, b.cy, b.radius, scene.target_intensity);
    }
    if scene.rgb {
        data = data.iter().flat_map(|v| [*v, *v, *v]).collect();
    }
    Frame {
        width: w,
        height: h,
        channels: if scene.rgb { 3 } else { 1 },
        data,
    }
}

/// Sliding window of the `H` most recent observations, newest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationStack<T> {
    len: usize,
    items: VecDeque<T>,
}

impl<T: Clone> ObservationStack<T> {
    pub fn new(len: usize) -> Self {
        assert!(len > 0, "observation history must hold at least one item");
        Self {
            len,
            items: VecDeque::with_capacity(len),
        }
    }

    /// Adds the newest item; the first push fills the whole window.
    pub fn push(&mut self, item: T) {
        if self.items.is_empty() {
            self.items.extend(std::iter::repeat_n(item, self.len));
            return;
        }
        self.items.pop_back();
        self.items.push_front(item);
    }

    pub fn items(&self) -> impl ExactSizeIterator<Item = &T> {
        self.items.iter()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.items.iter().cloned().collect()
    }

    pub fn newest(&self) -> Option<&T> {
        self.items.front()
    }

    pub fn capacity(&self) -> usize {
        self.len
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }
}
