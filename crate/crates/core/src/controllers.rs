//! Model-based tracking baselines.
//!
//! * [`dare_solve`]: discrete algebraic Riccati equation by fixed-point
//!   iteration, used to synthesize every linear gain below.
//! * LQG: a per-axis Kalman filter on relative position, relative velocity
//!   and target acceleration, an LQR on the relative double integrator, and a
//!   feedback-linearizing map from desired acceleration to thrust and body
//!   rates. The privileged variant skips the filter and reads ground truth.
//! * PID: an outer loop on bounding-box errors producing roll, pitch, yaw
//!   rate and thrust, and a proportional inner attitude loop.
//!
//! Controller memory is an explicit value owned by the caller.

use nalgebra::{DMatrix, Matrix3, RowVector2, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{Command, VehicleParams};
use crate::perception::{estimate_relative, BBox, CameraModel, PerceptionError, RelativeState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error(
        "Riccati iteration did not converge in {iterations} iterations \
         (last update {last_update:.3e}, closed-loop spectral radius {spectral_radius:.6}, open-loop {open_loop_radius:.6})"
    )]
    DareNotConverged {
        iterations: usize,
        last_update: f64,
        spectral_radius: f64,
        open_loop_radius: f64,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix R + BᵀPB is singular")]
    Singular,
    #[error("estimator has no measurement yet")]
    EstimatorUninitialized,
    #[error("attitude is required")]
    MissingAttitude,
    #[error("ground-truth tracker {0} is required")]
    MissingTrackerState(&'static str),
    #[error("closed loop not stable: {0}")]
    Unstable(String),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
}

/// Stabilizing Riccati solution and the associated state-feedback gain.
#[derive(Debug, Clone, PartialEq)]
pub struct DareSolution {
    pub p: DMatrix<f64>,
    /// `K = (R + BᵀPB)⁻¹ BᵀPA`, so `u = −Kx`.
    pub k: DMatrix<f64>,
    pub iterations: usize,
}

pub const DARE_DEFAULT_TOL: f64 = 1e-12;
pub const DARE_DEFAULT_MAX_ITER: usize = 200_000;

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn riccati_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>, ControlError> {
    let btp = b.transpose() * p;
    let s = r + &btp * b;
    let rhs = &btp * a;
    s.lu().solve(&rhs).ok_or(ControlError::Singular)
}

/// Solves `P = AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA + Q` by iterating the Riccati
/// recursion from `P₀ = Q`.
///
/// Stops when the largest entry of `P_{k+1} − P_k` drops below
/// `tol · max(1, ‖P‖_max)`.
pub fn dare_solve(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DareSolution, ControlError> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(ControlError::Dimension(format!(
            "A {:?}, B {:?}, Q {:?}, R {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        )));
    }
    let at = a.transpose();
    let mut p = q.clone();
    let mut last_update = f64::INFINITY;
    for it in 1..=max_iter {
        let k = riccati_gain(a, b, r, &p)?;
        let ap = &at * &p;
        let mut next = &ap * a - &ap * b * &k + q;
        // Keep the iterate exactly symmetric.
        next = 0.5 * (&next + next.transpose());
        last_update = (&next - &p).amax();
        p = next;
        if last_update < tol * p.amax().max(1.0) {
            let k = riccati_gain(a, b, r, &p)?;
            return Ok(DareSolution { p, k, iterations: it });
        }
    }
    let k = riccati_gain(a, b, r, &p)?;
    Err(ControlError::DareNotConverged {
        iterations: max_iter,
        last_update,
        spectral_radius: spectral_radius(&(a - b * &k)),
        open_loop_radius: spectral_radius(a),
    })
}

/// Attitude and (for privileged controllers) translational state of the tracker.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OwnState {
    pub attitude: Option<UnitQuaternion<f64>>,
    pub velocity: Option<Vector3<f64>>,
    pub acceleration: Option<Vector3<f64>>,
}

impl OwnState {
    pub fn attitude_only(q: UnitQuaternion<f64>) -> Self {
        Self {
            attitude: Some(q),
            ..Default::default()
        }
    }
}

/// Tuning shared by both LQG variants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqgConfig {
    pub position_weight: f64,
    pub velocity_weight: f64,
    pub input_weight: f64,
    pub yaw_weight: f64,
    pub yaw_input_weight: f64,
    /// Proportional gain of the roll/pitch attitude loop, 1/s.
    pub attitude_gain: f64,
    /// Largest commanded tilt, rad.
    pub max_tilt: f64,
    /// Spectral density of the target-acceleration random walk, m²/s⁵.
    pub target_jerk_psd: f64,
    /// Measurement standard deviation floor, m.
    pub measurement_floor: f64,
    /// Initial standard deviation of the relative-velocity estimate, m/s.
    pub initial_velocity_sigma: f64,
    /// Initial standard deviation of the target-acceleration estimate, m/s².
    pub initial_accel_sigma: f64,
}

impl Default for LqgConfig {
    fn default() -> Self {
        Self {
            position_weight: 25.0,
            velocity_weight: 4.0,
            input_weight: 1.0,
            yaw_weight: 25.0,
            yaw_input_weight: 1.0,
            attitude_gain: 16.0,
            max_tilt: 0.6,
            target_jerk_psd: 4.0,
            measurement_floor: 0.005,
            initial_velocity_sigma: 0.5,
            initial_accel_sigma: 1.0,
        }
    }
}

/// Solved gains of the LQG baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct LqgDesign {
    pub dt: f64,
    pub cfg: LqgConfig,
    /// Nominal vehicle model used by feedback linearization.
    pub vehicle: VehicleParams,
    pub d_r: f64,
    pub camera: CameraModel,
    pub target_radius: f64,
    /// Per-axis LQR gain on `[e, ė]`.
    pub k_translation: RowVector2<f64>,
    pub k_yaw: f64,
    /// Per-axis estimator model.
    pub a_est: Matrix3<f64>,
    pub b_est: Vector3<f64>,
    pub process_noise: Matrix3<f64>,
    /// Steady-state predictor gain, for diagnostics.
    pub steady_state_gain: Vector3<f64>,
    pub controller_radius: f64,
    pub estimator_radius: f64,
}

fn dm(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

impl LqgDesign {
    pub fn new(
        cfg: LqgConfig,
        vehicle: VehicleParams,
        d_r: f64,
        camera: CameraModel,
        target_radius: f64,
        dt: f64,
    ) -> Result<Self, ControlError> {
        let h = dt;
        let a = dm(2, 2, &[1.0, h, 0.0, 1.0]);
        let b = dm(2, 1, &[0.5 * h * h, h]);
        let q = dm(2, 2, &[cfg.position_weight, 0.0, 0.0, cfg.velocity_weight]);
        let r = dm(1, 1, &[cfg.input_weight]);
        let lqr = dare_solve(&a, &b, &q, &r, DARE_DEFAULT_TOL, DARE_DEFAULT_MAX_ITER)?;
        let controller_radius = spectral_radius(&(&a - &b * &lqr.k));

        let yaw = dare_solve(
            &dm(1, 1, &[1.0]),
            &dm(1, 1, &[h]),
            &dm(1, 1, &[cfg.yaw_weight]),
            &dm(1, 1, &[cfg.yaw_input_weight]),
            DARE_DEFAULT_TOL,
            DARE_DEFAULT_MAX_ITER,
        )?;

        // [r, ṙ, a_target] with the tracker acceleration as known input.
        let a_est = Matrix3::new(1.0, h, 0.5 * h * h, 0.0, 1.0, h, 0.0, 0.0, 1.0);
        let b_est = Vector3::new(-0.5 * h * h, -h, 0.0);
        // Continuous white jerk driving the acceleration state, discretized.
        let qj = cfg.target_jerk_psd;
        let process_noise = qj * Matrix3::new(
            h.powi(5) / 20.0,
            h.powi(4) / 8.0,
            h.powi(3) / 6.0,
            h.powi(4) / 8.0,
            h.powi(3) / 3.0,
            h * h / 2.0,
            h.powi(3) / 6.0,
            h * h / 2.0,
            h,
        );
        let v = cfg.measurement_floor.powi(2);
        let a_d = DMatrix::from_iterator(3, 3, a_est.iter().cloned());
        let c_d = dm(1, 3, &[1.0, 0.0, 0.0]);
        let w_d = DMatrix::from_iterator(3, 3, process_noise.iter().cloned());
        let dual = dare_solve(
            &a_d.transpose(),
            &c_d.transpose(),
            &w_d,
            &dm(1, 1, &[v]),
            DARE_DEFAULT_TOL,
            DARE_DEFAULT_MAX_ITER,
        )?;
        let predictor = dual.k.transpose();
        let estimator_radius = spectral_radius(&(&a_d - &predictor * &c_d));
        if controller_radius >= 1.0 || estimator_radius >= 1.0 {
            return Err(ControlError::Unstable(format!(
                "controller radius {controller_radius}, estimator radius {estimator_radius}"
            )));
        }
        Ok(Self {
            dt,
            cfg,
            vehicle,
            d_r,
            camera,
            target_radius,
            k_translation: RowVector2::new(lqr.k[(0, 0)], lqr.k[(0, 1)]),
            k_yaw: yaw.k[(0, 0)],
            a_est,
            b_est,
            process_noise,
            steady_state_gain: Vector3::new(predictor[(0, 0)], predictor[(1, 0)], predictor[(2, 0)]),
            controller_radius,
            estimator_radius,
        })
    }

    fn measurement_variance(&self, range: f64, noise_px: f64, radius_jitter: f64) -> f64 {
        let lateral = noise_px * range / self.camera.focal();
        let longitudinal = radius_jitter * range;
        self.cfg.measurement_floor.powi(2) + lateral.powi(2).max(longitudinal.powi(2))
    }
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Desired relative acceleration law plus feedback linearization.
///
/// `r`, `r_dot`: world-frame relative position and velocity; `target_accel`:
/// world-frame target acceleration estimate. Returns the command and the
/// tracker acceleration it asks for.
fn lqg_law(
    design: &LqgDesign,
    attitude: &UnitQuaternion<f64>,
    r: &Vector3<f64>,
    r_dot: &Vector3<f64>,
    target_accel: &Vector3<f64>,
    tracker_velocity: Option<&Vector3<f64>>,
) -> (Command, Vector3<f64>) {
    let veh = &design.vehicle;
    let (_, _, yaw) = attitude.euler_angles();
    let horizontal = (r.x * r.x + r.y * r.y).sqrt();
    let bearing = if horizontal > 1e-6 { r.y.atan2(r.x) } else { yaw };
    let b_hat = Vector3::new(bearing.cos(), bearing.sin(), 0.0);

    let e = r - design.d_r * b_hat;
    let mut tracker_accel = Vector3::zeros();
    for i in 0..3 {
        let w = -(design.k_translation * Vector2::new(e[i], r_dot[i]))[0];
        tracker_accel[i] = target_accel[i] - w;
    }
    let g = veh.gravity.norm();
    let lateral_cap = design.cfg.max_tilt.tan() * g;
    let lateral = tracker_accel.xy().norm();
    if lateral > lateral_cap {
        let s = lateral_cap / lateral;
        tracker_accel.x *= s;
        tracker_accel.y *= s;
    }
    tracker_accel.z = tracker_accel.z.clamp(-0.8 * g, veh.limits.thrust_max / veh.mass - g);

    let mut force = veh.mass * (tracker_accel + veh.gravity);
    if let Some(v) = tracker_velocity {
        force += veh.drag.component_mul(v);
    }
    let thrust = force.norm().clamp(veh.limits.thrust_min, veh.limits.thrust_max);
    let b3 = force.normalize();

    let b1c = Vector3::new(bearing.cos(), bearing.sin(), 0.0);
    let b2 = b3.cross(&b1c).normalize();
    let b1 = b2.cross(&b3);
    let r_des = Matrix3::from_columns(&[b1, b2, b3]);
    let r_now = attitude.to_rotation_matrix().into_inner();
    let e_r = 0.5 * vee(&(r_des.transpose() * r_now - r_now.transpose() * r_des));

    let bearing_rate = if horizontal > 1e-6 {
        (r.x * r_dot.y - r.y * r_dot.x) / (horizontal * horizontal)
    } else {
        0.0
    };
    let k_att = design.cfg.attitude_gain;
    let rates = Vector3::new(-k_att * e_r.x, -k_att * e_r.y, -design.k_yaw * e_r.z + bearing_rate);
    let cmd = veh.limits.saturate(&Command::new(thrust, rates));
    (cmd, tracker_accel)
}

/// Ground-truth variant: no estimator, relative state read directly.
///
/// Requires the tracker attitude and acceleration; the velocity is used for
/// drag compensation when present.
pub fn privileged_lqg_step(design: &LqgDesign, rel: &RelativeState, own: &OwnState) -> Result<Command, ControlError> {
    let attitude = own.attitude.ok_or(ControlError::MissingAttitude)?;
    let tracker_accel = own.acceleration.ok_or(ControlError::MissingTrackerState("acceleration"))?;
    let r = attitude * rel.position;
    let r_dot = attitude * rel.velocity;
    let target_accel = attitude * rel.acceleration + tracker_accel;
    Ok(lqg_law(design, &attitude, &r, &r_dot, &target_accel, own.velocity.as_ref()).0)
}

/// Per-axis Kalman estimate of `[r, ṙ, a_target]`, plus the open-loop
/// thrust estimate used to reconstruct the tracker's own acceleration.
#[derive(Debug, Clone, PartialEq)]
pub struct LqgMemory {
    estimate: Option<[Vector3<f64>; 3]>,
    covariance: [Matrix3<f64>; 3],
    thrust: Option<f64>,
    last_tracker_accel: Vector3<f64>,
}

impl Default for LqgMemory {
    fn default() -> Self {
        Self::new()
    }
}

impl LqgMemory {
    pub fn new() -> Self {
        Self {
            estimate: None,
            covariance: [Matrix3::zeros(); 3],
            thrust: None,
            last_tracker_accel: Vector3::zeros(),
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.estimate.is_some()
    }

    /// Sum of the per-axis covariance traces.
    pub fn covariance_trace(&self) -> f64 {
        self.covariance.iter().map(|p| p.trace()).sum()
    }

    pub fn relative_position(&self) -> Option<Vector3<f64>> {
        self.estimate.map(|e| Vector3::new(e[0][0], e[1][0], e[2][0]))
    }
}

/// Detector noise assumed by the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeasurementModel {
    pub pixel_sigma: f64,
    pub radius_jitter: f64,
}

/// Vision-fed LQG: bounding box → relative position → Kalman → LQR →
/// feedback linearization. A missed detection runs the prediction only.
pub fn lqg_step(
    design: &LqgDesign,
    memory: &mut LqgMemory,
    detection: Option<&BBox>,
    attitude: Option<&UnitQuaternion<f64>>,
    measurement: &MeasurementModel,
) -> Result<Command, ControlError> {
    let attitude = attitude.ok_or(ControlError::MissingAttitude)?;
    let measured = detection
        .map(|b| estimate_relative(b, &design.camera, design.target_radius).map(|y| attitude * y))
        .transpose()?;
    let veh = &design.vehicle;
    // Tracker acceleration from the known attitude and the nominal thrust lag;
    // drag is left to the target-acceleration state.
    let thrust = memory.thrust.unwrap_or_else(|| veh.hover_thrust());
    let own_accel = attitude * Vector3::z() * (thrust / veh.mass) - veh.gravity;

    match (&mut memory.estimate, measured) {
        (None, None) => return Err(ControlError::EstimatorUninitialized),
        (None, Some(r)) => {
            let p0 = Matrix3::from_diagonal(&Vector3::new(
                design.cfg.measurement_floor.powi(2),
                design.cfg.initial_velocity_sigma.powi(2),
                design.cfg.initial_accel_sigma.powi(2),
            ));
            memory.estimate = Some([0, 1, 2].map(|i| Vector3::new(r[i], 0.0, 0.0)));
            memory.covariance = [p0; 3];
        }
        (Some(est), meas) => {
            let input = 0.5 * (memory.last_tracker_accel + own_accel);
            for i in 0..3 {
                est[i] = design.a_est * est[i] + design.b_est * input[i];
                let p = &mut memory.covariance[i];
                *p = design.a_est * *p * design.a_est.transpose() + design.process_noise;
            }
            if let Some(r) = meas {
                let range = r.norm();
                let v = design.measurement_variance(range, measurement.pixel_sigma, measurement.radius_jitter);
                for i in 0..3 {
                    let p = memory.covariance[i];
                    let s = p[(0, 0)] + v;
                    let gain = p.column(0) / s;
                    est[i] += gain * (r[i] - est[i][0]);
                    // Joseph form keeps the covariance symmetric positive definite.
                    let mut ikc = Matrix3::identity();
                    ikc.set_column(0, &(Vector3::x() - gain));
                    let updated = ikc * p * ikc.transpose() + gain * gain.transpose() * v;
                    memory.covariance[i] = 0.5 * (updated + updated.transpose());
                }
            }
        }
    }
    let est = memory.estimate.expect("estimate initialized above");
    let r = Vector3::new(est[0][0], est[1][0], est[2][0]);
    let r_dot = Vector3::new(est[0][1], est[1][1], est[2][1]);
    let a_t = Vector3::new(est[0][2], est[1][2], est[2][2]);
    let (cmd, _) = lqg_law(design, attitude, &r, &r_dot, &a_t, None);
    memory.last_tracker_accel = own_accel;
    memory.thrust = Some(cmd.thrust + (thrust - cmd.thrust) * (-veh.k_f * design.dt).exp());
    Ok(cmd)
}

/// Gains of one PID channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidChannel {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Anti-windup bound on the integral state.
    pub integral_limit: f64,
}

impl PidChannel {
    const fn new(kp: f64, ki: f64, kd: f64, integral_limit: f64) -> Self {
        Self {
            kp,
            ki,
            kd,
            integral_limit,
        }
    }
}

/// Cascade PID tuning. Outer-loop errors: range error (m) for pitch,
/// normalized horizontal image coordinate `(cx − W/2)/f` for roll and yaw
/// rate, and vertical image error scaled to meters `−(cy − H/2)/f · x̂` for
/// thrust.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PidGains {
    /// Range error → pitch, rad per m.
    pub pitch: PidChannel,
    /// Horizontal image error → roll, rad per unit.
    pub roll: PidChannel,
    /// Horizontal image error → yaw rate, rad/s per unit.
    pub yaw_rate: PidChannel,
    /// Vertical error → thrust correction, N per m.
    pub thrust: PidChannel,
    /// Inner attitude loop, (rad/s) per rad.
    pub attitude_kp: f64,
    pub max_tilt: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            pitch: PidChannel::new(0.8, 0.05, 0.6, 1.0),
            roll: PidChannel::new(0.5, 0.0, 0.5, 1.0),
            yaw_rate: PidChannel::new(4.0, 0.0, 0.2, 1.0),
            thrust: PidChannel::new(15.0, 2.0, 6.0, 2.0),
            attitude_kp: 8.0,
            max_tilt: 0.6,
        }
    }
}

/// Integrators and previous errors of the cascade PID.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PidMemory {
    /// Pitch, roll/yaw and thrust channels.
    integral: [f64; 3],
    previous: Option<[f64; 3]>,
}

impl PidMemory {
    pub fn integrals(&self) -> [f64; 3] {
        self.integral
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PidDesign {
    pub gains: PidGains,
    pub vehicle: VehicleParams,
    pub d_r: f64,
    pub camera: CameraModel,
    pub target_radius: f64,
    pub dt: f64,
}

/// One step of the cascade PID. On a miss, roll/pitch setpoints and the yaw
/// rate go to zero, integrators are frozen and the derivative history is
/// dropped.
pub fn pid_step(
    design: &PidDesign,
    memory: &mut PidMemory,
    detection: Option<&BBox>,
    attitude: Option<&UnitQuaternion<f64>>,
) -> Result<Command, ControlError> {
    let attitude = attitude.ok_or(ControlError::MissingAttitude)?;
    let g = &design.gains;
    let veh = &design.vehicle;
    let (roll, pitch, _) = attitude.euler_angles();
    let hover = veh.mass * veh.gravity.norm();

    let (roll_sp, pitch_sp, yaw_rate, thrust_correction) = match detection {
        None => {
            memory.previous = None;
            (0.0, 0.0, 0.0, 0.0)
        }
        Some(b) => {
            let y = estimate_relative(b, &design.camera, design.target_radius)?;
            let f = design.camera.focal();
            let horizontal = (b.cx - 0.5 * design.camera.width as f64) / f;
            let vertical = -(b.cy - 0.5 * design.camera.height as f64) / f * y.x;
            let errors = [y.x - design.d_r, horizontal, vertical];
            let deriv = match memory.previous {
                Some(prev) => [0, 1, 2].map(|i| (errors[i] - prev[i]) / design.dt),
                None => [0.0; 3],
            };
            let channels = [&g.pitch, &g.roll, &g.thrust];
            for i in 0..3 {
                let lim = channels[i].integral_limit;
                memory.integral[i] = (memory.integral[i] + errors[i] * design.dt).clamp(-lim, lim);
            }
            memory.previous = Some(errors);
            let pid = |c: &PidChannel, i: usize| c.kp * errors[i] + c.ki * memory.integral[i] + c.kd * deriv[i];
            let pitch_sp = pid(&g.pitch, 0).clamp(-g.max_tilt, g.max_tilt);
            let roll_sp = pid(&g.roll, 1).clamp(-g.max_tilt, g.max_tilt);
            let yaw_rate = -(g.yaw_rate.kp * errors[1] + g.yaw_rate.kd * deriv[1]);
            (roll_sp, pitch_sp, yaw_rate, pid(&g.thrust, 2))
        }
    };
    let tilt = (roll.cos() * pitch.cos()).max(0.5);
    let thrust = (hover + thrust_correction) / tilt;
    let rates = Vector3::new(g.attitude_kp * (roll_sp - roll), g.attitude_kp * (pitch_sp - pitch), yaw_rate);
    Ok(veh.limits.saturate(&Command::new(thrust, rates)))
}
