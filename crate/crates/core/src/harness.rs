//! Episode orchestration: configuration, seeding, the step loop, logging and
//! benchmark suites.
//!
//! Step `k` observes state `k`, asks the policy for `u(k)`, scores the pair
//! (reward and tracking scores both use state `k` and `u(k)`), then
//! integrates to state `k + 1`.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::controllers::{
    lqg_step, pid_step, privileged_lqg_step, ControlError, LqgConfig, LqgDesign, LqgMemory, MeasurementModel, OwnState,
    PidDesign, PidGains, PidMemory,
};
use crate::dynamics::{
    body_acceleration, body_acceleration_simple, randomize_params, step_augmented, step_simple, AugmentedVehicleState,
    Command, DynamicsError, ModelKind, Randomization, VehicleParams, VehicleState,
};
use crate::metrics::{aggregate, markdown_table, score_sample, tables_to_csv, tables_to_markdown, ScoreConfig, ScoreSample, ScoreTable};
use crate::perception::{
    detect, project, relative_state, render_frame, spherical, BBox, CameraModel, DetectorNoise, Frame, ObservationStack,
    RelativeState, SceneConfig,
};
use crate::reward::{total_reward, RewardConfig, RewardTerms};
use crate::trajectories::{sample_sinusoid, sample_with_peak_velocity, Interval, SinusoidRanges, TargetSample, Trajectory};

/// Environment variable naming the directory searched for relative config paths.
pub const CONFIG_DIR_ENV: &str = "VATRACK_CONFIG_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ObservationMode {
    Frames,
    #[default]
    Bboxes,
    Privileged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservationConfig {
    pub mode: ObservationMode,
    /// Length of the actor history window.
    pub history: usize,
    /// Radius of the spherical target, m.
    pub target_radius: f64,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            mode: ObservationMode::default(),
            history: 3,
            target_radius: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomizationConfig {
    pub enabled: bool,
    pub fraction: f64,
    pub max_settling_time: f64,
}

impl Default for RandomizationConfig {
    fn default() -> Self {
        let r = Randomization::default();
        Self {
            enabled: false,
            fraction: r.fraction,
            max_settling_time: r.max_settling_time,
        }
    }
}

/// Target motion. Every trajectory is re-anchored so it starts `d_r` ahead
/// of the spawned tracker along its optical axis; offsets are world-frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    /// Per-axis sinusoid drawn from `ranges`, optionally rescaled to a peak speed.
    RandomSinusoid {
        #[serde(default)]
        peak_velocity: Option<f64>,
        #[serde(default)]
        ranges: SinusoidRanges,
    },
    Fixed { trajectory: Trajectory },
}

impl Default for TargetSpec {
    fn default() -> Self {
        TargetSpec::RandomSinusoid {
            peak_velocity: None,
            ranges: SinusoidRanges::default(),
        }
    }
}

/// Tracker spawn box: uniform position around `center`, level attitude,
/// uniform yaw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpawnConfig {
    pub center: Vector3<f64>,
    pub half_extent: Vector3<f64>,
    pub yaw: Interval,
}

impl Default for SpawnConfig {
    fn default() -> Self {
        Self {
            center: Vector3::zeros(),
            half_extent: Vector3::new(2.0, 2.0, 2.0),
            yaw: Interval::new(-std::f64::consts::PI, std::f64::consts::PI),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControllerSpec {
    /// Constant hover thrust, zero rates.
    Hover,
    Lqg {
        #[serde(default)]
        config: LqgConfig,
    },
    PrivilegedLqg {
        #[serde(default)]
        config: LqgConfig,
    },
    Pid {
        #[serde(default)]
        gains: PidGains,
    },
    /// Commands come from a bridge client.
    External,
}

impl Default for ControllerSpec {
    fn default() -> Self {
        ControllerSpec::Lqg {
            config: LqgConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TerminationConfig {
    pub collision: bool,
    /// Terminate once the target has been out of view this long, s. Absent
    /// means never.
    pub lost_grace: Option<f64>,
}

impl Default for TerminationConfig {
    fn default() -> Self {
        Self {
            collision: true,
            lost_grace: None,
        }
    }
}

/// Full description of one episode. An empty file yields the defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    /// Control period, s.
    pub dt: f64,
    /// Episode cap, s.
    pub duration: f64,
    pub model: ModelKind,
    /// Nominal vehicle; controllers always see these values.
    pub vehicle: VehicleParams,
    pub randomization: RandomizationConfig,
    pub reward: RewardConfig,
    pub camera: CameraModel,
    pub detector: DetectorNoise,
    pub scene: SceneConfig,
    pub observation: ObservationConfig,
    pub target: TargetSpec,
    pub spawn: SpawnConfig,
    pub controller: ControllerSpec,
    pub termination: TerminationConfig,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            dt: 0.02,
            duration: 40.0,
            model: ModelKind::default(),
            vehicle: VehicleParams::default(),
            randomization: RandomizationConfig::default(),
            reward: RewardConfig::default(),
            camera: CameraModel::default(),
            detector: DetectorNoise::default(),
            scene: SceneConfig::default(),
            observation: ObservationConfig::default(),
            target: TargetSpec::default(),
            spawn: SpawnConfig::default(),
            controller: ControllerSpec::default(),
            termination: TerminationConfig::default(),
        }
    }
}

/// One schema violation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config:\n{}", issues.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n"))]
    Invalid { issues: Vec<ConfigIssue> },
}

fn finite_positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

impl EpisodeConfig {
    /// Checks physical ranges; every issue carries its key path.
    pub fn validate(&self) -> Result<(), Vec<ConfigIssue>> {
        let mut issues = Vec::new();
        let mut bad = |path: &str, message: String| {
            issues.push(ConfigIssue {
                path: path.to_string(),
                message,
            })
        };
        if !finite_positive(self.dt) {
            bad("dt", format!("must be positive, got {}", self.dt));
        }
        if !finite_positive(self.duration) {
            bad("duration", format!("must be positive, got {}", self.duration));
        }
        if let Err(DynamicsError::InvalidParams { field, reason }) = self.vehicle.validate() {
            let path = match field {
                "thrust_min" | "thrust_max" | "rate_max" => format!("vehicle.limits.{field}"),
                _ => format!("vehicle.{field}"),
            };
            bad(&path, reason);
        }
        let r = &self.randomization;
        if !(r.fraction.is_finite() && (0.0..1.0).contains(&r.fraction)) {
            bad("randomization.fraction", "must lie in [0, 1)".into());
        }
        if !finite_positive(r.max_settling_time) {
            bad("randomization.max_settling_time", "must be positive".into());
        }
        if let Err((field, reason)) = self.reward.validate() {
            bad(&format!("reward.{field}"), reason.into());
        }
        if let Err(e) = self.camera.validate() {
            bad("camera", e.to_string());
        }
        if (self.camera.fov - self.reward.fov).abs() > 1e-12 {
            bad("camera.fov", "must equal reward.fov".into());
        }
        if let Err(e) = self.detector.validate() {
            bad("detector", e);
        }
        if self.observation.history == 0 {
            bad("observation.history", "must be at least 1".into());
        }
        if !finite_positive(self.observation.target_radius) {
            bad("observation.target_radius", "must be positive".into());
        }
        match &self.target {
            TargetSpec::RandomSinusoid { peak_velocity, ranges } => {
                if let Some(v) = peak_velocity {
                    if !finite_positive(*v) {
                        bad("target.peak_velocity", "must be positive".into());
                    }
                }
                if let Err(e) = ranges.validate() {
                    bad("target.ranges", e.to_string());
                }
            }
            TargetSpec::Fixed { trajectory } => {
                if let Err(e) = trajectory.validate() {
                    bad("target.trajectory", e.to_string());
                }
            }
        }
        if self.spawn.half_extent.iter().any(|h| !h.is_finite() || *h < 0.0) {
            bad("spawn.half_extent", "must be finite and non-negative".into());
        }
        if self.spawn.center.iter().any(|c| !c.is_finite()) {
            bad("spawn.center", "must be finite".into());
        }
        if let Err(e) = self.spawn.yaw.check("yaw") {
            bad("spawn.yaw", e.to_string());
        }
        if let Some(g) = self.termination.lost_grace {
            if !(g.is_finite() && g >= 0.0) {
                bad("termination.lost_grace", "must be non-negative".into());
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(issues)
        }
    }

    /// Number of control steps in a full-length episode.
    pub fn max_steps(&self) -> usize {
        ((self.duration / self.dt) - 1e-9).ceil() as usize
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex_digest(json.as_bytes())
    }

    pub fn score_config(&self) -> ScoreConfig {
        ScoreConfig {
            d_r: self.reward.d_r,
            fov: self.reward.fov,
        }
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses and validates TOML config text.
pub fn parse_config(text: &str) -> Result<EpisodeConfig, ConfigError> {
    let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Parse {
        path: String::new(),
        message: e.to_string(),
    })?;
    let cfg: EpisodeConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
        path: e.path().to_string(),
        message: e.inner().message().to_string(),
    })?;
    cfg.validate().map_err(|issues| ConfigError::Invalid { issues })?;
    Ok(cfg)
}

/// Resolves relative paths that do not exist against `$VATRACK_CONFIG_DIR`.
pub fn resolve_config_path(path: &Path) -> std::path::PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(dir) = std::env::var_os(CONFIG_DIR_ENV) {
            let candidate = Path::new(&dir).join(path);
            if candidate.exists() {
                return candidate;
            }
        }
    }
    path.to_path_buf()
}

pub fn load_config(path: &Path) -> Result<EpisodeConfig, ConfigError> {
    let path = resolve_config_path(path);
    let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

pub fn emit_config(cfg: &EpisodeConfig) -> String {
    toml::to_string(cfg).expect("config serializes to TOML")
}

/// Independent generator for the named stream of a master seed, so that
/// toggling one noise source never shifts another.
pub fn stream_rng(master: u64, name: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(name.as_bytes());
    let stream = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng
}

pub const STREAM_PARAMS: &str = "params";
pub const STREAM_TRAJECTORY: &str = "trajectory";
pub const STREAM_SPAWN: &str = "spawn";
pub const STREAM_DETECTOR: &str = "detector";
pub const STREAM_SCENE: &str = "scene";

/// Ground-truth quantities available to privileged controllers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivilegedObservation {
    pub relative: RelativeState,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
}

/// What the policy sees at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub step: usize,
    pub time: f64,
    /// Ground-truth attitude; every baseline is granted it.
    pub attitude: UnitQuaternion<f64>,
    /// Detector output, newest first, `history` long.
    pub detections: Vec<Option<BBox>>,
    /// Rendered frames, newest first; empty unless the mode is `frames`.
    pub frames: Vec<Frame>,
    pub privileged: PrivilegedObservation,
}

/// Tracker pose supplied from outside in mixed-reality mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExternalPose {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub attitude: UnitQuaternion<f64>,
    /// World-frame acceleration; if absent it is taken from the rigid-body
    /// model at the last applied thrust.
    #[serde(default)]
    pub acceleration: Option<Vector3<f64>>,
}

impl ExternalPose {
    pub fn is_finite(&self) -> bool {
        self.position.iter().chain(self.velocity.iter()).all(|x| x.is_finite())
            && self.attitude.coords.iter().all(|x| x.is_finite())
            && self.acceleration.is_none_or(|a| a.iter().all(|x| x.is_finite()))
    }

    pub fn from_record(r: &StepRecord) -> Self {
        Self {
            position: r.tracker.position,
            velocity: r.tracker.velocity,
            attitude: r.tracker.attitude,
            acceleration: Some(r.tracker_accel),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Duration,
    Collision,
    TargetLost,
    Aborted,
    Disconnected,
}

/// Everything logged for one control step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub tracker: VehicleState,
    pub omega: Vector3<f64>,
    pub thrust: f64,
    pub tracker_accel: Vector3<f64>,
    pub target: TargetSample,
    /// Command after saturation.
    pub command: Command,
    pub saturated: bool,
    pub reward: RewardTerms,
    pub score: ScoreSample,
    pub visible: bool,
    pub detected: bool,
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("episode already finished")]
    Finished,
    #[error("tracker pose for step {0} not provided")]
    MissingPose(usize),
    #[error("external pose is not finite")]
    NonFinitePose,
    #[error("external pose given but the environment runs internal dynamics")]
    NotExternal,
    #[error("controller: {0}")]
    Control(#[from] ControlError),
    #[error("dynamics: {0}")]
    Dynamics(#[from] DynamicsError),
    #[error("trajectory: {0}")]
    Trajectory(#[from] crate::trajectories::TrajectoryError),
    #[error("controller `external` needs a bridge client")]
    ExternalController,
    #[error("empty benchmark suite")]
    EmptySuite,
    #[error("{0}")]
    Other(String),
}

/// Simulated tracking episode with a gym-style interface.
pub struct Environment {
    cfg: EpisodeConfig,
    seed: u64,
    params: VehicleParams,
    state: AugmentedVehicleState,
    accel: Vector3<f64>,
    target: Trajectory,
    spawn: VehicleState,
    step: usize,
    max_steps: usize,
    detector_rng: ChaCha8Rng,
    scene_seed: u64,
    detections: ObservationStack<Option<BBox>>,
    frames: ObservationStack<Frame>,
    current: Option<Observation>,
    lost_steps: usize,
    external: bool,
    pose_pending: bool,
    finished: Option<Termination>,
}

impl Environment {
    /// Builds and resets an episode with internal dynamics.
    pub fn new(cfg: EpisodeConfig, seed: u64) -> Result<Self, HarnessError> {
        Self::build(cfg, seed, false)
    }

    /// Mixed-reality episode: the tracker pose of every step comes from
    /// [`Environment::set_pose`]. Spawn and target are seeded as usual.
    pub fn new_external(cfg: EpisodeConfig, seed: u64) -> Result<Self, HarnessError> {
        Self::build(cfg, seed, true)
    }

    fn build(cfg: EpisodeConfig, seed: u64, external: bool) -> Result<Self, HarnessError> {
        cfg.validate()
            .map_err(|issues| HarnessError::Config(ConfigError::Invalid { issues }))?;
        let params = if cfg.randomization.enabled {
            let r = Randomization {
                fraction: cfg.randomization.fraction,
                max_settling_time: cfg.randomization.max_settling_time,
            };
            randomize_params(&cfg.vehicle, &r, stream_rng(seed, STREAM_PARAMS).next_u64())
        } else {
            cfg.vehicle
        };

        let mut spawn_rng = stream_rng(seed, STREAM_SPAWN);
        let mut position = cfg.spawn.center;
        for i in 0..3 {
            let h = cfg.spawn.half_extent[i];
            if h > 0.0 {
                position[i] += spawn_rng.random_range(-h..=h);
            }
        }
        let yaw = cfg.spawn.yaw.sample(&mut spawn_rng);
        let spawn = VehicleState::at_rest(position, yaw);
        let origin = position + spawn.attitude * Vector3::new(cfg.reward.d_r, 0.0, 0.0);

        let traj_seed = stream_rng(seed, STREAM_TRAJECTORY).next_u64();
        let target = match cfg.target {
            TargetSpec::RandomSinusoid {
                peak_velocity: Some(v),
                ranges,
            } => Trajectory::Sinusoid(sample_with_peak_velocity(v, &ranges, traj_seed, origin)?),
            TargetSpec::RandomSinusoid {
                peak_velocity: None,
                ranges,
            } => Trajectory::Sinusoid(sample_sinusoid(&ranges, traj_seed, origin)?),
            TargetSpec::Fixed { trajectory } => trajectory.with_origin(origin),
        };

        let state = AugmentedVehicleState::hovering(spawn, &params);
        let accel = Self::model_accel(&cfg, &state, &params);
        Ok(Self {
            seed,
            params,
            state,
            accel,
            target,
            spawn,
            step: 0,
            max_steps: cfg.max_steps(),
            detector_rng: stream_rng(seed, STREAM_DETECTOR),
            scene_seed: stream_rng(seed, STREAM_SCENE).next_u64(),
            detections: ObservationStack::new(cfg.observation.history),
            frames: ObservationStack::new(cfg.observation.history),
            current: None,
            lost_steps: 0,
            external,
            pose_pending: external,
            finished: None,
            cfg,
        })
    }

    fn model_accel(cfg: &EpisodeConfig, s: &AugmentedVehicleState, params: &VehicleParams) -> Vector3<f64> {
        match cfg.model {
            ModelKind::Simple => body_acceleration_simple(&s.base, s.thrust, params),
            ModelKind::Augmented => body_acceleration(s, params),
        }
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Plant parameters after randomization.
    pub fn params(&self) -> &VehicleParams {
        &self.params
    }

    pub fn spawn_pose(&self) -> VehicleState {
        self.spawn
    }

    pub fn target(&self) -> &Trajectory {
        &self.target
    }

    pub fn tracker(&self) -> &AugmentedVehicleState {
        &self.state
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    pub fn termination(&self) -> Option<&Termination> {
        self.finished.as_ref()
    }

    pub fn is_external(&self) -> bool {
        self.external
    }

    fn time(&self) -> f64 {
        self.step as f64 * self.cfg.dt
    }

    fn truth(&self) -> (TargetSample, RelativeState) {
        let target = self.target.eval(self.time());
        let rel = relative_state(&self.state.base, &self.accel, &target);
        (target, rel)
    }

    /// Supplies the tracker pose for the current step (mixed-reality mode).
    pub fn set_pose(&mut self, pose: &ExternalPose) -> Result<(), HarnessError> {
        if !self.external {
            return Err(HarnessError::NotExternal);
        }
        if self.finished.is_some() {
            return Err(HarnessError::Finished);
        }
        if !pose.is_finite() {
            return Err(HarnessError::NonFinitePose);
        }
        // Renormalizing an already-unit quaternion would perturb its last
        // bits and break replay equality, so only repair visible drift.
        let q = pose.attitude.into_inner();
        let attitude = if (q.norm() - 1.0).abs() > 1e-12 {
            UnitQuaternion::new_normalize(q)
        } else {
            pose.attitude
        };
        self.state.base = VehicleState {
            position: pose.position,
            velocity: pose.velocity,
            attitude,
        };
        self.accel = pose
            .acceleration
            .unwrap_or_else(|| body_acceleration_simple(&self.state.base, self.state.thrust, &self.params));
        self.pose_pending = false;
        self.current = None;
        Ok(())
    }

    /// Observation of the current step. Detector noise is drawn once per step.
    pub fn observe(&mut self) -> Result<&Observation, HarnessError> {
        if self.finished.is_some() {
            return Err(HarnessError::Finished);
        }
        if self.pose_pending {
            return Err(HarnessError::MissingPose(self.step));
        }
        if self.current.is_none() {
            let (_, rel) = self.truth();
            let truth = project(&rel.position, &self.cfg.camera, self.cfg.observation.target_radius);
            let det = detect(truth.as_ref(), &self.cfg.detector, &self.cfg.camera, &mut self.detector_rng);
            self.detections.push(det);
            if self.cfg.observation.mode == ObservationMode::Frames {
                let mut scene = self.cfg.scene;
                scene.target_radius = self.cfg.observation.target_radius;
                self.frames
                    .push(render_frame(&rel.position, &self.cfg.camera, &scene, self.scene_seed));
            }
            self.current = Some(Observation {
                step: self.step,
                time: self.time(),
                attitude: self.state.base.attitude,
                detections: self.detections.to_vec(),
                frames: self.frames.to_vec(),
                privileged: PrivilegedObservation {
                    relative: rel,
                    velocity: self.state.base.velocity,
                    acceleration: self.accel,
                },
            });
        }
        Ok(self.current.as_ref().expect("observation computed above"))
    }

    /// Applies `u(k)`: scores step `k`, then advances the tracker (internal
    /// mode) or waits for the next pose (external mode).
    pub fn step(&mut self, cmd: &Command) -> Result<StepRecord, HarnessError> {
        self.observe()?;
        let detected = self.current.as_ref().expect("observed").detections[0].is_some();
        let applied = self.params.limits.saturate(cmd);
        if !applied.is_finite() {
            return Err(HarnessError::Dynamics(DynamicsError::NonFinite("command")));
        }
        let (target, rel) = self.truth();
        let u = self.params.limits.normalize(&applied);
        let reward = total_reward(&rel.position, &rel.velocity, &u, &self.cfg.reward)
            .map_err(|e| HarnessError::Other(e.to_string()))?;
        let score = match spherical(&rel.position) {
            Ok(s) => score_sample(&s, &self.cfg.score_config()),
            Err(_) => ScoreSample::ZERO,
        };
        let visible = self.cfg.camera.is_visible(&rel.position);
        let record = StepRecord {
            step: self.step,
            time: self.time(),
            tracker: self.state.base,
            omega: self.state.omega,
            thrust: self.state.thrust,
            tracker_accel: self.accel,
            target,
            command: applied,
            saturated: applied != *cmd,
            reward,
            score,
            visible,
            detected,
        };

        self.lost_steps = if visible { 0 } else { self.lost_steps + 1 };
        if reward.collided && self.cfg.termination.collision {
            self.finished = Some(Termination::Collision);
            return Ok(record);
        }
        if let Some(grace) = self.cfg.termination.lost_grace {
            if self.lost_steps as f64 * self.cfg.dt > grace {
                self.finished = Some(Termination::TargetLost);
                return Ok(record);
            }
        }

        if self.external {
            self.state.thrust = applied.thrust;
            self.state.omega = applied.rates;
            self.pose_pending = true;
        } else {
            let next = match self.cfg.model {
                ModelKind::Augmented => step_augmented(&self.state, &applied, &self.params, self.cfg.dt),
                ModelKind::Simple => step_simple(&self.state.base, &applied, &self.params, self.cfg.dt).map(|base| {
                    AugmentedVehicleState {
                        base,
                        omega: applied.rates,
                        thrust: applied.thrust,
                    }
                }),
            };
            match next {
                Ok(s) if s.is_finite() => self.state = s,
                Ok(_) => {
                    self.finished = Some(Termination::Aborted);
                    return Err(HarnessError::Dynamics(DynamicsError::NonFinite("state")));
                }
                Err(e) => {
                    self.finished = Some(Termination::Aborted);
                    return Err(e.into());
                }
            }
            self.accel = Self::model_accel(&self.cfg, &self.state, &self.params);
        }
        self.step += 1;
        self.current = None;
        if self.step >= self.max_steps {
            self.finished = Some(Termination::Duration);
        }
        Ok(record)
    }

    /// Marks the episode as ended early for an external reason.
    pub fn abort(&mut self, reason: Termination) {
        if self.finished.is_none() {
            self.finished = Some(reason);
        }
    }
}

/// Maps observations to commands.
pub trait Policy {
    fn act(&mut self, obs: &Observation) -> Result<Command, ControlError>;
}

pub struct HoverPolicy {
    command: Command,
}

impl HoverPolicy {
    pub fn new(vehicle: &VehicleParams) -> Self {
        Self {
            command: Command::hover(vehicle),
        }
    }
}

impl Policy for HoverPolicy {
    fn act(&mut self, _: &Observation) -> Result<Command, ControlError> {
        Ok(self.command)
    }
}

/// Replays a fixed command list, then holds the last entry.
pub struct ScriptedPolicy {
    commands: Vec<Command>,
    next: usize,
}

impl ScriptedPolicy {
    pub fn new(commands: Vec<Command>) -> Self {
        Self { commands, next: 0 }
    }
}

impl Policy for ScriptedPolicy {
    fn act(&mut self, _: &Observation) -> Result<Command, ControlError> {
        let i = self.next.min(self.commands.len().saturating_sub(1));
        self.next += 1;
        self.commands
            .get(i)
            .copied()
            .ok_or_else(|| ControlError::Dimension("empty script".into()))
    }
}

pub struct LqgPolicy {
    design: LqgDesign,
    memory: LqgMemory,
    measurement: MeasurementModel,
    hover: Command,
}

impl Policy for LqgPolicy {
    /// Hovers until the first detection initializes the estimator.
    fn act(&mut self, obs: &Observation) -> Result<Command, ControlError> {
        match lqg_step(
            &self.design,
            &mut self.memory,
            obs.detections[0].as_ref(),
            Some(&obs.attitude),
            &self.measurement,
        ) {
            Err(ControlError::EstimatorUninitialized) => Ok(self.hover),
            other => other,
        }
    }
}

pub struct PrivilegedLqgPolicy {
    design: LqgDesign,
}

impl Policy for PrivilegedLqgPolicy {
    fn act(&mut self, obs: &Observation) -> Result<Command, ControlError> {
        let own = OwnState {
            attitude: Some(obs.attitude),
            velocity: Some(obs.privileged.velocity),
            acceleration: Some(obs.privileged.acceleration),
        };
        privileged_lqg_step(&self.design, &obs.privileged.relative, &own)
    }
}

pub struct PidPolicy {
    design: PidDesign,
    memory: PidMemory,
}

impl Policy for PidPolicy {
    fn act(&mut self, obs: &Observation) -> Result<Command, ControlError> {
        pid_step(&self.design, &mut self.memory, obs.detections[0].as_ref(), Some(&obs.attitude))
    }
}

fn lqg_design(cfg: &EpisodeConfig, lqg: &LqgConfig) -> Result<LqgDesign, ControlError> {
    LqgDesign::new(
        *lqg,
        cfg.vehicle,
        cfg.reward.d_r,
        cfg.camera,
        cfg.observation.target_radius,
        cfg.dt,
    )
}

/// Instantiates the configured controller with nominal vehicle parameters.
pub fn build_policy(cfg: &EpisodeConfig) -> Result<Box<dyn Policy + Send>, HarnessError> {
    Ok(match &cfg.controller {
        ControllerSpec::Hover => Box::new(HoverPolicy::new(&cfg.vehicle)),
        ControllerSpec::Lqg { config } => Box::new(LqgPolicy {
            design: lqg_design(cfg, config)?,
            memory: LqgMemory::new(),
            measurement: MeasurementModel {
                pixel_sigma: cfg.detector.pixel_sigma,
                radius_jitter: cfg.detector.radius_jitter,
            },
            hover: Command::hover(&cfg.vehicle),
        }),
        ControllerSpec::PrivilegedLqg { config } => Box::new(PrivilegedLqgPolicy {
            design: lqg_design(cfg, config)?,
        }),
        ControllerSpec::Pid { gains } => Box::new(PidPolicy {
            design: PidDesign {
                gains: *gains,
                vehicle: cfg.vehicle,
                d_r: cfg.reward.d_r,
                camera: cfg.camera,
                target_radius: cfg.observation.target_radius,
                dt: cfg.dt,
            },
            memory: PidMemory::default(),
        }),
        ControllerSpec::External => return Err(HarnessError::ExternalController),
    })
}

/// Complete record of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub seed: u64,
    pub config_hash: String,
    pub dt: f64,
    pub max_steps: usize,
    pub records: Vec<StepRecord>,
    pub termination: Termination,
    pub error: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogLine {
    Header {
        seed: u64,
        config_hash: String,
        dt: f64,
        max_steps: usize,
    },
    Step(StepRecord),
    End {
        termination: Termination,
        error: Option<String>,
        steps: usize,
    },
}

#[derive(Serialize)]
struct CsvRow {
    step: usize,
    time: f64,
    px: f64,
    py: f64,
    pz: f64,
    vx: f64,
    vy: f64,
    vz: f64,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    target_x: f64,
    target_y: f64,
    target_z: f64,
    thrust_cmd: f64,
    wx_cmd: f64,
    wy_cmd: f64,
    wz_cmd: f64,
    saturated: bool,
    reward: f64,
    r_e: f64,
    collided: bool,
    p_rho: f64,
    p_theta: f64,
    p_phi: f64,
    p_c: f64,
    visible: bool,
    detected: bool,
}

impl EpisodeLog {
    /// Empty log carrying the episode header of `env`.
    pub fn new(env: &Environment) -> Self {
        Self {
            seed: env.seed,
            config_hash: env.cfg.hash(),
            dt: env.cfg.dt,
            max_steps: env.max_steps,
            records: Vec::with_capacity(env.max_steps),
            termination: Termination::Duration,
            error: None,
        }
    }

    /// Scores padded with zeros up to the nominal episode length.
    pub fn padded_scores(&self) -> Vec<ScoreSample> {
        let mut s: Vec<ScoreSample> = self.records.iter().map(|r| r.score).collect();
        s.resize(self.max_steps.max(s.len()), ScoreSample::ZERO);
        s
    }

    pub fn is_aborted(&self) -> bool {
        matches!(self.termination, Termination::Aborted | Termination::Disconnected)
    }

    pub fn write_ndjson<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut line = |l: &LogLine| -> std::io::Result<()> {
            serde_json::to_writer(&mut w, l)?;
            w.write_all(b"\n")
        };
        line(&LogLine::Header {
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            dt: self.dt,
            max_steps: self.max_steps,
        })?;
        for r in &self.records {
            line(&LogLine::Step(*r))?;
        }
        line(&LogLine::End {
            termination: self.termination.clone(),
            error: self.error.clone(),
            steps: self.records.len(),
        })
    }

    pub fn to_ndjson(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_ndjson(&mut out).expect("in-memory write");
        out
    }

    pub fn read_ndjson<R: BufRead>(r: R) -> Result<Self, HarnessError> {
        let mut log: Option<EpisodeLog> = None;
        let mut ended = false;
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| HarnessError::Other(e.to_string()))?;
            let parsed: LogLine =
                serde_json::from_str(&line).map_err(|e| HarnessError::Other(format!("line {}: {e}", i + 1)))?;
            match (parsed, log.as_mut()) {
                (
                    LogLine::Header {
                        seed,
                        config_hash,
                        dt,
                        max_steps,
                    },
                    None,
                ) => {
                    log = Some(EpisodeLog {
                        seed,
                        config_hash,
                        dt,
                        max_steps,
                        records: Vec::new(),
                        termination: Termination::Duration,
                        error: None,
                    })
                }
                (LogLine::Step(rec), Some(l)) if !ended => l.records.push(rec),
                (LogLine::End { termination, error, .. }, Some(l)) if !ended => {
                    l.termination = termination;
                    l.error = error;
                    ended = true;
                }
                _ => return Err(HarnessError::Other(format!("line {}: unexpected record", i + 1))),
            }
        }
        match log {
            Some(l) if ended => Ok(l),
            _ => Err(HarnessError::Other("truncated log".into())),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            let q = r.tracker.attitude.quaternion();
            out.serialize(CsvRow {
                step: r.step,
                time: r.time,
                px: r.tracker.position.x,
                py: r.tracker.position.y,
                pz: r.tracker.position.z,
                vx: r.tracker.velocity.x,
                vy: r.tracker.velocity.y,
                vz: r.tracker.velocity.z,
                qw: q.w,
                qx: q.i,
                qy: q.j,
                qz: q.k,
                target_x: r.target.position.x,
                target_y: r.target.position.y,
                target_z: r.target.position.z,
                thrust_cmd: r.command.thrust,
                wx_cmd: r.command.rates.x,
                wy_cmd: r.command.rates.y,
                wz_cmd: r.command.rates.z,
                saturated: r.saturated,
                reward: r.reward.total,
                r_e: r.reward.r_e,
                collided: r.reward.collided,
                p_rho: r.score.p_rho,
                p_theta: r.score.p_theta,
                p_phi: r.score.p_phi,
                p_c: r.score.p_c,
                visible: r.visible,
                detected: r.detected,
            })?;
        }
        out.flush()?;
        Ok(())
    }

    /// Mean total score over the nominal episode length.
    pub fn p_c(&self) -> f64 {
        aggregate(&[self.padded_scores()]).map(|t| t.p_c).unwrap_or(0.0)
    }
}

/// Drives `env` with `policy` until it terminates.
pub fn run_with_policy(mut env: Environment, policy: &mut dyn Policy) -> EpisodeLog {
    let mut log = EpisodeLog::new(&env);
    while env.termination().is_none() {
        let cmd = match env.observe().map_err(|e| e.to_string()).and_then(|o| policy.act(o).map_err(|e| e.to_string())) {
            Ok(c) => c,
            Err(e) => {
                log.error = Some(e);
                env.abort(Termination::Aborted);
                break;
            }
        };
        match env.step(&cmd) {
            Ok(r) => log.records.push(r),
            Err(e) => {
                log.error = Some(e.to_string());
                env.abort(Termination::Aborted);
            }
        }
    }
    log.termination = env.termination().cloned().unwrap_or(Termination::Aborted);
    log
}

/// Runs one episode with the configured controller.
pub fn run_episode(cfg: &EpisodeConfig, seed: u64) -> Result<EpisodeLog, HarnessError> {
    let mut policy = build_policy(cfg)?;
    let env = Environment::new(*cfg, seed)?;
    Ok(run_with_policy(env, policy.as_mut()))
}

/// Supplies tracker poses in mixed-reality mode and receives the commands.
pub trait PoseSource {
    /// Pose for `step`; `last_command` is the command applied at `step − 1`.
    fn pose(&mut self, step: usize, last_command: Option<&Command>) -> Option<ExternalPose>;
}

/// Mixed-reality loop: external pose in, observation to the policy, command
/// back to the pose source. Internal dynamics are never integrated.
pub fn mixed_reality_session(
    cfg: &EpisodeConfig,
    seed: u64,
    source: &mut dyn PoseSource,
    policy: &mut dyn Policy,
) -> Result<EpisodeLog, HarnessError> {
    let mut env = Environment::new_external(*cfg, seed)?;
    let mut log = EpisodeLog::new(&env);
    let mut last: Option<Command> = None;
    while env.termination().is_none() {
        let Some(pose) = source.pose(env.step_index(), last.as_ref()) else {
            log.error = Some(HarnessError::MissingPose(env.step_index()).to_string());
            env.abort(Termination::Disconnected);
            break;
        };
        if let Err(e) = env.set_pose(&pose) {
            log.error = Some(e.to_string());
            env.abort(Termination::Aborted);
            break;
        }
        let cmd = match env.observe().map_err(|e| e.to_string()).and_then(|o| policy.act(o).map_err(|e| e.to_string())) {
            Ok(c) => c,
            Err(e) => {
                log.error = Some(e);
                env.abort(Termination::Aborted);
                break;
            }
        };
        match env.step(&cmd) {
            Ok(r) => {
                last = Some(r.command);
                log.records.push(r);
            }
            Err(e) => {
                log.error = Some(e.to_string());
                env.abort(Termination::Aborted);
            }
        }
    }
    log.termination = env.termination().cloned().unwrap_or(Termination::Aborted);
    Ok(log)
}

/// One column of a benchmark: a target motion and optional overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub target: Option<TargetSpec>,
    #[serde(default)]
    pub model: Option<ModelKind>,
    #[serde(default)]
    pub randomization: Option<RandomizationConfig>,
    #[serde(default)]
    pub detector: Option<DetectorNoise>,
    #[serde(default)]
    pub duration: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedController {
    pub name: String,
    pub controller: ControllerSpec,
}

fn default_runs() -> usize {
    20
}

/// Scenarios × controllers, each cell run with seeds `seed..seed + runs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Suite {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub base: EpisodeConfig,
    pub scenarios: Vec<Scenario>,
    pub controllers: Vec<NamedController>,
}

impl Suite {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Parse {
            path: String::new(),
            message: e.to_string(),
        })?;
        let suite: Suite = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            path: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
        Ok(suite)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let path = resolve_config_path(path);
        let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Episode config of one cell, validated.
    pub fn cell_config(&self, scenario: &Scenario, controller: &NamedController) -> Result<EpisodeConfig, HarnessError> {
        let mut cfg = self.base;
        if let Some(t) = scenario.target {
            cfg.target = t;
        }
        if let Some(m) = scenario.model {
            cfg.model = m;
        }
        if let Some(r) = scenario.randomization {
            cfg.randomization = r;
        }
        if let Some(d) = scenario.detector {
            cfg.detector = d;
        }
        if let Some(d) = scenario.duration {
            cfg.duration = d;
        }
        cfg.controller = controller.controller;
        cfg.validate().map_err(|issues| {
            let issues = issues
                .into_iter()
                .map(|i| ConfigIssue {
                    path: format!("{}/{}.{}", scenario.name, controller.name, i.path),
                    message: i.message,
                })
                .collect();
            HarnessError::Config(ConfigError::Invalid { issues })
        })?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub scenario: String,
    pub controller: String,
    pub table: ScoreTable,
    pub collisions: usize,
    pub aborted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub seed: u64,
    pub runs: usize,
    pub scenarios: Vec<String>,
    pub controllers: Vec<String>,
    pub cells: Vec<CellResult>,
}

/// Runs every cell; episodes run on the rayon pool but results are
/// collected in suite order, so output does not depend on thread count.
pub fn run_benchmark(suite: &Suite) -> Result<BenchReport, HarnessError> {
    if suite.scenarios.is_empty() || suite.controllers.is_empty() || suite.runs == 0 {
        return Err(HarnessError::EmptySuite);
    }
    let mut cells = Vec::new();
    for sc in &suite.scenarios {
        for ctl in &suite.controllers {
            cells.push((sc, ctl, suite.cell_config(sc, ctl)?));
        }
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| (0..suite.runs as u64).map(move |r| (c, suite.seed.wrapping_add(r))))
        .collect();
    let logs: Vec<Result<EpisodeLog, String>> = jobs
        .par_iter()
        .map(|&(c, seed)| run_episode(&cells[c].2, seed).map_err(|e| e.to_string()))
        .collect();

    let mut out = Vec::with_capacity(cells.len());
    for (c, (sc, ctl, cfg)) in cells.iter().enumerate() {
        let chunk = &logs[c * suite.runs..(c + 1) * suite.runs];
        let mut runs = Vec::with_capacity(suite.runs);
        let (mut collisions, mut aborted) = (0, 0);
        for log in chunk {
            match log {
                Ok(l) => {
                    collisions += usize::from(l.termination == Termination::Collision);
                    aborted += usize::from(l.is_aborted());
                    runs.push(l.padded_scores());
                }
                Err(e) => return Err(HarnessError::Other(format!("{}/{}: {e}", sc.name, ctl.name))),
            }
        }
        let table = aggregate(&runs).map_err(|e| HarnessError::Other(e.to_string()))?;
        debug_assert_eq!(table.steps, suite.runs * cfg.max_steps());
        out.push(CellResult {
            scenario: sc.name.clone(),
            controller: ctl.name.clone(),
            table,
            collisions,
            aborted,
        });
    }
    Ok(BenchReport {
        seed: suite.seed,
        runs: suite.runs,
        scenarios: suite.scenarios.iter().map(|s| s.name.clone()).collect(),
        controllers: suite.controllers.iter().map(|c| c.name.clone()).collect(),
        cells: out,
    })
}

impl BenchReport {
    pub fn cell(&self, scenario: &str, controller: &str) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.scenario == scenario && c.controller == controller)
    }

    /// Long-form CSV: one row per cell.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "scenario",
            "controller",
            "p_theta",
            "p_phi",
            "p_rho",
            "p_c",
            "runs",
            "steps",
            "collisions",
            "aborted",
        ])
        .expect("in-memory write");
        for c in &self.cells {
            let t = &c.table;
            w.write_record([
                c.scenario.clone(),
                c.controller.clone(),
                t.p_theta.to_string(),
                t.p_phi.to_string(),
                t.p_rho.to_string(),
                t.p_c.to_string(),
                t.runs.to_string(),
                t.steps.to_string(),
                c.collisions.to_string(),
                c.aborted.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("UTF-8")
    }

    /// Per-controller CSV tables in the scenarios × metrics layout.
    pub fn controller_csv(&self, controller: &str) -> String {
        tables_to_csv(&self.rows_for(controller))
    }

    fn rows_for(&self, controller: &str) -> Vec<(String, ScoreTable)> {
        self.cells
            .iter()
            .filter(|c| c.controller == controller)
            .map(|c| (c.scenario.clone(), c.table))
            .collect()
    }

    /// `true` if P_c strictly decreases along the scenario order.
    pub fn is_decreasing(&self, controller: &str) -> bool {
        let p: Vec<f64> = self.rows_for(controller).iter().map(|(_, t)| t.p_c).collect();
        p.windows(2).all(|w| w[1] < w[0])
    }

    /// One metrics table per controller, then a P_c summary with
    /// controllers as rows and scenarios as columns.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        for ctl in &self.controllers {
            out.push_str(&format!("### {ctl}\n\n"));
            out.push_str(&tables_to_markdown(&self.rows_for(ctl)));
            out.push('\n');
        }
        out.push_str("### P_c summary\n\n");
        let mut header = vec!["Controller".to_string()];
        header.extend(self.scenarios.iter().cloned());
        header.push("Trend".into());
        let rows: Vec<Vec<String>> = self
            .controllers
            .iter()
            .map(|ctl| {
                let mut r = vec![ctl.clone()];
                r.extend(self.rows_for(ctl).iter().map(|(_, t)| format!("{:.4}", t.p_c)));
                r.push(if self.is_decreasing(ctl) { "decreasing" } else { "-" }.into());
                r
            })
            .collect();
        out.push_str(&markdown_table(&header, &rows));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn still_config() -> EpisodeConfig {
        let mut cfg = EpisodeConfig::default();
        cfg.target = TargetSpec::Fixed {
            trajectory: Trajectory::Setpoint { origin: Vector3::zeros() },
        };
        cfg.controller = ControllerSpec::Hover;
        cfg.reward.k_u = 0.0;
        cfg.reward.k_v = 0.0;
        cfg.duration = 2.0;
        cfg
    }

    #[test]
    fn empty_config_uses_table_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, EpisodeConfig::default());
        assert_eq!(cfg.reward.d_r, 0.5);
        assert_eq!(cfg.reward.d_m, 0.3);
        assert_eq!(cfg.reward.beta, 1.0 / 3.0);
        assert_eq!((cfg.reward.k_v, cfg.reward.k_u, cfg.reward.k_c), (0.4, 0.4, 10.0));
        assert_eq!(cfg.camera.fov, FRAC_PI_2);
        assert_eq!(cfg.vehicle.limits.thrust_max, 20.1);
        assert_eq!(cfg.max_steps(), 2000);
    }

    #[test]
    fn negative_mass_names_key() {
        match parse_config("[vehicle]\nmass = -1.0\n") {
            Err(ConfigError::Invalid { issues }) => assert_eq!(issues[0].path, "vehicle.mass"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_names_path() {
        match parse_config("[reward]\nbogus = 1\n") {
            Err(ConfigError::Parse { path, message }) => {
                assert_eq!(path, "reward.bogus");
                assert!(message.contains("bogus"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn emit_then_load_round_trips() {
        let mut cfg = EpisodeConfig::default();
        cfg.detector.pixel_sigma = 0.7;
        cfg.termination.lost_grace = Some(1.5);
        cfg.target = TargetSpec::RandomSinusoid {
            peak_velocity: Some(1.0),
            ranges: SinusoidRanges::default(),
        };
        cfg.controller = ControllerSpec::Pid { gains: PidGains::default() };
        assert_eq!(parse_config(&emit_config(&cfg)).unwrap(), cfg);
        let still = still_config();
        assert_eq!(parse_config(&emit_config(&still)).unwrap(), still);
    }

    #[test]
    fn streams_are_independent() {
        let a = stream_rng(7, STREAM_DETECTOR).next_u64();
        let b = stream_rng(7, STREAM_SPAWN).next_u64();
        assert_ne!(a, b);
        assert_eq!(a, stream_rng(7, STREAM_DETECTOR).next_u64());
    }

    #[test]
    fn hover_on_static_target_is_perfect() {
        let log = run_episode(&still_config(), 3).unwrap();
        assert_eq!(log.termination, Termination::Duration);
        assert_eq!(log.records.len(), 100);
        for r in &log.records {
            assert!((r.score.p_c - 1.0).abs() < 1e-9, "{:?}", r.score);
            assert!((r.reward.total - 1.0).abs() < 1e-9, "{:?}", r.reward);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let mut cfg = EpisodeConfig::default();
        cfg.duration = 3.0;
        cfg.detector.pixel_sigma = 1.0;
        let a = run_episode(&cfg, 5).unwrap().to_ndjson();
        let b = run_episode(&cfg, 5).unwrap().to_ndjson();
        assert_eq!(a, b);
        let c = run_episode(&cfg, 6).unwrap().to_ndjson();
        assert_ne!(a, c);
    }

    #[test]
    fn ramp_through_tracker_collides() {
        let mut cfg = still_config();
        cfg.spawn.half_extent = Vector3::zeros();
        cfg.spawn.yaw = Interval::new(0.0, 0.0);
        cfg.target = TargetSpec::Fixed {
            trajectory: Trajectory::Ramp {
                origin: Vector3::zeros(),
                velocity: Vector3::new(-1.0, 0.0, 0.0),
            },
        };
        let log = run_episode(&cfg, 0).unwrap();
        assert_eq!(log.termination, Termination::Collision);
        assert_eq!(log.records.last().unwrap().reward.total, -10.0);
        assert!(log.records.len() < cfg.max_steps());
        assert_eq!(log.padded_scores().len(), cfg.max_steps());
    }

    #[test]
    fn log_round_trips_through_ndjson() {
        let mut cfg = EpisodeConfig::default();
        cfg.duration = 1.0;
        let log = run_episode(&cfg, 1).unwrap();
        let back = EpisodeLog::read_ndjson(log.to_ndjson().as_slice()).unwrap();
        assert_eq!(back, log);
        let mut csv = Vec::new();
        log.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), log.records.len() + 1);
    }

    #[test]
    fn external_pose_requires_pose() {
        let mut env = Environment::new_external(still_config(), 0).unwrap();
        assert!(matches!(env.observe(), Err(HarnessError::MissingPose(0))));
        let mut pose = ExternalPose {
            position: env.spawn_pose().position,
            velocity: Vector3::zeros(),
            attitude: env.spawn_pose().attitude,
            acceleration: None,
        };
        pose.position.x = f64::NAN;
        assert!(matches!(env.set_pose(&pose), Err(HarnessError::NonFinitePose)));
    }

    #[test]
    fn empty_suite_rejected() {
        let suite = Suite {
            seed: 0,
            runs: 1,
            base: EpisodeConfig::default(),
            scenarios: vec![],
            controllers: vec![],
        };
        assert!(matches!(run_benchmark(&suite), Err(HarnessError::EmptySuite)));
    }
}
