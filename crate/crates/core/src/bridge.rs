//! Newline-delimited JSON protocol for external policies and mixed-reality
//! pose streaming.
//!
//! A session is lock-step: `hello`, `reset`, then
//! `(observation, action, step_result)*` and `episode_end`. In external-pose
//! mode the client sends `external_pose` before every observation. A protocol
//! violation is answered with an `error` message and closes that session
//! only. See `docs/protocol.md` for the grammar.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::thread;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controllers::ControlError;
use crate::dynamics::Command;
use crate::harness::{
    Environment, EpisodeConfig, EpisodeLog, ExternalPose, HarnessError, Observation, ObservationMode, Policy,
    PoseSource, PrivilegedObservation, Termination,
};
use crate::metrics::ScoreSample;
use crate::perception::{BBox, Frame, RelativeState};
use crate::reward::RewardTerms;

pub const PROTOCOL_VERSION: &str = "1.0";

/// One protocol line. `session` is assigned by the server in its `hello`;
/// `step` is the control step the message refers to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub session: u64,
    pub step: u64,
    #[serde(flatten)]
    pub body: Body,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Body {
    Hello {
        version: String,
        /// Sent by the server only.
        #[serde(default)]
        info: Option<SessionInfo>,
    },
    Reset {
        seed: u64,
        #[serde(default)]
        external_pose: bool,
    },
    Observation(ObservationPayload),
    Action {
        command: Command,
    },
    StepResult(StepResult),
    EpisodeEnd {
        termination: Termination,
        steps: u64,
        p_c: f64,
    },
    ExternalPose {
        pose: ExternalPose,
    },
    Error {
        message: String,
    },
}

/// Fixed for the lifetime of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub config_hash: String,
    pub mode: ObservationMode,
    pub dt: f64,
    pub max_steps: u64,
}

/// Frame with base64 pixel data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireFrame {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub data: String,
}

impl From<&Frame> for WireFrame {
    fn from(f: &Frame) -> Self {
        Self {
            width: f.width,
            height: f.height,
            channels: f.channels,
            data: STANDARD.encode(&f.data),
        }
    }
}

impl WireFrame {
    pub fn to_frame(&self) -> Result<Frame, BridgeError> {
        let data = STANDARD
            .decode(&self.data)
            .map_err(|e| BridgeError::Protocol(format!("frame data: {e}")))?;
        let expected = self.width as usize * self.height as usize * self.channels as usize;
        if data.len() != expected {
            return Err(BridgeError::Protocol(format!(
                "frame data has {} bytes, expected {expected}",
                data.len()
            )));
        }
        Ok(Frame {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data,
        })
    }
}

/// Observation filtered by the session mode: `bboxes` sends detections,
/// `frames` sends images, `privileged` sends detections plus ground truth.
/// Attitude is always included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationPayload {
    pub time: f64,
    pub attitude: UnitQuaternion<f64>,
    #[serde(default)]
    pub detections: Option<Vec<Option<BBox>>>,
    #[serde(default)]
    pub frames: Option<Vec<WireFrame>>,
    #[serde(default)]
    pub privileged: Option<PrivilegedObservation>,
}

impl ObservationPayload {
    pub fn from_observation(obs: &Observation, mode: ObservationMode) -> Self {
        let (detections, frames, privileged) = match mode {
            ObservationMode::Bboxes => (Some(obs.detections.clone()), None, None),
            ObservationMode::Frames => (None, Some(obs.frames.iter().map(WireFrame::from).collect()), None),
            ObservationMode::Privileged => (Some(obs.detections.clone()), None, Some(obs.privileged)),
        };
        Self {
            time: obs.time,
            attitude: obs.attitude,
            detections,
            frames,
            privileged,
        }
    }

    /// Rebuilds an [`Observation`] for a local policy. Absent fields become
    /// a single miss and zero ground truth.
    pub fn to_observation(&self, step: u64) -> Result<Observation, BridgeError> {
        let frames = match &self.frames {
            Some(f) => f.iter().map(WireFrame::to_frame).collect::<Result<_, _>>()?,
            None => Vec::new(),
        };
        let detections = match &self.detections {
            Some(d) if !d.is_empty() => d.clone(),
            _ => vec![None],
        };
        let privileged = self.privileged.unwrap_or(PrivilegedObservation {
            relative: RelativeState {
                position: Vector3::zeros(),
                velocity: Vector3::zeros(),
                acceleration: Vector3::zeros(),
            },
            velocity: Vector3::zeros(),
            acceleration: Vector3::zeros(),
        });
        Ok(Observation {
            step: step as usize,
            time: self.time,
            attitude: self.attitude,
            detections,
            frames,
            privileged,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub reward: RewardTerms,
    pub score: ScoreSample,
    /// Command after saturation.
    pub command: Command,
    pub saturated: bool,
    pub visible: bool,
    pub detected: bool,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed message at byte {offset}: {message}")]
pub struct DecodeError {
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("remote error: {0}")]
    Remote(String),
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

/// Serializes `msg` as one line, newline included.
pub fn encode(msg: &Message) -> Vec<u8> {
    let mut out = serde_json::to_vec(msg).expect("message types always serialize");
    out.push(b'\n');
    out
}

/// Parses one line; a trailing `\n` or `\r\n` is ignored.
pub fn decode(line: &[u8]) -> Result<Message, DecodeError> {
    let line = line.strip_suffix(b"\n").unwrap_or(line);
    let line = line.strip_suffix(b"\r").unwrap_or(line);
    serde_json::from_slice(line).map_err(|e| DecodeError {
        // Lines carry no raw newlines, so the column is the byte position.
        offset: e.column(),
        message: e.to_string(),
    })
}

fn major(version: &str) -> &str {
    version.split('.').next().unwrap_or("")
}

/// Reads one complete line. `Ok(None)` on clean end of stream; a final line
/// without its newline is treated as truncated.
fn read_message<R: BufRead>(reader: &mut R) -> Result<Option<Message>, BridgeError> {
    let mut buf = Vec::new();
    let n = reader.read_until(b'\n', &mut buf)?;
    if n == 0 {
        return Ok(None);
    }
    if buf.last() != Some(&b'\n') {
        return Err(DecodeError {
            offset: buf.len(),
            message: "truncated line".into(),
        }
        .into());
    }
    Ok(Some(decode(&buf)?))
}

/// What happened in one server-side session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionReport {
    pub session: u64,
    pub logs: Vec<EpisodeLog>,
    /// Reason the session closed early, if it did.
    pub error: Option<String>,
}

enum Phase {
    Hello,
    Idle,
    AwaitPose,
    AwaitAction,
}

struct Session<'a, R, W> {
    reader: R,
    writer: W,
    cfg: &'a EpisodeConfig,
    id: u64,
    episode: Option<(Environment, EpisodeLog)>,
    logs: Vec<EpisodeLog>,
}

impl<R: BufRead, W: Write> Session<'_, R, W> {
    fn send(&mut self, step: u64, body: Body) -> Result<(), BridgeError> {
        self.writer.write_all(&encode(&Message {
            session: self.id,
            step,
            body,
        }))?;
        self.writer.flush()?;
        Ok(())
    }

    fn step_index(&self) -> u64 {
        self.episode.as_ref().map_or(0, |(env, _)| env.step_index() as u64)
    }

    fn send_observation(&mut self) -> Result<(), BridgeError> {
        let (env, _) = self.episode.as_mut().expect("episode running");
        let step = env.step_index() as u64;
        let payload = ObservationPayload::from_observation(env.observe()?, self.cfg.observation.mode);
        self.send(step, Body::Observation(payload))
    }

    fn close_episode(&mut self, reason: Termination, error: Option<String>) {
        if let Some((mut env, mut log)) = self.episode.take() {
            env.abort(reason);
            log.termination = env.termination().cloned().unwrap_or(Termination::Aborted);
            log.error = error;
            self.logs.push(log);
        }
    }

    /// Handles one client message; `Ok(false)` ends the session normally.
    fn handle(&mut self, phase: &mut Phase, msg: Message) -> Result<bool, BridgeError> {
        if !matches!(phase, Phase::Hello) && msg.session != self.id {
            return Err(BridgeError::Protocol(format!(
                "session id {} does not match {}",
                msg.session, self.id
            )));
        }
        match (&*phase, msg.body) {
            (_, Body::Error { message }) => {
                self.close_episode(Termination::Disconnected, Some(format!("client error: {message}")));
                return Ok(false);
            }
            (Phase::Hello, Body::Hello { version, .. }) => {
                if major(&version) != major(PROTOCOL_VERSION) {
                    return Err(BridgeError::Protocol("unsupported version".into()));
                }
                let info = SessionInfo {
                    config_hash: self.cfg.hash(),
                    mode: self.cfg.observation.mode,
                    dt: self.cfg.dt,
                    max_steps: self.cfg.max_steps() as u64,
                };
                self.send(
                    0,
                    Body::Hello {
                        version: PROTOCOL_VERSION.into(),
                        info: Some(info),
                    },
                )?;
                *phase = Phase::Idle;
            }
            (Phase::Idle, Body::Reset { seed, external_pose }) => {
                let env = if external_pose {
                    Environment::new_external(*self.cfg, seed)?
                } else {
                    Environment::new(*self.cfg, seed)?
                };
                let log = EpisodeLog::new(&env);
                self.episode = Some((env, log));
                if external_pose {
                    *phase = Phase::AwaitPose;
                } else {
                    self.send_observation()?;
                    *phase = Phase::AwaitAction;
                }
            }
            (Phase::AwaitPose, Body::ExternalPose { pose }) => {
                self.expect_step(msg.step)?;
                let (env, _) = self.episode.as_mut().expect("episode running");
                env.set_pose(&pose)?;
                self.send_observation()?;
                *phase = Phase::AwaitAction;
            }
            (Phase::AwaitAction, Body::Action { command }) => {
                self.expect_step(msg.step)?;
                let (env, log) = self.episode.as_mut().expect("episode running");
                let record = env.step(&command)?;
                log.records.push(record);
                let done = env.termination().is_some();
                let external = env.is_external();
                self.send(
                    msg.step,
                    Body::StepResult(StepResult {
                        reward: record.reward,
                        score: record.score,
                        command: record.command,
                        saturated: record.saturated,
                        visible: record.visible,
                        detected: record.detected,
                        done,
                    }),
                )?;
                if done {
                    let (env, mut log) = self.episode.take().expect("episode running");
                    log.termination = env.termination().cloned().expect("episode finished");
                    let end = Body::EpisodeEnd {
                        termination: log.termination.clone(),
                        steps: log.records.len() as u64,
                        p_c: log.p_c(),
                    };
                    self.logs.push(log);
                    self.send(msg.step, end)?;
                    *phase = Phase::Idle;
                } else if external {
                    *phase = Phase::AwaitPose;
                } else {
                    self.send_observation()?;
                }
            }
            (_, body) => {
                let kind = serde_json::to_value(&body)
                    .ok()
                    .and_then(|v| v.get("type").and_then(|t| t.as_str()).map(String::from))
                    .unwrap_or_default();
                return Err(BridgeError::Protocol(format!("unexpected `{kind}` message")));
            }
        }
        Ok(true)
    }

    fn expect_step(&self, step: u64) -> Result<(), BridgeError> {
        let expected = self.step_index();
        if step != expected {
            return Err(BridgeError::Protocol(format!("step {step} out of order, expected {expected}")));
        }
        Ok(())
    }

    fn run(mut self) -> SessionReport {
        let mut phase = Phase::Hello;
        let mut error = None;
        loop {
            let outcome = match read_message(&mut self.reader) {
                Ok(Some(msg)) => self.handle(&mut phase, msg),
                Ok(None) => Ok(false),
                Err(e) => Err(e),
            };
            match outcome {
                Ok(true) => continue,
                Ok(false) => {
                    self.close_episode(Termination::Disconnected, Some("client disconnected".into()));
                    break;
                }
                Err(e) => {
                    let message = e.to_string();
                    let step = self.step_index();
                    // The peer may already be gone; the session closes regardless.
                    let _ = self.send(step, Body::Error { message: message.clone() });
                    let reason = if matches!(e, BridgeError::Harness(_)) {
                        Termination::Aborted
                    } else {
                        Termination::Disconnected
                    };
                    self.close_episode(reason, Some(message.clone()));
                    error = Some(message);
                    break;
                }
            }
        }
        SessionReport {
            session: self.id,
            logs: self.logs,
            error,
        }
    }
}

/// Serves one session over a byte stream until the client closes it or a
/// protocol error occurs.
pub fn run_session<R: BufRead, W: Write>(reader: R, writer: W, cfg: &EpisodeConfig, session: u64) -> SessionReport {
    Session {
        reader,
        writer,
        cfg,
        id: session,
        episode: None,
        logs: Vec::new(),
    }
    .run()
}

pub type SessionSink = Arc<dyn Fn(&SessionReport) + Send + Sync>;

#[derive(Clone, Default)]
pub struct ServeOptions {
    /// Stop accepting after this many connections and return once they close.
    pub max_connections: Option<usize>,
    /// Called with each finished session.
    pub sink: Option<SessionSink>,
}

/// Accepts connections on `listener`, one thread and one session each.
/// Session ids count from 1 in accept order.
pub fn serve_tcp(listener: TcpListener, cfg: EpisodeConfig, opts: ServeOptions) -> io::Result<()> {
    let mut handles = Vec::new();
    let mut accepted = 0usize;
    for stream in listener.incoming() {
        if opts.max_connections.is_some_and(|m| accepted >= m) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(_) => continue,
        };
        accepted += 1;
        let id = accepted as u64;
        let sink = opts.sink.clone();
        handles.push(thread::spawn(move || {
            // Replies go out as several small writes; without this the
            // second one waits on a delayed ACK every step.
            let _ = stream.set_nodelay(true);
            let Ok(read_half) = stream.try_clone() else {
                return;
            };
            let report = run_session(BufReader::new(read_half), &stream, &cfg, id);
            if let Some(sink) = sink {
                sink(&report);
            }
        }));
        if opts.max_connections.is_some_and(|m| accepted >= m) {
            break;
        }
    }
    for h in handles {
        let _ = h.join();
    }
    Ok(())
}

/// Single session over standard input and output.
pub fn serve_stdio(cfg: &EpisodeConfig) -> SessionReport {
    let stdin = io::stdin();
    let stdout = io::stdout();
    run_session(stdin.lock(), stdout.lock(), cfg, 1)
}

/// Client side of a session.
pub struct Client<R, W> {
    reader: R,
    writer: W,
    session: u64,
    info: Option<SessionInfo>,
}

impl Client<BufReader<TcpStream>, TcpStream> {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self::new(BufReader::new(stream.try_clone()?), stream))
    }
}

impl<R: BufRead, W: Write> Client<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self {
            reader,
            writer,
            session: 0,
            info: None,
        }
    }

    pub fn session(&self) -> u64 {
        self.session
    }

    pub fn info(&self) -> Option<&SessionInfo> {
        self.info.as_ref()
    }

    pub fn send(&mut self, step: u64, body: Body) -> Result<(), BridgeError> {
        self.writer.write_all(&encode(&Message {
            session: self.session,
            step,
            body,
        }))?;
        self.writer.flush()?;
        Ok(())
    }

    /// Next server message; a server `error` becomes [`BridgeError::Remote`].
    pub fn recv(&mut self) -> Result<Message, BridgeError> {
        match read_message(&mut self.reader)? {
            None => Err(BridgeError::Closed),
            Some(Message {
                body: Body::Error { message },
                ..
            }) => Err(BridgeError::Remote(message)),
            Some(m) => Ok(m),
        }
    }

    pub fn hello(&mut self) -> Result<SessionInfo, BridgeError> {
        self.send(
            0,
            Body::Hello {
                version: PROTOCOL_VERSION.into(),
                info: None,
            },
        )?;
        match self.recv()? {
            Message {
                session,
                body: Body::Hello { info: Some(info), .. },
                ..
            } => {
                self.session = session;
                self.info = Some(info.clone());
                Ok(info)
            }
            m => Err(unexpected(&m)),
        }
    }

    pub fn observation(&mut self) -> Result<(u64, ObservationPayload), BridgeError> {
        match self.recv()? {
            Message {
                step,
                body: Body::Observation(p),
                ..
            } => Ok((step, p)),
            m => Err(unexpected(&m)),
        }
    }

    /// Sends `command` for `step` and returns the step result, plus the
    /// episode summary when the episode ended.
    pub fn act(&mut self, step: u64, command: Command) -> Result<(StepResult, Option<EpisodeSummary>), BridgeError> {
        self.send(step, Body::Action { command })?;
        let result = match self.recv()? {
            Message {
                body: Body::StepResult(r),
                ..
            } => r,
            m => return Err(unexpected(&m)),
        };
        if !result.done {
            return Ok((result, None));
        }
        match self.recv()? {
            Message {
                body: Body::EpisodeEnd {
                    termination,
                    steps,
                    p_c,
                },
                ..
            } => Ok((
                result,
                Some(EpisodeSummary {
                    termination,
                    steps,
                    p_c,
                }),
            )),
            m => Err(unexpected(&m)),
        }
    }
}

fn unexpected(m: &Message) -> BridgeError {
    let kind = serde_json::to_value(&m.body)
        .ok()
        .and_then(|v| v.get("type").and_then(|t| t.as_str()).map(String::from))
        .unwrap_or_default();
    BridgeError::Protocol(format!("unexpected `{kind}` message at step {}", m.step))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub termination: Termination,
    pub steps: u64,
    pub p_c: f64,
}

/// Client-side view of one remote episode.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteEpisode {
    pub observations: Vec<ObservationPayload>,
    pub results: Vec<StepResult>,
    pub summary: EpisodeSummary,
}

/// Runs one episode on the server with a local policy.
pub fn drive_episode<R: BufRead, W: Write>(
    client: &mut Client<R, W>,
    seed: u64,
    policy: &mut dyn Policy,
) -> Result<RemoteEpisode, BridgeError> {
    drive(client, seed, None, policy)
}

/// Mixed-reality episode: `source` supplies every tracker pose and receives
/// the applied commands.
pub fn drive_external_episode<R: BufRead, W: Write>(
    client: &mut Client<R, W>,
    seed: u64,
    source: &mut dyn PoseSource,
    policy: &mut dyn Policy,
) -> Result<RemoteEpisode, BridgeError> {
    drive(client, seed, Some(source), policy)
}

fn drive<R: BufRead, W: Write>(
    client: &mut Client<R, W>,
    seed: u64,
    mut source: Option<&mut dyn PoseSource>,
    policy: &mut dyn Policy,
) -> Result<RemoteEpisode, BridgeError> {
    client.send(
        0,
        Body::Reset {
            seed,
            external_pose: source.is_some(),
        },
    )?;
    let mut observations = Vec::new();
    let mut results = Vec::new();
    let mut last: Option<Command> = None;
    let mut step = 0u64;
    loop {
        if let Some(src) = source.as_deref_mut() {
            let Some(pose) = src.pose(step as usize, last.as_ref()) else {
                let message = format!("no pose for step {step}");
                client.send(step, Body::Error { message: message.clone() })?;
                return Err(BridgeError::Protocol(message));
            };
            client.send(step, Body::ExternalPose { pose })?;
        }
        let (s, payload) = client.observation()?;
        let command = match policy.act(&payload.to_observation(s)?) {
            Ok(c) => c,
            Err(e) => {
                client.send(s, Body::Error { message: e.to_string() })?;
                return Err(e.into());
            }
        };
        observations.push(payload);
        let (result, summary) = client.act(s, command)?;
        last = Some(result.command);
        results.push(result);
        if let Some(summary) = summary {
            return Ok(RemoteEpisode {
                observations,
                results,
                summary,
            });
        }
        step = s + 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{HoverPolicy, TargetSpec};
    use crate::trajectories::{Interval, Trajectory};

    /// Level spawn at the origin facing +x, target parked at `(d_r, 0, 0)`.
    fn static_cfg() -> EpisodeConfig {
        let mut cfg = EpisodeConfig::default();
        cfg.target = TargetSpec::Fixed {
            trajectory: Trajectory::Setpoint { origin: Vector3::zeros() },
        };
        cfg.spawn.half_extent = Vector3::zeros();
        cfg.spawn.yaw = Interval::new(0.0, 0.0);
        cfg.reward.k_v = 0.0;
        cfg.reward.k_u = 0.0;
        cfg.duration = 1.0;
        cfg
    }

    fn lines(msgs: &[Message]) -> Vec<u8> {
        msgs.iter().flat_map(encode).collect()
    }

    fn replies(out: &[u8]) -> Vec<Message> {
        out.split_inclusive(|b| *b == b'\n').map(|l| decode(l).unwrap()).collect()
    }

    fn msg(session: u64, step: u64, body: Body) -> Message {
        Message { session, step, body }
    }

    fn hello() -> Message {
        msg(
            0,
            0,
            Body::Hello {
                version: PROTOCOL_VERSION.into(),
                info: None,
            },
        )
    }

    #[test]
    fn encode_is_one_line() {
        let m = msg(
            3,
            7,
            Body::Action {
                command: Command::new(0.1 + 0.2, Vector3::new(1e-300, -0.0, 3.0)),
            },
        );
        let bytes = encode(&m);
        assert_eq!(bytes.iter().filter(|b| **b == b'\n').count(), 1);
        assert_eq!(decode(&bytes).unwrap(), m);
        assert!(std::str::from_utf8(&bytes).unwrap().starts_with(r#"{"session":3,"step":7,"type":"action""#));
    }

    #[test]
    fn decode_reports_offset() {
        let err = decode(br#"{"session":1,"step":0,"type":"hel"#).unwrap_err();
        assert_eq!(err.offset, 33);
        let err = decode(br#"{"session":1,"step":x}"#).unwrap_err();
        assert_eq!(err.offset, 21);
    }

    #[test]
    fn version_mismatch_rejected() {
        let input = lines(&[msg(
            0,
            0,
            Body::Hello {
                version: "2.0".into(),
                info: None,
            },
        )]);
        let mut out = Vec::new();
        let report = run_session(&input[..], &mut out, &static_cfg(), 5);
        let r = replies(&out);
        assert_eq!(r.len(), 1);
        assert!(matches!(&r[0].body, Body::Error { message } if message.contains("unsupported version")));
        assert!(report.error.is_some());
    }

    #[test]
    fn hover_session_and_saturation() {
        let cfg = static_cfg();
        let hover = Command::hover(&cfg.vehicle);
        let mut input = vec![hello(), msg(9, 0, Body::Reset { seed: 1, external_pose: false })];
        input.push(msg(
            9,
            0,
            Body::Action {
                command: Command::new(25.0, Vector3::zeros()),
            },
        ));
        for k in 1..cfg.max_steps() as u64 {
            input.push(msg(9, k, Body::Action { command: hover }));
        }
        let mut out = Vec::new();
        let report = run_session(&lines(&input)[..], &mut out, &cfg, 9);
        assert_eq!(report.error, None);
        assert_eq!(report.logs.len(), 1);
        let r = replies(&out);
        let results: Vec<&StepResult> = r
            .iter()
            .filter_map(|m| match &m.body {
                Body::StepResult(s) => Some(s),
                _ => None,
            })
            .collect();
        assert_eq!(results.len(), cfg.max_steps());
        assert!(results[0].saturated && results[0].command.thrust == cfg.vehicle.limits.thrust_max);
        assert!(!results[1].saturated);
        assert!(matches!(r.last().unwrap().body, Body::EpisodeEnd { termination: Termination::Duration, .. }));
    }

    #[test]
    fn out_of_order_step_closes_session() {
        let cfg = static_cfg();
        let input = lines(&[
            hello(),
            msg(1, 0, Body::Reset { seed: 1, external_pose: false }),
            msg(
                1,
                3,
                Body::Action {
                    command: Command::hover(&cfg.vehicle),
                },
            ),
        ]);
        let mut out = Vec::new();
        let report = run_session(&input[..], &mut out, &cfg, 1);
        assert!(report.error.unwrap().contains("out of order"));
        assert_eq!(report.logs[0].termination, Termination::Disconnected);
        assert!(matches!(replies(&out).last().unwrap().body, Body::Error { .. }));
    }

    #[test]
    fn truncated_line_closes_session() {
        let mut input = lines(&[hello()]);
        input.extend_from_slice(br#"{"session":1,"step":0,"type":"re"#);
        let mut out = Vec::new();
        let report = run_session(&input[..], &mut out, &static_cfg(), 1);
        assert!(report.error.unwrap().contains("truncated"));
    }

    #[test]
    fn external_pose_outside_mixed_reality_rejected() {
        let cfg = static_cfg();
        let pose = ExternalPose {
            position: Vector3::zeros(),
            velocity: Vector3::zeros(),
            attitude: UnitQuaternion::identity(),
            acceleration: None,
        };
        let input = lines(&[
            hello(),
            msg(1, 0, Body::Reset { seed: 1, external_pose: false }),
            msg(1, 0, Body::ExternalPose { pose }),
        ]);
        let mut out = Vec::new();
        let report = run_session(&input[..], &mut out, &cfg, 1);
        assert!(report.error.unwrap().contains("external_pose"));
    }

    #[test]
    fn payload_round_trips_frames() {
        let frame = Frame {
            width: 2,
            height: 1,
            channels: 1,
            data: vec![0, 255],
        };
        let w = WireFrame::from(&frame);
        assert_eq!(w.data, "AP8=");
        assert_eq!(w.to_frame().unwrap(), frame);
        let bad = WireFrame { data: "AP8AAA==".into(), ..w };
        assert!(bad.to_frame().is_err());
    }

    #[test]
    fn hover_client_in_memory() {
        // Client and server on opposite ends of in-memory buffers, one message
        // at a time through a lock-step shim.
        let cfg = static_cfg();
        let mut policy = HoverPolicy::new(&cfg.vehicle);
        let (cli_out, srv_in) = std::sync::mpsc::channel::<Vec<u8>>();
        let (srv_out, cli_in) = std::sync::mpsc::channel::<Vec<u8>>();
        let server = thread::spawn(move || {
            run_session(
                BufReader::new(ChannelReader::new(srv_in)),
                ChannelWriter(srv_out),
                &cfg,
                4,
            )
        });
        let mut client = Client::new(BufReader::new(ChannelReader::new(cli_in)), ChannelWriter(cli_out));
        let info = client.hello().unwrap();
        assert_eq!(client.session(), 4);
        let ep = drive_episode(&mut client, 2, &mut policy).unwrap();
        assert_eq!(ep.results.len() as u64, info.max_steps);
        assert!(ep.results.iter().all(|r| r.reward.total == 1.0 && r.score.p_c == 1.0));
        drop(client);
        let report = server.join().unwrap();
        assert_eq!(report.logs.len(), 1);
        assert_eq!(report.error, None);
    }

    struct ChannelReader {
        rx: std::sync::mpsc::Receiver<Vec<u8>>,
        buf: Vec<u8>,
        pos: usize,
    }

    impl ChannelReader {
        fn new(rx: std::sync::mpsc::Receiver<Vec<u8>>) -> Self {
            Self { rx, buf: Vec::new(), pos: 0 }
        }
    }

    impl io::Read for ChannelReader {
        fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
            if self.pos == self.buf.len() {
                match self.rx.recv() {
                    Ok(b) => {
                        self.buf = b;
                        self.pos = 0;
                    }
                    Err(_) => return Ok(0),
                }
            }
            let n = out.len().min(self.buf.len() - self.pos);
            out[..n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
            self.pos += n;
            Ok(n)
        }
    }

    struct ChannelWriter(std::sync::mpsc::Sender<Vec<u8>>);

    impl Write for ChannelWriter {
        fn write(&mut self, b: &[u8]) -> io::Result<usize> {
            self.0
                .send(b.to_vec())
                .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "peer gone"))?;
            Ok(b.len())
        }

        fn flush(&mut self) -> io::Result<()> {
            Ok(())
        }
    }
}
