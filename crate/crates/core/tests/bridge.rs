use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vatrack::bridge::{
    decode, drive_episode, drive_external_episode, encode, serve_tcp, Body, BridgeError, Client, Message,
    ObservationPayload, ServeOptions, SessionInfo, SessionReport, StepResult, WireFrame, PROTOCOL_VERSION,
};
use vatrack::controllers::LqgConfig;
use vatrack::dynamics::Command;
use vatrack::harness::{
    build_policy, run_episode, ControllerSpec, EpisodeConfig, ExternalPose, HoverPolicy, ObservationMode,
    PoseSource, PrivilegedObservation, TargetSpec, Termination,
};
use vatrack::metrics::ScoreSample;
use vatrack::perception::{BBox, DetectorNoise, Frame, RelativeState};
use vatrack::reward::RewardTerms;
use vatrack::trajectories::{Interval, Trajectory};

/// Serves `connections` sessions in the background; returns the address and
/// a handle yielding the session reports in completion order.
fn spawn_server(cfg: EpisodeConfig, connections: usize) -> (SocketAddr, thread::JoinHandle<Vec<SessionReport>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let reports = Arc::new(Mutex::new(Vec::new()));
    let sink = {
        let reports = Arc::clone(&reports);
        Arc::new(move |r: &SessionReport| reports.lock().unwrap().push(r.clone()))
    };
    let handle = thread::spawn(move || {
        serve_tcp(
            listener,
            cfg,
            ServeOptions {
                max_connections: Some(connections),
                sink: Some(sink),
            },
        )
        .unwrap();
        let out = reports.lock().unwrap().clone();
        out
    });
    (addr, handle)
}

fn vision_config() -> EpisodeConfig {
    let mut cfg = EpisodeConfig::default();
    cfg.duration = 8.0;
    cfg.target = TargetSpec::RandomSinusoid {
        peak_velocity: Some(1.0),
        ranges: Default::default(),
    };
    cfg.detector = DetectorNoise {
        pixel_sigma: 0.5,
        miss_probability: 0.05,
        radius_jitter: 0.02,
    };
    cfg.controller = ControllerSpec::Lqg {
        config: LqgConfig::default(),
    };
    cfg
}

fn remote_log(addr: SocketAddr, cfg: &EpisodeConfig, seed: u64) -> vatrack::bridge::RemoteEpisode {
    let mut client = Client::connect(addr).unwrap();
    client.hello().unwrap();
    let mut policy = build_policy(cfg).unwrap();
    drive_episode(&mut client, seed, policy.as_mut()).unwrap()
}

#[test]
fn loopback_matches_in_process_bit_for_bit() {
    let cfg = vision_config();
    let (addr, server) = spawn_server(cfg, 1);
    let remote = remote_log(addr, &cfg, 5);
    let reports = server.join().unwrap();
    let local = run_episode(&cfg, 5).unwrap();

    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].logs.len(), 1);
    assert_eq!(reports[0].logs[0].to_ndjson(), local.to_ndjson());
    assert_eq!(remote.results.len(), local.records.len());
    for (r, l) in remote.results.iter().zip(&local.records) {
        assert_eq!((r.reward, r.score, r.command), (l.reward, l.score, l.command));
    }
    assert_eq!(remote.summary.p_c, local.p_c());
}

#[test]
fn concurrent_sessions_equal_solo_runs() {
    let cfg = vision_config();
    let seeds = [10u64, 11, 12, 13];
    let (addr, server) = spawn_server(cfg, seeds.len());
    let clients: Vec<_> = seeds
        .iter()
        .map(|&s| thread::spawn(move || (s, remote_log(addr, &cfg, s))))
        .collect();
    let mut remote: Vec<_> = clients.into_iter().map(|h| h.join().unwrap()).collect();
    remote.sort_by_key(|(s, _)| *s);
    let mut reports = server.join().unwrap();
    reports.sort_by_key(|r| r.logs[0].seed);
    for ((seed, ep), report) in remote.iter().zip(&reports) {
        let solo = run_episode(&cfg, *seed).unwrap();
        assert_eq!(report.logs[0].to_ndjson(), solo.to_ndjson(), "seed {seed}");
        assert_eq!(ep.summary.p_c, solo.p_c());
    }
}

#[test]
fn malformed_client_only_closes_its_own_session() {
    let cfg = vision_config();
    let (addr, server) = spawn_server(cfg, 2);

    let bad = thread::spawn(move || {
        let stream = TcpStream::connect(addr).unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut w = &stream;
        let send = |w: &mut &TcpStream, body: Body| {
            w.write_all(&encode(&Message { session: 0, step: 0, body })).unwrap();
        };
        send(
            &mut w,
            Body::Hello {
                version: PROTOCOL_VERSION.into(),
                info: None,
            },
        );
        let mut line = Vec::new();
        reader.read_until(b'\n', &mut line).unwrap();
        let session = decode(&line).unwrap().session;
        w.write_all(&encode(&Message {
            session,
            step: 0,
            body: Body::Reset { seed: 1, external_pose: false },
        }))
        .unwrap();
        line.clear();
        reader.read_until(b'\n', &mut line).unwrap();
        assert!(matches!(decode(&line).unwrap().body, Body::Observation(_)));
        w.write_all(b"{\"session\": 1, \"step\": 0, \"type\": \"action\", \"command\": {\n").unwrap();
        line.clear();
        reader.read_until(b'\n', &mut line).unwrap();
        let reply = decode(&line).unwrap();
        let Body::Error { message } = reply.body else {
            panic!("expected error, got {reply:?}")
        };
        // The server hangs up after the error.
        line.clear();
        assert_eq!(reader.read_until(b'\n', &mut line).unwrap(), 0);
        message
    });
    let good = thread::spawn(move || remote_log(addr, &cfg, 21));

    let message = bad.join().unwrap();
    assert!(message.contains("byte"), "{message}");
    let ep = good.join().unwrap();
    assert_eq!(ep.summary.termination, Termination::Duration);
    let reports = server.join().unwrap();
    let failed: Vec<_> = reports.iter().filter(|r| r.error.is_some()).collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0].logs[0].termination, Termination::Disconnected);
    let ok = reports.iter().find(|r| r.error.is_none()).unwrap();
    assert_eq!(ok.logs[0].to_ndjson(), run_episode(&cfg, 21).unwrap().to_ndjson());
}

fn parked_target_config() -> EpisodeConfig {
    let mut cfg = EpisodeConfig::default();
    cfg.duration = 4.0;
    cfg.target = TargetSpec::Fixed {
        trajectory: Trajectory::Setpoint { origin: Vector3::zeros() },
    };
    cfg.spawn.half_extent = Vector3::zeros();
    cfg.spawn.yaw = Interval::new(0.0, 0.0);
    cfg.reward.k_v = 0.0;
    cfg.reward.k_u = 0.0;
    cfg
}

#[test]
fn echo_hover_client_earns_full_reward() {
    let cfg = parked_target_config();
    let (addr, server) = spawn_server(cfg, 1);
    let mut client = Client::connect(addr).unwrap();
    let info = client.hello().unwrap();
    assert_eq!(info.max_steps, 200);
    let mut hover = HoverPolicy::new(&cfg.vehicle);
    let ep = drive_episode(&mut client, 0, &mut hover).unwrap();
    drop(client);
    assert_eq!(ep.results.len(), 200);
    assert!(ep.results.iter().all(|r| r.reward.total == 1.0 && !r.saturated));
    assert_eq!(ep.summary.p_c, 1.0);
    server.join().unwrap();
}

#[test]
fn saturated_action_is_reported() {
    let cfg = parked_target_config();
    let (addr, server) = spawn_server(cfg, 1);
    let mut client = Client::connect(addr).unwrap();
    client.hello().unwrap();
    client.send(0, Body::Reset { seed: 0, external_pose: false }).unwrap();
    let (step, _) = client.observation().unwrap();
    let (result, end) = client.act(step, Command::new(25.0, Vector3::new(0.0, 0.0, -9.0))).unwrap();
    assert!(result.saturated && end.is_none());
    assert_eq!(result.command.thrust, cfg.vehicle.limits.thrust_max);
    assert_eq!(result.command.rates.z, -cfg.vehicle.limits.rate_max);
    drop(client);
    server.join().unwrap();
}

#[test]
fn version_mismatch_is_refused() {
    let (addr, server) = spawn_server(parked_target_config(), 1);
    let mut client = Client::connect(addr).unwrap();
    client
        .send(
            0,
            Body::Hello {
                version: "2.1".into(),
                info: None,
            },
        )
        .unwrap();
    match client.recv() {
        Err(BridgeError::Remote(m)) => assert!(m.contains("unsupported version")),
        other => panic!("{other:?}"),
    }
    server.join().unwrap();
}

struct Replay(Vec<ExternalPose>);

impl PoseSource for Replay {
    fn pose(&mut self, step: usize, _: Option<&Command>) -> Option<ExternalPose> {
        self.0.get(step).copied()
    }
}

#[test]
fn remote_mixed_reality_replay_reproduces_scores() {
    let cfg = vision_config();
    let local = run_episode(&cfg, 8).unwrap();
    let (addr, server) = spawn_server(cfg, 1);
    let mut client = Client::connect(addr).unwrap();
    client.hello().unwrap();
    let mut source = Replay(local.records.iter().map(ExternalPose::from_record).collect());
    let mut policy = build_policy(&cfg).unwrap();
    let ep = drive_external_episode(&mut client, 8, &mut source, policy.as_mut()).unwrap();
    drop(client);
    server.join().unwrap();
    assert_eq!(ep.results.len(), local.records.len());
    for (r, l) in ep.results.iter().zip(&local.records) {
        assert_eq!((r.score, r.reward, r.command), (l.score, l.reward, l.command));
    }
}

#[test]
fn non_finite_pose_is_rejected() {
    let cfg = parked_target_config();
    let (addr, server) = spawn_server(cfg, 1);
    let mut client = Client::connect(addr).unwrap();
    client.hello().unwrap();
    client.send(0, Body::Reset { seed: 0, external_pose: true }).unwrap();
    // NaN cannot be written as a JSON number, so the pose arrives as null.
    let pose = ExternalPose {
        position: Vector3::new(f64::NAN, 0.0, 0.0),
        velocity: Vector3::zeros(),
        attitude: UnitQuaternion::identity(),
        acceleration: None,
    };
    client.send(0, Body::ExternalPose { pose }).unwrap();
    assert!(matches!(client.recv(), Err(BridgeError::Remote(_))));
    let reports = server.join().unwrap();
    assert!(reports[0].error.is_some());
}

fn finite(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let x = match rng.random_range(0..4) {
            0 => f64::from_bits(rng.random()),
            1 => rng.random_range(-1.0..1.0),
            2 => rng.random_range(-1e6..1e6),
            _ => [0.0, -0.0, f64::MIN_POSITIVE, f64::MAX, 5e-324, 0.1][rng.random_range(0..6)],
        };
        if x.is_finite() {
            return x;
        }
    }
}

fn v3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(finite(rng), finite(rng), finite(rng))
}

fn text(rng: &mut ChaCha8Rng) -> String {
    const PIECES: [&str; 8] = ["a", "é", "\"", "\\", "\n", "\u{1F680}", "\t", "\u{0}"];
    (0..rng.random_range(0..12)).map(|_| PIECES[rng.random_range(0..PIECES.len())]).collect()
}

fn random_message(rng: &mut ChaCha8Rng) -> Message {
    let terms = |rng: &mut ChaCha8Rng| RewardTerms {
        r_x: finite(rng),
        r_y: finite(rng),
        r_z: finite(rng),
        r_e: finite(rng),
        r_v: finite(rng),
        r_u: finite(rng),
        collided: rng.random(),
        total: finite(rng),
    };
    let quat = |rng: &mut ChaCha8Rng| {
        UnitQuaternion::new_unchecked(Quaternion::new(finite(rng), finite(rng), finite(rng), finite(rng)))
    };
    let body = match rng.random_range(0..8) {
        0 => Body::Hello {
            version: text(rng),
            info: rng.random_bool(0.5).then(|| SessionInfo {
                config_hash: text(rng),
                mode: [ObservationMode::Frames, ObservationMode::Bboxes, ObservationMode::Privileged][rng.random_range(0..3)],
                dt: finite(rng),
                max_steps: rng.random(),
            }),
        },
        1 => Body::Reset {
            seed: rng.random(),
            external_pose: rng.random(),
        },
        2 => {
            let frame = Frame {
                width: rng.random_range(1..5),
                height: rng.random_range(1..5),
                channels: 1,
                data: Vec::new(),
            };
            let frame = Frame {
                data: (0..frame.width * frame.height).map(|_| rng.random()).collect(),
                ..frame
            };
            Body::Observation(ObservationPayload {
                time: finite(rng),
                attitude: quat(rng),
                detections: rng.random_bool(0.5).then(|| {
                    (0..3)
                        .map(|_| {
                            rng.random_bool(0.7).then(|| BBox {
                                cx: finite(rng),
                                cy: finite(rng),
                                radius: finite(rng),
                                confidence: finite(rng),
                            })
                        })
                        .collect()
                }),
                frames: rng.random_bool(0.5).then(|| vec![WireFrame::from(&frame)]),
                privileged: rng.random_bool(0.5).then(|| PrivilegedObservation {
                    relative: RelativeState {
                        position: v3(rng),
                        velocity: v3(rng),
                        acceleration: v3(rng),
                    },
                    velocity: v3(rng),
                    acceleration: v3(rng),
                }),
            })
        }
        3 => Body::Action {
            command: Command::new(finite(rng), v3(rng)),
        },
        4 => Body::StepResult(StepResult {
            reward: terms(rng),
            score: ScoreSample {
                p_rho: finite(rng),
                p_theta: finite(rng),
                p_phi: finite(rng),
                p_c: finite(rng),
            },
            command: Command::new(finite(rng), v3(rng)),
            saturated: rng.random(),
            visible: rng.random(),
            detected: rng.random(),
            done: rng.random(),
        }),
        5 => Body::EpisodeEnd {
            termination: [
                Termination::Duration,
                Termination::Collision,
                Termination::TargetLost,
                Termination::Aborted,
                Termination::Disconnected,
            ][rng.random_range(0..5)]
            .clone(),
            steps: rng.random(),
            p_c: finite(rng),
        },
        6 => Body::ExternalPose {
            pose: ExternalPose {
                position: v3(rng),
                velocity: v3(rng),
                attitude: quat(rng),
                acceleration: rng.random_bool(0.5).then(|| v3(rng)),
            },
        },
        _ => Body::Error { message: text(rng) },
    };
    Message {
        session: rng.random(),
        step: rng.random(),
        body,
    }
}

#[test]
fn fuzzed_messages_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..10_000 {
        let m = random_message(&mut rng);
        let bytes = encode(&m);
        assert_eq!(bytes.iter().filter(|b| **b == b'\n').count(), 1);
        let back = decode(&bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&bytes)));
        assert_eq!(back, m);
        // Bit-level: re-encoding reproduces the same bytes, so -0.0 and
        // subnormals survive.
        assert_eq!(encode(&back), bytes);
    }
}

#[test]
fn truncated_messages_fail_with_offsets() {
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    for _ in 0..1000 {
        let bytes = encode(&random_message(&mut rng));
        let cut = rng.random_range(1..bytes.len() - 1);
        // Cutting just before the closing brace still leaves invalid JSON.
        let err = decode(&bytes[..cut]).unwrap_err();
        assert!(err.offset <= cut, "{} > {cut}", err.offset);
    }
}
