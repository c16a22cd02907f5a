use nalgebra::{DMatrix, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vatrack::controllers::{
    dare_solve, lqg_step, pid_step, privileged_lqg_step, spectral_radius, LqgConfig, LqgDesign, LqgMemory,
    MeasurementModel, OwnState, PidDesign, PidGains, PidMemory, DARE_DEFAULT_MAX_ITER, DARE_DEFAULT_TOL,
};
use vatrack::dynamics::VehicleParams;
use vatrack::harness::{run_episode, ControllerSpec, EpisodeConfig, TargetSpec, Termination};
use vatrack::perception::{BBox, CameraModel, RelativeState};
use vatrack::trajectories::{Interval, Trajectory};

fn random_matrix(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

#[test]
fn random_systems_are_stabilized() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for case in 0..100 {
        let n = rng.random_range(1..=6);
        let m = rng.random_range(1..=n.min(3));
        let mut a = random_matrix(&mut rng, n, n, 1.0);
        // Spread open-loop radii over roughly [0.5, 1.6]; generic (A, B) is controllable.
        let target_radius = rng.random_range(0.5..1.6);
        let rho = spectral_radius(&a);
        if rho > 0.0 {
            a *= target_radius / rho;
        }
        let b = random_matrix(&mut rng, n, m, 1.0);
        let c = random_matrix(&mut rng, n, n, 1.0);
        let q = c.transpose() * &c + DMatrix::identity(n, n) * 1e-3;
        let s = random_matrix(&mut rng, m, m, 1.0);
        let r = s.transpose() * &s + DMatrix::identity(m, m) * 0.1;

        let sol = dare_solve(&a, &b, &q, &r, DARE_DEFAULT_TOL, DARE_DEFAULT_MAX_ITER)
            .unwrap_or_else(|e| panic!("case {case} (n={n}, m={m}): {e}"));
        let closed = &a - &b * &sol.k;
        assert!(spectral_radius(&closed) < 1.0, "case {case}");

        // Residual of the Riccati equation, evaluated independently.
        let p = &sol.p;
        let btpb = &r + b.transpose() * p * &b;
        let gain = btpb.clone().try_inverse().unwrap() * b.transpose() * p * &a;
        let rhs = a.transpose() * p * &a - a.transpose() * p * &b * &gain + &q;
        let residual = (&rhs - p).amax();
        assert!(residual < 1e-8 * p.amax().max(1.0), "case {case}: residual {residual}");
        assert!((&gain - &sol.k).amax() < 1e-8 * sol.k.amax().max(1.0));
        assert!((p - p.transpose()).amax() == 0.0);
        assert!(p.symmetric_eigenvalues().iter().all(|l| *l >= -1e-9));
    }
}

#[test]
fn nominal_design_is_stable() {
    let cfg = EpisodeConfig::default();
    let d = LqgDesign::new(
        LqgConfig::default(),
        cfg.vehicle,
        cfg.reward.d_r,
        cfg.camera,
        cfg.observation.target_radius,
        cfg.dt,
    )
    .unwrap();
    assert!(d.controller_radius < 1.0 && d.estimator_radius < 1.0);
}

fn offset_config(body_offset: Vector3<f64>, yaw: f64, duration: f64) -> EpisodeConfig {
    let mut cfg = EpisodeConfig::default();
    cfg.duration = duration;
    cfg.spawn.yaw = Interval::new(yaw, yaw);
    let rot = UnitQuaternion::from_euler_angles(0.0, 0.0, yaw);
    let d = rot * (body_offset - Vector3::new(cfg.reward.d_r, 0.0, 0.0));
    cfg.target = TargetSpec::Fixed {
        trajectory: Trajectory::Cubic {
            origin: Vector3::zeros(),
            direction: d,
            coefficients: [1.0, 0.0, 0.0, 0.0],
        },
    };
    cfg.controller = ControllerSpec::PrivilegedLqg {
        config: LqgConfig::default(),
    };
    cfg
}

#[test]
fn step_offset_settles_within_four_seconds() {
    let cfg = offset_config(Vector3::new(1.0, 0.0, 0.0), 0.0, 8.0);
    let log = run_episode(&cfg, 0).unwrap();
    assert_eq!(log.termination, Termination::Duration);
    let rel_x = |k: usize| {
        let r = &log.records[k];
        let y = r.tracker.attitude.inverse() * (r.target.position - r.tracker.position);
        y.x
    };
    assert!((rel_x(0) - 1.0).abs() < 1e-12);
    let settle = (0..log.records.len())
        .rev()
        .find(|&k| (rel_x(k) - cfg.reward.d_r).abs() >= 0.05)
        .map_or(0, |k| k + 1);
    let t = settle as f64 * cfg.dt;
    assert!(t <= 4.0, "settled at {t} s");
    assert!(log.records.iter().all(|r| !r.reward.collided));
}

#[test]
fn static_targets_are_acquired() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let half = 0.5 * CameraModel::default().fov;
    for seed in 0..20 {
        let x: f64 = rng.random_range(0.6..1.5);
        let ay: f64 = rng.random_range(-0.6 * half..0.6 * half);
        let az: f64 = rng.random_range(-0.6 * half..0.6 * half);
        let offset = Vector3::new(x, x * ay.tan(), x * az.tan());
        let yaw = rng.random_range(-3.0..3.0);
        let cfg = offset_config(offset, yaw, 10.0);
        let log = run_episode(&cfg, seed).unwrap();
        assert_eq!(log.termination, Termination::Duration, "seed {seed}");
        let last = log.records.last().unwrap().score.p_c;
        assert!(last > 0.95, "seed {seed}: final score {last}");
    }
}

#[test]
fn privileged_episode_on_slow_sinusoid() {
    let mut cfg = EpisodeConfig::default();
    cfg.target = TargetSpec::RandomSinusoid {
        peak_velocity: Some(0.5),
        ranges: Default::default(),
    };
    cfg.controller = ControllerSpec::PrivilegedLqg {
        config: LqgConfig::default(),
    };
    for seed in 0..3 {
        let log = run_episode(&cfg, seed).unwrap();
        assert!(log.p_c() >= 0.9, "seed {seed}: {}", log.p_c());
    }
}

#[test]
fn pid_episode_on_slow_sinusoid() {
    let mut cfg = EpisodeConfig::default();
    cfg.target = TargetSpec::RandomSinusoid {
        peak_velocity: Some(0.5),
        ranges: Default::default(),
    };
    cfg.controller = ControllerSpec::Pid {
        gains: PidGains::default(),
    };
    for seed in 0..3 {
        let log = run_episode(&cfg, seed).unwrap();
        assert!(log.p_c() >= 0.85, "seed {seed}: {}", log.p_c());
    }
}

fn random_bbox(rng: &mut impl Rng) -> Option<BBox> {
    rng.random_bool(0.8).then(|| BBox {
        cx: rng.random_range(0.0..84.0),
        cy: rng.random_range(0.0..84.0),
        radius: rng.random_range(0.5..40.0),
        confidence: 1.0,
    })
}

fn random_attitude(rng: &mut impl Rng) -> UnitQuaternion<f64> {
    UnitQuaternion::from_euler_angles(
        rng.random_range(-1.2..1.2),
        rng.random_range(-1.2..1.2),
        rng.random_range(-3.1..3.1),
    )
}

#[test]
fn commands_always_within_limits() {
    let cfg = EpisodeConfig::default();
    let veh = VehicleParams::default();
    let lqg = LqgDesign::new(LqgConfig::default(), veh, 0.5, cfg.camera, 0.15, cfg.dt).unwrap();
    let pid = PidDesign {
        gains: PidGains::default(),
        vehicle: veh,
        d_r: 0.5,
        camera: cfg.camera,
        target_radius: 0.15,
        dt: cfg.dt,
    };
    let meas = MeasurementModel {
        pixel_sigma: 1.0,
        radius_jitter: 0.05,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut lqg_mem = LqgMemory::new();
    let mut pid_mem = PidMemory::default();
    let within = |c: &vatrack::dynamics::Command| veh.limits.saturate(c) == *c && c.is_finite();
    for _ in 0..20_000 {
        let bbox = random_bbox(&mut rng);
        let q = random_attitude(&mut rng);
        match lqg_step(&lqg, &mut lqg_mem, bbox.as_ref(), Some(&q), &meas) {
            Ok(c) => assert!(within(&c), "{c:?}"),
            Err(e) => assert!(!lqg_mem.is_initialized(), "{e}"),
        }
        let c = pid_step(&pid, &mut pid_mem, bbox.as_ref(), Some(&q)).unwrap();
        assert!(within(&c), "{c:?}");
        let v = |r: &mut ChaCha8Rng, s: f64| Vector3::new(r.random_range(-s..s), r.random_range(-s..s), r.random_range(-s..s));
        let rel = RelativeState {
            position: v(&mut rng, 5.0),
            velocity: v(&mut rng, 5.0),
            acceleration: v(&mut rng, 20.0),
        };
        let own = OwnState {
            attitude: Some(q),
            velocity: Some(v(&mut rng, 5.0)),
            acceleration: Some(v(&mut rng, 20.0)),
        };
        let c = privileged_lqg_step(&lqg, &rel, &own).unwrap();
        assert!(within(&c), "{c:?}");
    }
}

#[test]
fn controller_updates_are_deterministic() {
    let cfg = EpisodeConfig::default();
    let veh = VehicleParams::default();
    let lqg = LqgDesign::new(LqgConfig::default(), veh, 0.5, cfg.camera, 0.15, cfg.dt).unwrap();
    let pid = PidDesign {
        gains: PidGains::default(),
        vehicle: veh,
        d_r: 0.5,
        camera: cfg.camera,
        target_radius: 0.15,
        dt: cfg.dt,
    };
    let meas = MeasurementModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let mut lqg_mem = LqgMemory::new();
    let mut pid_mem = PidMemory::default();
    for _ in 0..2000 {
        let bbox = random_bbox(&mut rng);
        let q = random_attitude(&mut rng);
        let (mut l2, mut p2) = (lqg_mem.clone(), pid_mem);
        let a = lqg_step(&lqg, &mut lqg_mem, bbox.as_ref(), Some(&q), &meas);
        let b = lqg_step(&lqg, &mut l2, bbox.as_ref(), Some(&q), &meas);
        assert_eq!(a.ok(), b.ok());
        assert_eq!(lqg_mem, l2);
        let a = pid_step(&pid, &mut pid_mem, bbox.as_ref(), Some(&q)).unwrap();
        let b = pid_step(&pid, &mut p2, bbox.as_ref(), Some(&q)).unwrap();
        assert_eq!(a, b);
        assert_eq!(pid_mem, p2);
    }
}

#[test]
fn missing_attitude_rejected() {
    let cfg = EpisodeConfig::default();
    let veh = VehicleParams::default();
    let lqg = LqgDesign::new(LqgConfig::default(), veh, 0.5, cfg.camera, 0.15, cfg.dt).unwrap();
    let rel = RelativeState {
        position: Vector3::new(0.5, 0.0, 0.0),
        velocity: Vector3::zeros(),
        acceleration: Vector3::zeros(),
    };
    assert!(privileged_lqg_step(&lqg, &rel, &OwnState::default()).is_err());
}
