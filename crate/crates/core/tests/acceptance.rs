//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p crowdnav-core --test acceptance`. Exits non-zero
//! if any criterion fails.

use std::time::{Duration, Instant};

use crowdnav_core::geometry::{height_correct, homography_fit, max_residual, DistortionCoeffs, GdConfig, Homography};
use crowdnav_core::mapping::{
    decode_dataset, encode_dataset, render_occupancy, split_dataset, MapParams, Scene, MAP_SIZE, OCCUPIED, ROBOT_CELL,
};
use crowdnav_core::neuralnet::{
    decode_params, encode_params, evaluate_mse, grad_check, grad_check_with_fault, train, Architecture, ConvSpec,
    GradientFault, NetworkParams, Samples, TrainConfig,
};
use crowdnav_core::simworld::{
    pilot_dataset, pilot_median_steps, record_episode, replay, run_episode, NetworkPolicy, RobotCommand,
    ScenarioClass, ScenarioSpec, ScriptedPilot, DT,
};
use crowdnav_core::{Disc, Point2, Rect, RobotPose};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn homography_recovery() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut good = 0;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let truth = Homography::new([
            rng.random_range(0.8..1.2),
            rng.random_range(-0.2..0.2),
            rng.random_range(-50.0..50.0),
            rng.random_range(-0.2..0.2),
            rng.random_range(0.8..1.2),
            rng.random_range(-50.0..50.0),
            rng.random_range(-4e-4..4e-4),
            rng.random_range(-4e-4..4e-4),
            1.0,
        ])
        .unwrap();
        let src: Vec<Point2> = (0..8)
            .map(|_| Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)))
            .collect();
        let dst: Vec<Point2> = src.iter().map(|&p| truth.apply(p).unwrap()).collect();
        let residual = homography_fit(&src, &dst, &GdConfig::default())
            .and_then(|fit| max_residual(&fit.homography, &src, &dst))
            .unwrap_or(f64::INFINITY);
        worst = worst.max(residual);
        if residual < 1e-2 {
            good += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        good >= 48 && within(t, 60.0),
        format!("{good}/50 fits under 1e-2 px (worst {worst:.2e} px) in {:.1} s", t.as_secs_f64()),
    )
}

fn distortion_round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for _ in 0..20 {
        let c = DistortionCoeffs {
            k1: rng.random_range(-0.2..=0.2),
            k2: rng.random_range(-0.05..=0.05),
            k3: rng.random_range(-0.05..=0.05),
            p1: rng.random_range(-0.01..=0.01),
            p2: rng.random_range(-0.01..=0.01),
        };
        for i in 0..21 {
            for j in 0..21 {
                let p = Point2::new(-0.5 + 0.05 * i as f64, -0.5 + 0.05 * j as f64);
                match c.undistort(c.distort(p), 1e-8, 100) {
                    Ok(q) => worst = worst.max(q.distance(p)),
                    Err(_) => failures += 1,
                }
            }
        }
    }
    let t = start.elapsed();
    outcome(
        failures == 0 && worst < 1e-6 && within(t, 1.0),
        format!("max error {worst:.2e} over 20×441 points, {failures} failures, {:.3} s", t.as_secs_f64()),
    )
}

fn perspective_correction() -> Outcome {
    let mut ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_linearity = 0.0f64;
    for _ in 0..1000 {
        let p = Point2::new(rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0));
        let hc = rng.random_range(100.0..1000.0);
        ok &= height_correct(p, 0.0, hc).unwrap() == p;
        ok &= height_correct(p, hc / 2.0, hc).unwrap() == Point2::new(p.x / 2.0, p.y / 2.0);
        let a = rng.random_range(-4.0..4.0);
        let ht = rng.random_range(0.0..hc * 0.9);
        let lhs = height_correct(p * a, ht, hc).unwrap();
        let rhs = height_correct(p, ht, hc).unwrap() * a;
        worst_linearity = worst_linearity.max(lhs.distance(rhs) / (1.0 + rhs.norm()));
    }
    ok &= height_correct(Point2::new(10.0, -6.0), 300.0, 600.0).unwrap() == Point2::new(5.0, -3.0);
    ok &= height_correct(Point2::new(100.0, 40.0), 150.0, 600.0).unwrap() == Point2::new(75.0, 30.0);
    outcome(
        ok && worst_linearity < 1e-14,
        format!("analytic cases exact: {ok}; linearity error {worst_linearity:.1e}"),
    )
}

/// Per-cell containment, evaluated in the world frame.
fn occupancy_oracle(scene: &Scene, cell: f64) -> Vec<u8> {
    let o = scene.robot.position();
    let bearing = (scene.goal.y - o.y).atan2(scene.goal.x - o.x);
    let (s, c) = bearing.sin_cos();
    let mut out = vec![0u8; MAP_SIZE * MAP_SIZE];
    for row in 0..MAP_SIZE {
        for col in 0..MAP_SIZE {
            let forward = (col as f64 - ROBOT_CELL as f64) * cell;
            let left = (ROBOT_CELL as f64 - row as f64) * cell;
            let w = Point2::new(o.x + forward * c - left * s, o.y + forward * s + left * c);
            let in_disc = scene.pedestrians.iter().any(|d| {
                let (dx, dy) = (w.x - d.center.x, w.y - d.center.y);
                dx * dx + dy * dy <= d.radius * d.radius
            });
            let in_wall = scene
                .walls
                .iter()
                .any(|r| w.x >= r.x0 && w.x <= r.x1 && w.y >= r.y0 && w.y <= r.y1);
            if in_disc || in_wall {
                out[row * MAP_SIZE + col] = OCCUPIED;
            }
        }
    }
    out
}

fn occupancy_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let params = MapParams::default();
    let mut mismatched_scenes = 0;
    let mut occupied = 0usize;
    for _ in 0..100 {
        let robot = RobotPose::new(rng.random_range(0.0..800.0), rng.random_range(0.0..500.0), rng.random_range(-3.2..3.2));
        let goal = Point2::new(rng.random_range(0.0..800.0), rng.random_range(0.0..500.0));
        let pedestrians = (0..rng.random_range(0..15))
            .map(|_| Disc {
                center: Point2::new(robot.x + rng.random_range(-400.0..400.0), robot.y + rng.random_range(-400.0..400.0)),
                radius: rng.random_range(10.0..45.0),
            })
            .collect();
        let walls = (0..rng.random_range(0..5))
            .map(|_| {
                let a = Point2::new(robot.x + rng.random_range(-450.0..450.0), robot.y + rng.random_range(-450.0..450.0));
                Rect::from_corners(a, a + Point2::new(rng.random_range(5.0..300.0), rng.random_range(5.0..300.0)))
            })
            .collect();
        let scene = Scene { robot, goal, pedestrians, walls };
        let (map, _) = render_occupancy(&scene, &params);
        let oracle = occupancy_oracle(&scene, params.cell_size());
        occupied += oracle.iter().filter(|&&v| v != 0).count();
        if map.cells() != oracle.as_slice() {
            mismatched_scenes += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        mismatched_scenes == 0 && within(t, 10.0),
        format!("{mismatched_scenes}/100 scenes differ ({occupied} occupied cells checked) in {:.2} s", t.as_secs_f64()),
    )
}

fn reduced_architecture() -> Architecture {
    Architecture {
        input_side: 16,
        conv: vec![
            ConvSpec { filters: 4, kernel: 5, stride: 2 },
            ConvSpec { filters: 6, kernel: 3, stride: 2 },
            ConvSpec { filters: 8, kernel: 3, stride: 2 },
        ],
        extra_features: 2,
        dense: vec![12, 6, 2],
    }
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let arch = reduced_architecture();
    let layers = arch.layer_count();
    let mut faults: Vec<GradientFault> = (0..layers).map(GradientFault::FlipWeightGrad).collect();
    faults.extend((1..layers).map(GradientFault::FlipInputGrad));
    let mut worst = 0.0f64;
    let mut weakest_mutation = f64::INFINITY;
    let mut params_count = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
        let mut p = NetworkParams::<f64>::init(arch.clone(), seed).unwrap();
        for l in p.layers_mut() {
            for b in l.bias.data_mut() {
                *b = rng.random_range(-0.1..0.1);
            }
        }
        params_count = p.param_count();
        let n = 3;
        let maps = (0..n * arch.input_cells()).map(|_| rng.random::<f64>()).collect();
        let extra = (0..n)
            .flat_map(|_| {
                let t: f64 = rng.random_range(-3.1..3.1);
                [t.sin(), t.cos()]
            })
            .collect();
        let targets = (0..n * 2).map(|_| rng.random_range(-5.0..5.0)).collect();
        let data = Samples::new(arch.input_cells(), 2, 2, maps, extra, targets).unwrap();
        worst = worst.max(grad_check(&p, &data, 1e-5).unwrap().max_rel_error);
        for &f in &faults {
            let r = grad_check_with_fault(&p, &data, 1e-5, Some(f)).unwrap();
            weakest_mutation = weakest_mutation.min(r.max_rel_error);
        }
    }
    let t = start.elapsed();
    outcome(
        worst < 1e-4 && weakest_mutation > 1e-1 && within(t, 120.0),
        format!(
            "max rel error {worst:.1e} over 10 nets of {params_count} params; weakest of {} mutations {weakest_mutation:.2}; {:.1} s",
            faults.len(),
            t.as_secs_f64()
        ),
    )
}

struct Trained {
    params: NetworkParams<f32>,
}

fn training_convergence(slot: &mut Option<Trained>) -> Outcome {
    let start = Instant::now();
    let records = pilot_dataset(2000, 0).unwrap();
    let (train_set, test_set) = split_dataset(&records, 0.1, 0).unwrap();
    let train_data = Samples::<f32>::from_records(&train_set);
    let test_data = Samples::<f32>::from_records(&test_set);
    let init = NetworkParams::<f32>::init(Architecture::crowd_cnn(), 0).unwrap();
    let initial = evaluate_mse(&init, &train_data).unwrap();
    let cfg = TrainConfig { steps: 5000, batch_size: 128, lr0: 1e-4, decay: 5e-5, seed: 0, ..TrainConfig::default() };
    let out = match train(init, &train_data, &cfg, |_| {}) {
        Ok(out) => out,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let final_train = evaluate_mse(&out.params, &train_data).unwrap();
    let test = evaluate_mse(&out.params, &test_data).unwrap();
    slot.replace(Trained { params: out.params });
    let t = start.elapsed();
    outcome(
        final_train <= 0.2 * initial && test <= 2.0 * final_train && within(t, 900.0),
        format!(
            "train MSE {initial:.1} -> {final_train:.1} ({:.1}%), test MSE {test:.1} ({:.2}x train), {:.0} s",
            100.0 * final_train / initial,
            test / final_train,
            t.as_secs_f64()
        ),
    )
}

fn closed_loop(trained: Option<&Trained>) -> Outcome {
    let Some(trained) = trained else {
        return outcome(false, "no trained network (training criterion did not produce one)");
    };
    let seeds = 1000..1020u64;
    let median = pilot_median_steps(ScenarioClass::Clear, seeds.clone(), 1000).unwrap().unwrap();
    let budget = 3 * median;
    let mut policy = NetworkPolicy::new(trained.params.clone());
    let mut run = |class| {
        let (mut ok, mut collisions) = (0, 0);
        for seed in seeds.clone() {
            let r = run_episode(&mut policy, &ScenarioSpec::random(class, seed), budget, DT).unwrap();
            ok += r.success as usize;
            collisions += r.collisions;
        }
        (ok, collisions)
    };
    let (clear_ok, clear_col) = run(ScenarioClass::Clear);
    let (sparse_ok, sparse_col) = run(ScenarioClass::Sparse);
    outcome(
        clear_ok >= 14 && sparse_ok >= 8,
        format!(
            "budget {budget} steps (3x pilot median {median}); clear {clear_ok}/20, sparse {sparse_ok}/20; collisions clear {clear_col}, sparse {sparse_col}"
        ),
    )
}

fn determinism_and_formats(trained: Option<&Trained>) -> Outcome {
    let mut notes = Vec::new();
    let records = pilot_dataset(300, 11).unwrap();
    let bytes = encode_dataset(&records);
    let back = decode_dataset(&bytes).unwrap();
    let dataset_ok = back == records && encode_dataset(&back) == bytes;
    notes.push(format!("dataset {}", if dataset_ok { "exact" } else { "DIFFERS" }));

    let params = trained
        .map(|t| t.params.clone())
        .unwrap_or_else(|| NetworkParams::init(Architecture::crowd_cnn(), 5).unwrap());
    let pbytes = encode_params(&params);
    let params_ok = decode_params(&pbytes, &Architecture::crowd_cnn()).map(|p| p == params).unwrap_or(false);
    notes.push(format!("params {}", if params_ok { "exact" } else { "DIFFERS" }));

    let data = Samples::<f32>::from_records(&records);
    let cfg = TrainConfig { steps: 15, batch_size: 32, lr0: 1e-4, decay: 5e-5, seed: 3, ..TrainConfig::default() };
    let run = || {
        train(NetworkParams::init(Architecture::crowd_cnn(), 1).unwrap(), &data, &cfg, |_| {})
            .unwrap()
            .history
            .iter()
            .map(|s| (s.lr.to_bits(), s.loss.to_bits()))
            .collect::<Vec<_>>()
    };
    let history_ok = run() == run();
    notes.push(format!("loss history {}", if history_ok { "identical" } else { "DIFFERS" }));

    let mut replay_ok = true;
    for spec in [ScenarioSpec::clear(4), ScenarioSpec::sparse(3, 4), ScenarioSpec::crowded(8, 2, 4)] {
        let (recs, result) = record_episode(&mut ScriptedPilot, &spec, 200, DT).unwrap();
        let cmds: Vec<RobotCommand> = recs
            .iter()
            .map(|r| RobotCommand::new(f64::from(r.speed), f64::from(r.rotation)))
            .collect();
        replay_ok &= replay(&spec, &cmds, DT).unwrap() == result.trajectory;
    }
    notes.push(format!("episode replay {}", if replay_ok { "identical" } else { "DIFFERS" }));
    outcome(dataset_ok && params_ok && history_ok && replay_ok, notes.join(", "))
}

fn main() {
    let mut trained = None;
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    report("homography recovery", homography_recovery());
    report("distortion round trip", distortion_round_trip());
    report("perspective correction", perspective_correction());
    report("occupancy oracle equivalence", occupancy_equivalence());
    report("gradient check", gradient_check());
    report("training convergence", training_convergence(&mut trained));
    report("closed-loop evaluation", closed_loop(trained.as_ref()));
    report("determinism and formats", determinism_and_formats(trained.as_ref()));
    let passed = results.iter().filter(|(_, o)| o.pass).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
