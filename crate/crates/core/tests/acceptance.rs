//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line with
//! the measured numbers before asserting, so `cargo test --test acceptance --
//! --nocapture` gives a readable report.

use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cssdf::bench::{self, AblationConfig, AblationVariant, LossVariant, PlanningBenchConfig};
use cssdf::dataset::{build_voxel_map, generate_self_collision, FieldSample, SelfCollisionConfig, SelfVariant};
use cssdf::field::train::loss_and_param_grad;
use cssdf::field::{FieldModel, FieldSpec, GradMode, LossWeights};
use cssdf::geometry::grid::{oracle_self_distance, CSpaceGrid, GridSpec};
use cssdf::mpc::qp::{solve, solve_active_set, QpInstance, QpSettings, QpStatus};
use cssdf::mpc::{moving_obstacle_episode, MpcParams};
use cssdf::robot::RobotModel;
use cssdf::traj::PenaltyParams;

// Criteria carry wall-clock limits and timing checks, so they run one at a time.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, pass: bool, detail: String) {
    println!("[{id:>2}] {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

fn eikonal_share(g: &CSpaceGrid) -> (f64, usize) {
    let band = 2.0 * g.spec.max_cell_size();
    let (mut n, mut ok) = (0, 0);
    for i in 0..g.spec.len() {
        if g.values[i].abs() <= band {
            continue;
        }
        if let Some(norm) = g.fd_gradient_norm(i) {
            n += 1;
            if (0.9..=1.1).contains(&norm) {
                ok += 1;
            }
        }
    }
    (ok as f64 / n as f64, n)
}

#[test]
fn a01_oracle_field_is_eikonal() {
    let _serial = serial();
    let clock = Instant::now();
    let m = RobotModel::planar_benchmark();
    let g = oracle_self_distance(&m, &GridSpec::over_limits(&m, 201)).unwrap();
    let (share, n) = eikonal_share(&g);
    let secs = clock.elapsed().as_secs_f64();
    report(
        1,
        "oracle eikonal",
        share >= 0.95 && secs < 60.0,
        format!("{:.2}% of {n} cells off the boundary band have |grad| in [0.9, 1.1] ({secs:.1} s)", 100.0 * share),
    );
}

#[test]
fn a02_spatial_hash_equals_brute_force() {
    let _serial = serial();
    let clock = Instant::now();
    let m = RobotModel::planar_benchmark();
    let b = m.workspace_bounds(1.2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (lo, hi) = (m.lower_limits(), m.upper_limits());
    let cs: Vec<Vec<f64>> = (0..100).map(|_| (0..2).map(|j| rng.gen_range(lo[j]..hi[j])).collect()).collect();
    let res = (b.max[0] - b.min[0]).max(b.max[1] - b.min[1]) / 50.0;
    let map = build_voxel_map(&m, cs.clone(), &b, res).unwrap();
    let spheres: Vec<_> = cs.iter().map(|q| m.forward_spheres(q).unwrap()).collect();
    let mut mismatched = 0;
    for flat in 0..map.grid.len() {
        let idx = map.grid.unflat(flat);
        let expect: Vec<u32> = (0..cs.len())
            .filter(|&i| spheres[i].iter().any(|s| map.grid.sphere_touches(s, &idx)))
            .map(|i| i as u32)
            .collect();
        if map.voxel(flat) != &expect[..] {
            mismatched += 1;
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    report(
        2,
        "spatial hash exactness",
        mismatched == 0 && secs < 120.0,
        format!(
            "{mismatched} of {} voxels differ ({:?} grid, {} entries, {secs:.1} s)",
            map.grid.len(),
            map.grid.counts,
            map.entries()
        ),
    );
}

#[test]
fn a03_boundary_mining_concentrates_samples() {
    let _serial = serial();
    let clock = Instant::now();
    let m = RobotModel::planar_benchmark();
    let spec = GridSpec::over_limits(&m, 201);
    let grid = oracle_self_distance(&m, &spec).unwrap();
    let cell = spec.max_cell_size();
    let gen = |variant| {
        generate_self_collision(
            &m,
            &SelfCollisionConfig {
                samples: 10_000,
                variant,
                seed: 0,
                ..Default::default()
            },
        )
        .unwrap()
    };
    let complete = gen(SelfVariant::Complete);
    let uniform = gen(SelfVariant::Uniform);
    let near = complete.mined.iter().filter(|q| grid.interpolate(q).0.abs() <= 2.0 * cell).count();
    let accuracy = near as f64 / complete.mined.len() as f64;
    let mined_bsr = complete.dataset.stats().bsr;
    let uniform_bsr = uniform.dataset.stats().bsr;
    let secs = clock.elapsed().as_secs_f64();
    report(
        3,
        "boundary mining",
        accuracy >= 0.9 && mined_bsr > 10.0 && uniform_bsr < 1.0 && secs < 300.0,
        format!(
            "{:.1}% of {} mined configs within 2 cells; BSR mined {mined_bsr:.2}% (> 10), uniform {uniform_bsr:.2}% (< 1) ({secs:.1} s)",
            100.0 * accuracy,
            complete.mined.len()
        ),
    );
}

fn toy_samples(k: usize, seed: u64) -> Vec<FieldSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| {
            let q: Vec<f64> = vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let r = (q[0] * q[0] + q[1] * q[1]).sqrt();
            let value = r - 1.5;
            FieldSample {
                grad: vec![q[0] / r, q[1] / r],
                label: value < 0.0,
                p: vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                q,
                value,
            }
        })
        .collect()
}

#[test]
fn a04_gradients_match_finite_differences() {
    let _serial = serial();
    let clock = Instant::now();
    // input gradient of the full-size network in eval mode
    let robot = RobotModel::panda_like();
    let model = FieldModel::for_robot(&robot, 1).unwrap();
    let (n, w) = (model.dof(), model.point_dim());
    let (lo, hi) = robot.extended_limits();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // step of 1e-5 in normalized joint units; a 1e-7 raw step is also recorded for reference
    let scale = model.q_scale();
    let mut worst_input = 0.0f64;
    let mut worst_small = 0.0f64;
    for _ in 0..1000 {
        let q: Vec<f64> = (0..n).map(|j| rng.gen_range(lo[j]..hi[j])).collect();
        let p: Vec<f64> = (0..w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, g) = model.predict_with_grad(&q, &p).unwrap();
        let gmax = g.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        for j in 0..n {
            for (h, worst) in [(1e-5 / scale[j], &mut worst_input), (1e-7, &mut worst_small)] {
                let mut qp = q.clone();
                qp[j] += h;
                let mut qm = q.clone();
                qm[j] -= h;
                let fd = (model.predict(&qp, &p).unwrap() - model.predict(&qm, &p).unwrap()) / (2.0 * h);
                *worst = worst.max((fd - g[j]).abs() / gmax.max(1e-12));
            }
        }
    }

    // parameter gradient of the loss (through the input gradient) on a 2x8 network
    let planar = RobotModel::planar_benchmark();
    let mut spec = FieldSpec::for_robot(&planar, 1.5).unwrap().with_hidden(vec![8, 8]);
    spec.dropout = 0.0;
    spec.frequencies = 1;
    let toy = FieldModel::new(spec, 3).unwrap();
    let data = toy_samples(12, 1);
    let weights = LossWeights::default();
    let (_, g) = loss_and_param_grad(&toy, &data, &weights, GradMode::Analytic).unwrap();
    let h = 1e-6;
    let gmax = g.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let mut worst_param = 0.0f64;
    for i in 0..toy.param_count() {
        let mut mp = toy.clone();
        mp.params_mut()[i] += h;
        let mut mm = toy.clone();
        mm.params_mut()[i] -= h;
        let lp = loss_and_param_grad(&mp, &data, &weights, GradMode::Analytic).unwrap().0.total;
        let lm = loss_and_param_grad(&mm, &data, &weights, GradMode::Analytic).unwrap().0.total;
        let fd = (lp - lm) / (2.0 * h);
        worst_param = worst_param.max((fd - g[i]).abs() / g[i].abs().max(1e-3 * gmax));
    }
    let secs = clock.elapsed().as_secs_f64();
    report(
        4,
        "gradient correctness",
        worst_input <= 1e-3 && worst_param <= 1e-4 && secs < 120.0,
        format!(
            "input grad rel err {worst_input:.2e} (<= 1e-3, 1000 inputs; {worst_small:.2e} at raw step 1e-7); parameter grad rel err {worst_param:.2e} (<= 1e-4, {} params) ({secs:.1} s)",
            toy.param_count()
        ),
    );
}

#[test]
fn a05_complete_loss_beats_distance_only() {
    let _serial = serial();
    let clock = Instant::now();
    let robot = RobotModel::planar_benchmark();
    let variants = [
        AblationVariant {
            data: SelfVariant::Complete,
            loss: LossVariant::DistanceOnly,
        },
        AblationVariant {
            data: SelfVariant::Complete,
            loss: LossVariant::Complete,
        },
    ];
    let rows = bench::ablation_run(&robot, &AblationConfig::default(), &variants).unwrap();
    print!("{}", bench::ablation_csv(&rows));
    let r = |i: usize| rows[i].report.unwrap_or_else(|| panic!("{} failed: {:?}", rows[i].variant.name(), rows[i].error));
    let (d, c) = (r(0), r(1));
    let fpr = |x: &bench::EvalReport| x.fpr.percent.unwrap_or(f64::NAN);
    let secs = clock.elapsed().as_secs_f64();
    let pass = c.mae <= 0.8 * d.mae
        && c.grad_similarity > d.grad_similarity
        && fpr(&c) < fpr(&d)
        && c.mae <= 0.12
        && secs < 1800.0;
    report(
        5,
        "ablation orderings",
        pass,
        format!(
            "MAE {:.4} vs {:.4} (ratio {:.2} <= 0.8, abs <= 0.12); GradSim {:.4} vs {:.4}; FPR {:.2}% vs {:.2}% ({secs:.0} s)",
            c.mae,
            d.mae,
            c.mae / d.mae,
            c.grad_similarity,
            d.grad_similarity,
            fpr(&c),
            fpr(&d)
        ),
    );
}

#[test]
fn a06_safe_optimization_is_collision_free_and_shorter() {
    let _serial = serial();
    let clock = Instant::now();
    let robot = RobotModel::planar_benchmark();
    let cfg = PlanningBenchConfig::default();
    let table = bench::planning_benchmark(&robot, &cfg).unwrap();
    print!("{}", table.csv());
    let safe_cr_max = table.rows.iter().map(|r| r.safe.collision_rate).fold(0.0, f64::max);
    let unsafe_hits = table.rows.iter().filter(|r| r.unsafe_.collision_rate > 0.0).count();
    let secs = clock.elapsed().as_secs_f64();
    report(
        6,
        "planning safety and length",
        safe_cr_max == 0.0 && table.safe.length < table.rrt.length && unsafe_hits > 0 && secs < 600.0,
        format!(
            "safe CR max {safe_cr_max:.2}% over {} scenes; TL safe {:.3} < initializer {:.3}; unsafe CR > 0 on {unsafe_hits} scenes (mean {:.2}%) ({secs:.0} s)",
            table.rows.len(),
            table.safe.length,
            table.rrt.length,
            table.unsafe_.collision_rate
        ),
    );
}

#[test]
fn a07_mpc_is_safe_and_slower_with_longer_horizons() {
    let _serial = serial();
    let clock = Instant::now();
    let robot = RobotModel::planar_benchmark();
    let params = MpcParams::default();
    let seeds: Vec<u64> = (0..20).collect();
    let runs = bench::mpc_episodes(&robot, &seeds, &params, 101, 12.0).unwrap();
    let unsafe_runs: Vec<u64> = runs.iter().filter(|(_, m)| m.collision_rate > 0.0).map(|(s, _)| *s).collect();
    let missed: Vec<u64> = runs.iter().filter(|(_, m)| !m.reached).map(|(s, _)| *s).collect();
    let kkt = runs.iter().map(|(_, m)| m.max_kkt).fold(0.0, f64::max);
    let (scene, episode) = moving_obstacle_episode(&robot, 0, 12.0).unwrap();
    let sweep = bench::horizon_sweep(&robot, &scene, &episode, 101, &params, &[1, 10, 50]).unwrap();
    print!("{}", bench::mpc_table(&sweep));
    let cf: Vec<f64> = sweep.iter().map(|(_, m)| m.control_frequency).collect();
    let secs = clock.elapsed().as_secs_f64();
    report(
        7,
        "MPC safety and horizon",
        unsafe_runs.is_empty() && missed.is_empty() && kkt <= 1e-6 && cf[0] > cf[1] && cf[1] > cf[2] && secs < 600.0,
        format!(
            "20 episodes: colliding {unsafe_runs:?}, goal missed {missed:?}, max KKT {kkt:.1e}; CF H=1/10/50: {:.0} > {:.0} > {:.0} Hz ({secs:.0} s)",
            cf[0], cf[1], cf[2]
        ),
    );
}

fn random_qp(rng: &mut ChaCha8Rng) -> QpInstance {
    let n = rng.gen_range(1..=6);
    let m = rng.gen_range(1..=6);
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let p = &a * a.transpose() + DMatrix::identity(n, n) * 0.1;
    let q = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
    let c = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
    let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let cx = &c * &x0;
    let (mut l, mut u) = (DVector::zeros(m), DVector::zeros(m));
    for i in 0..m {
        let (a, b) = (rng.gen_range(0.0..0.5), rng.gen_range(0.0..0.5));
        (l[i], u[i]) = match rng.gen_range(0..5) {
            0 => (cx[i], cx[i]),
            1 => (f64::NEG_INFINITY, cx[i] + b),
            2 => (cx[i] - a, f64::INFINITY),
            _ => (cx[i] - a, cx[i] + b),
        };
    }
    QpInstance::new(p, q, c, l, u).unwrap()
}

#[test]
fn a08_qp_solver_matches_active_set_oracle() {
    let _serial = serial();
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut worst, mut unsolved) = (0.0f64, 0);
    for _ in 0..200 {
        let inst = random_qp(&mut rng);
        let s = solve(&inst, &QpSettings::default(), None).unwrap();
        let (xo, _) = solve_active_set(&inst).unwrap().expect("feasible by construction");
        if s.status != QpStatus::Solved {
            unsolved += 1;
        }
        worst = worst.max((&s.x - &xo).amax());
    }
    let secs = clock.elapsed().as_secs_f64();
    report(
        8,
        "QP oracle equivalence",
        unsolved == 0 && worst <= 1e-6 && secs < 60.0,
        format!("200 instances, {unsolved} unsolved, max |x - x*| {worst:.1e} ({secs:.2} s)"),
    );
}

#[test]
fn a09_latency_scales_linearly() {
    let _serial = serial();
    let clock = Instant::now();
    let robot = RobotModel::panda_like();
    let model = FieldModel::for_robot(&robot, 0).unwrap();
    let scales: Vec<usize> = (0..=5).map(|e| 10usize.pow(e)).collect();
    // median of 5 on a possibly shared core
    let rows = bench::latency_bench(&model, &scales, 5, 1, 0).unwrap();
    let csv = bench::latency_csv(&rows);
    print!("{csv}");
    let ordered = rows.iter().all(|r| r.dist_grad_ms >= r.dist_ms);
    let at = |s: usize| rows.iter().find(|r| r.scale == s).unwrap();
    let growth = at(100_000).dist_ms / at(1000).dist_ms / 100.0;
    let growth_grad = at(100_000).dist_grad_ms / at(1000).dist_grad_ms / 100.0;
    let within = |g: f64| (1.0 / 3.0..=3.0).contains(&g);
    let secs = clock.elapsed().as_secs_f64();
    report(
        9,
        "latency harness",
        csv.starts_with("scale,") && rows.len() == 6 && ordered && within(growth) && within(growth_grad) && secs < 300.0,
        format!("dist+grad >= dist at all scales: {ordered}; 1e3 -> 1e5 time over linear: {growth:.2}x dist, {growth_grad:.2}x dist+grad ({secs:.0} s)"),
    );
}

#[test]
fn a10_safety_penalty_is_continuous() {
    let _serial = serial();
    let clock = Instant::now();
    let mut jump = 0.0f64;
    let mut worst = 0.0f64;
    for (d0, alpha) in [(0.1, 5.0), (0.1, 20.0), (0.05, 10.0), (0.3, 2.0)] {
        let p = PenaltyParams {
            d0,
            alpha,
            continuity_shim: true,
        };
        jump = jump.max((p.eval(-f64::MIN_POSITIVE).0 - p.eval(0.0).0).abs());
        for phi in [-0.5f64, -0.2, -0.05, -1e-3, 1e-3, 0.05, 0.2, 0.5] {
            let h = 1e-6 * (1.0 + phi.abs());
            let fd = (p.eval(phi + h).0 - p.eval(phi - h).0) / (2.0 * h);
            let an = p.eval(phi).1;
            worst = worst.max((fd - an).abs() / an.abs());
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    report(
        10,
        "penalty continuity",
        jump <= 1e-12 && worst <= 1e-6 && secs < 1.0,
        format!("jump at 0: {jump:.1e}; branch derivative rel err {worst:.1e}"),
    );
}
