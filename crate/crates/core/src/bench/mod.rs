//! Evaluation metrics and benchmark harnesses: field accuracy, loss and data
//! ablations, inference latency, planning comparison and MPC horizon sweeps.

pub mod plot;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_self_collision, DatasetStats, FieldSample, SelfCollisionConfig, SelfVariant, BOUNDARY_BAND};
use crate::error::{Error, Result};
use crate::field::train::split_indices;
use crate::field::{train, FieldModel, FieldSpec, LossWeights, TrainConfig, DEFAULT_HIDDEN};
use crate::fields::OracleField;
use crate::geometry::grid::{oracle_self_distance, CSpaceGrid, GridSpec};
use crate::geometry::scene::{in_collision, Primitive, Scene};
use crate::mpc::{self, EpisodeConfig, MpcMetrics, MpcParams};
use crate::robot::RobotModel;
use crate::traj::metrics::{polyline_metrics, trajectory_metrics};
use crate::traj::{optimize, rrt_connect, spline_from_path, PlanMetrics, PlanParams, TrajParams};

/// Boundary false-positive rate and the size of the band set it was taken over.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Fpr {
    /// Percent; `None` when no sample lies in the band.
    pub percent: Option<f64>,
    pub denominator: usize,
}

impl std::fmt::Display for Fpr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.percent {
            Some(p) => write!(f, "{p:.2}% (of {})", self.denominator),
            None => write!(f, "N/A (empty band)"),
        }
    }
}

/// Among samples with `|truth| <= band`, the share predicted colliding while
/// truly safe.
pub fn fpr(pred: &[f64], truth: &[f64], band: f64) -> Result<Fpr> {
    Error::check_dim(truth.len(), pred.len())?;
    let mut den = 0;
    let mut hits = 0;
    for (p, t) in pred.iter().zip(truth) {
        if t.abs() <= band {
            den += 1;
            if *p < 0.0 && *t > 0.0 {
                hits += 1;
            }
        }
    }
    Ok(Fpr {
        percent: (den > 0).then(|| 100.0 * hits as f64 / den as f64),
        denominator: den,
    })
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    Error::check_dim(truth.len(), pred.len())?;
    if truth.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / truth.len() as f64)
}

/// Mean cosine similarity between row-major gradient blocks of width `dof`.
/// Zero predicted gradients count as 0.
pub fn grad_similarity(pred: &[f64], truth: &[f64], dof: usize) -> Result<f64> {
    Error::check_dim(truth.len(), pred.len())?;
    if dof == 0 || truth.is_empty() || truth.len() % dof != 0 {
        return Err(Error::invalid("gradient blocks must be non-empty multiples of dof"));
    }
    let mut sum = 0.0;
    for (p, t) in pred.chunks(dof).zip(truth.chunks(dof)) {
        let nt = t.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nt == 0.0 {
            return Err(Error::DegenerateGradient);
        }
        let np = p.iter().map(|x| x * x).sum::<f64>().sqrt();
        if np > 0.0 {
            sum += p.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / (np * nt);
        }
    }
    Ok(sum / (truth.len() / dof) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub mae: f64,
    pub grad_similarity: f64,
    pub fpr: Fpr,
    /// Training-data figures (%).
    pub bsr: f64,
    pub class_ratio: f64,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub band: f64,
}

/// Metrics of a prediction against truth values and gradients.
pub fn evaluate(
    pred_values: &[f64],
    pred_grads: &[f64],
    truth_values: &[f64],
    truth_grads: &[f64],
    dof: usize,
    data: &DatasetStats,
) -> Result<EvalReport> {
    Ok(EvalReport {
        mae: mae(pred_values, truth_values)?,
        grad_similarity: grad_similarity(pred_grads, truth_grads, dof)?,
        fpr: fpr(pred_values, truth_values, BOUNDARY_BAND)?,
        bsr: data.bsr,
        class_ratio: data.class_ratio,
        train_samples: data.count,
        eval_samples: truth_values.len(),
        band: BOUNDARY_BAND,
    })
}

/// Oracle truth at the samples' configurations: interpolated grid values and
/// gradients. Samples whose grid gradient vanishes are skipped.
pub fn grid_truth(grid: &CSpaceGrid, samples: &[FieldSample]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let mut keep = Vec::new();
    let mut vals = Vec::new();
    let mut grads = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let (v, g) = grid.interpolate(&s.q);
        if g.iter().any(|x| *x != 0.0) {
            keep.push(i);
            vals.push(v);
            grads.extend(g);
        }
    }
    (keep, vals, grads)
}

/// A self-collision field model evaluated against the grid oracle on `samples`.
pub fn evaluate_self_field(model: &FieldModel, grid: &CSpaceGrid, samples: &[FieldSample], data: &DatasetStats) -> Result<EvalReport> {
    let (keep, tv, tg) = grid_truth(grid, samples);
    let n = model.dof();
    let w = model.point_dim();
    let mut qs = Vec::with_capacity(keep.len() * n);
    let mut ps = Vec::with_capacity(keep.len() * w);
    for &i in &keep {
        qs.extend_from_slice(&samples[i].q);
        ps.extend_from_slice(&samples[i].p);
    }
    let (pv, pg) = model.predict_with_grad_batch(&qs, &ps)?;
    evaluate(&pv, &pg, &tv, &tg, n, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    DistanceOnly,
    Magnitude,
    Direction,
    Complete,
}

impl LossVariant {
    pub fn weights(self) -> LossWeights {
        match self {
            LossVariant::DistanceOnly => LossWeights::distance_only(),
            LossVariant::Magnitude => LossWeights::with_magnitude(),
            LossVariant::Direction => LossWeights::with_direction(),
            LossVariant::Complete => LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub data: SelfVariant,
    pub loss: LossVariant,
}

impl AblationVariant {
    pub fn name(&self) -> String {
        let d = match self.data {
            SelfVariant::Uniform => "uniform",
            SelfVariant::Balanced => "balanced",
            SelfVariant::Complete => "complete",
        };
        let l = match self.loss {
            LossVariant::DistanceOnly => "distance_only",
            LossVariant::Magnitude => "magnitude",
            LossVariant::Direction => "direction",
            LossVariant::Complete => "complete",
        };
        format!("{d}/{l}")
    }
}

/// Data-strategy rows (complete loss) followed by loss rows (complete data).
pub fn default_variants() -> Vec<AblationVariant> {
    let mut v: Vec<AblationVariant> = [SelfVariant::Uniform, SelfVariant::Balanced, SelfVariant::Complete]
        .into_iter()
        .map(|data| AblationVariant {
            data,
            loss: LossVariant::Complete,
        })
        .collect();
    v.extend([LossVariant::DistanceOnly, LossVariant::Magnitude, LossVariant::Direction].map(|loss| AblationVariant {
        data: SelfVariant::Complete,
        loss,
    }));
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub samples: usize,
    pub epochs: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// Oracle grid cells per joint for the truth values.
    pub grid_cells: usize,
    pub val_fraction: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            samples: 10_000,
            epochs: 100,
            seed: 0,
            hidden: DEFAULT_HIDDEN.to_vec(),
            grid_cells: 201,
            val_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub data: DatasetStats,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

/// Trains every variant with the same budget and seed and evaluates each on
/// the held-out split of the complete-strategy dataset against the grid
/// oracle. A diverging variant is reported with its error.
pub fn ablation_run(robot: &RobotModel, cfg: &AblationConfig, variants: &[AblationVariant]) -> Result<Vec<AblationRow>> {
    let mut kinds: Vec<SelfVariant> = variants.iter().map(|v| v.data).collect();
    kinds.push(SelfVariant::Complete);
    kinds.dedup();
    let mut datasets = Vec::new();
    for kind in [SelfVariant::Uniform, SelfVariant::Balanced, SelfVariant::Complete] {
        if kinds.contains(&kind) {
            let gen = SelfCollisionConfig {
                samples: cfg.samples,
                variant: kind,
                seed: cfg.seed,
                ..Default::default()
            };
            datasets.push((kind, generate_self_collision(robot, &gen)?.dataset));
        }
    }
    let complete = &datasets.iter().find(|(k, _)| *k == SelfVariant::Complete).expect("generated").1;
    let (_, val_idx) = split_indices(complete.len(), cfg.val_fraction, cfg.seed);
    let eval_set: Vec<FieldSample> = val_idx.iter().map(|&i| complete.samples[i].clone()).collect();
    let grid = oracle_self_distance(robot, &GridSpec::over_limits(robot, cfg.grid_cells))?;
    let spec = FieldSpec::for_robot(robot, crate::robot::DEFAULT_WORKSPACE_EXTENSION)?.with_hidden(cfg.hidden.clone());
    variants
        .par_iter()
        .map(|v| {
            let data = &datasets.iter().find(|(k, _)| *k == v.data).expect("generated").1;
            let stats = data.stats();
            let tc = TrainConfig {
                epochs: cfg.epochs,
                seed: cfg.seed,
                val_fraction: cfg.val_fraction,
                weights: v.loss.weights(),
                ..Default::default()
            };
            let outcome = FieldModel::new(spec.clone(), cfg.seed).and_then(|m| train(m, &data.samples, &tc));
            Ok(match outcome {
                Ok(out) => AblationRow {
                    variant: *v,
                    data: stats,
                    report: Some(evaluate_self_field(&out.model, &grid, &eval_set, &stats)?),
                    error: None,
                },
                Err(e) => AblationRow {
                    variant: *v,
                    data: stats,
                    report: None,
                    error: Some(e.to_string()),
                },
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,samples,class_ratio,bsr,mae,grad_sim,fpr,fpr_denominator,status\n");
    for r in rows {
        let (mae, gs, fpr, den) = match &r.report {
            Some(e) => (
                e.mae.to_string(),
                e.grad_similarity.to_string(),
                e.fpr.percent.map_or("NA".into(), |p| p.to_string()),
                e.fpr.denominator.to_string(),
            ),
            None => Default::default(),
        };
        let status = r.error.as_deref().map_or("ok".to_string(), |e| format!("failed: {}", e.replace(',', ";")));
        s.push_str(&format!(
            "{},{},{},{},{mae},{gs},{fpr},{den},{status}\n",
            r.variant.name(),
            r.data.count,
            r.data.class_ratio,
            r.data.bsr
        ));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyRow {
    pub scale: usize,
    /// Median batch time (ms).
    pub dist_ms: f64,
    pub dist_grad_ms: f64,
}

/// Median batched query time for distance only and distance plus gradient at
/// each batch size, on a pool of `threads` workers. Inputs are uniform in the
/// model's normalization box.
pub fn latency_bench(model: &FieldModel, scales: &[usize], repeats: usize, threads: usize, seed: u64) -> Result<Vec<LatencyRow>> {
    if repeats == 0 || threads == 0 {
        return Err(Error::invalid("repeats and threads must be positive"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let spec = model.spec().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &k in scales {
        if k == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let mut qs = Vec::with_capacity(k * spec.dof);
        let mut ps = Vec::with_capacity(k * spec.point_dim);
        for _ in 0..k {
            qs.extend((0..spec.dof).map(|j| rng.gen_range(spec.q_lower[j]..spec.q_upper[j])));
            ps.extend((0..spec.point_dim).map(|j| rng.gen_range(spec.p_lower[j]..spec.p_upper[j])));
        }
        let mut d = Vec::with_capacity(repeats);
        let mut g = Vec::with_capacity(repeats);
        pool.install(|| -> Result<()> {
            // untimed warm-up: first calls pay for allocation and cold caches
            std::hint::black_box(model.predict_batch(&qs, &ps)?);
            std::hint::black_box(model.predict_with_grad_batch(&qs, &ps)?);
            for _ in 0..repeats {
                let t = Instant::now();
                std::hint::black_box(model.predict_batch(&qs, &ps)?);
                d.push(t.elapsed().as_secs_f64() * 1e3);
                let t = Instant::now();
                std::hint::black_box(model.predict_with_grad_batch(&qs, &ps)?);
                g.push(t.elapsed().as_secs_f64() * 1e3);
            }
            Ok(())
        })?;
        rows.push(LatencyRow {
            scale: k,
            dist_ms: median(&mut d),
            dist_grad_ms: median(&mut g),
        });
    }
    Ok(rows)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn latency_csv(rows: &[LatencyRow]) -> String {
    let mut s = String::from("scale,dist_ms,dist_grad_ms\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6}\n", r.scale, r.dist_ms, r.dist_grad_ms));
    }
    s
}

/// A planar planning query whose straight start-goal segment is blocked.
#[derive(Debug, Clone)]
pub struct PlanningCase {
    pub seed: u64,
    pub scene: Scene,
    pub start: Vec<f64>,
    pub goal: Vec<f64>,
}

/// 2 to 4 discs (radius 0.3-0.6) centred 1.5-3.8 from the base, with a
/// collision-free start and goal whose straight segment collides and which
/// the sampling planner connects.
pub fn planning_case(model: &RobotModel, seed: u64, rrt: &crate::traj::RrtParams) -> Result<PlanningCase> {
    if model.dof() != 2 || model.point_dim() != 2 {
        return Err(Error::invalid("planning cases are defined for the planar two-link arm"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (model.lower_limits(), model.upper_limits());
    for _ in 0..1000 {
        let count = rng.gen_range(2..=4);
        let obstacles: Vec<Primitive> = (0..count)
            .map(|_| {
                let a = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                let r = rng.gen_range(1.5..3.8);
                Primitive::circle([r * a.cos(), r * a.sin()], rng.gen_range(0.3..0.6))
            })
            .collect();
        let scene = Scene::new(obstacles);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..2).map(|j| rng.gen_range(0.9 * lo[j]..0.9 * hi[j])).collect() };
        let start = draw(&mut rng);
        let goal = draw(&mut rng);
        let colliding = |q: &[f64]| in_collision(model, &scene, q, 0.0).unwrap_or(true);
        if colliding(&start) || colliding(&goal) {
            continue;
        }
        let blocked = (0..=100).any(|i| {
            let s = i as f64 / 100.0;
            let q: Vec<f64> = start.iter().zip(&goal).map(|(a, b)| a + s * (b - a)).collect();
            colliding(&q)
        });
        if !blocked {
            continue;
        }
        let mut p = *rrt;
        p.seed = seed;
        if rrt_connect(&lo, &hi, &start, &goal, &colliding, &p).is_ok() {
            return Ok(PlanningCase { seed, scene, start, goal });
        }
    }
    Err(Error::invalid(format!("no planning case for seed {seed}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanningBenchConfig {
    pub scenes: usize,
    pub seed: u64,
    /// Oracle grid cells per joint for the distance field.
    pub cells: usize,
    pub plan: PlanParams,
    pub traj: TrajParams,
}

impl Default for PlanningBenchConfig {
    fn default() -> Self {
        let mut traj = TrajParams::default();
        traj.penalty.alpha = 20.0;
        PlanningBenchConfig {
            scenes: 20,
            seed: 0,
            cells: 101,
            plan: PlanParams::default(),
            traj,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PlanningRow {
    pub seed: u64,
    pub rrt: PlanMetrics,
    pub safe: PlanMetrics,
    pub unsafe_: PlanMetrics,
    pub safe_feasible: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PlanningTable {
    pub rows: Vec<PlanningRow>,
    pub rrt: PlanMetrics,
    pub safe: PlanMetrics,
    pub unsafe_: PlanMetrics,
}

/// Sampling initializer vs optimization with and without the safety term on
/// seeded blocking scenes. Times include the initializer. Collision rates are
/// judged by the exact oracle.
pub fn planning_benchmark(model: &RobotModel, cfg: &PlanningBenchConfig) -> Result<PlanningTable> {
    let (lo, hi) = (model.lower_limits(), model.upper_limits());
    let mut rows = Vec::with_capacity(cfg.scenes);
    for i in 0..cfg.scenes as u64 {
        let case = planning_case(model, cfg.seed.wrapping_add(i), &cfg.plan.rrt)?;
        let scene = &case.scene;
        let colliding = |q: &[f64]| in_collision(model, scene, q, 0.0).unwrap_or(true);
        let oracle = |q: &[f64]| in_collision(model, scene, q, 0.0);
        let field = OracleField::new(model.clone(), scene.clone(), cfg.cells)?;
        field.grid(0.0)?;
        let mut rp = cfg.plan.rrt;
        rp.seed = case.seed;
        let clock = Instant::now();
        let path = rrt_connect(&lo, &hi, &case.start, &case.goal, &colliding, &rp)?;
        let rrt_ms = clock.elapsed().as_secs_f64() * 1e3;
        let init = spline_from_path(&path, cfg.plan.segment_length, cfg.plan.speed)?;
        let clock = Instant::now();
        let (safe, report) = optimize(&init, &field, &cfg.traj, &lo, &hi)?;
        let safe_ms = clock.elapsed().as_secs_f64() * 1e3;
        let mut bare_params = cfg.traj.clone();
        bare_params.weights.safety = 0.0;
        let clock = Instant::now();
        let (bare, _) = optimize(&init, &field, &bare_params, &lo, &hi)?;
        let bare_ms = clock.elapsed().as_secs_f64() * 1e3;
        rows.push(PlanningRow {
            seed: case.seed,
            rrt: polyline_metrics(&path, oracle, rrt_ms)?,
            safe: trajectory_metrics(&safe, oracle, rrt_ms + safe_ms)?,
            unsafe_: trajectory_metrics(&bare, oracle, rrt_ms + bare_ms)?,
            safe_feasible: report.feasible,
        });
    }
    let avg = |f: fn(&PlanningRow) -> PlanMetrics| crate::traj::metrics::average(&rows.iter().map(f).collect::<Vec<_>>());
    Ok(PlanningTable {
        rrt: avg(|r| r.rrt),
        safe: avg(|r| r.safe),
        unsafe_: avg(|r| r.unsafe_),
        rows,
    })
}

impl PlanningTable {
    pub fn csv(&self) -> String {
        let mut s = String::from("seed,method,cr,tl,at_ms\n");
        let mut line = |seed: String, name: &str, m: &PlanMetrics| {
            s.push_str(&format!("{seed},{name},{},{},{}\n", m.collision_rate, m.length, m.time_ms));
        };
        for r in &self.rows {
            line(r.seed.to_string(), "rrt_connect", &r.rrt);
            line(r.seed.to_string(), "safe_opt", &r.safe);
            line(r.seed.to_string(), "unsafe_opt", &r.unsafe_);
        }
        line("mean".into(), "rrt_connect", &self.rrt);
        line("mean".into(), "safe_opt", &self.safe);
        line("mean".into(), "unsafe_opt", &self.unsafe_);
        s
    }
}

/// MPC episode metrics per seed on generated moving-obstacle episodes,
/// parallel over seeds.
pub fn mpc_episodes(model: &RobotModel, seeds: &[u64], params: &MpcParams, cells: usize, duration: f64) -> Result<Vec<(u64, MpcMetrics)>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let (scene, cfg) = mpc::moving_obstacle_episode(model, seed, duration)?;
            let field = OracleField::new(model.clone(), scene.clone(), cells)?;
            Ok((seed, mpc::simulate(model, &scene, &field, params, &cfg)?.metrics))
        })
        .collect()
}

/// Same episode at several horizons.
pub fn horizon_sweep(
    model: &RobotModel,
    scene: &Scene,
    cfg: &EpisodeConfig,
    cells: usize,
    params: &MpcParams,
    horizons: &[usize],
) -> Result<Vec<(usize, MpcMetrics)>> {
    let field = OracleField::new(model.clone(), scene.clone(), cells)?;
    horizons
        .iter()
        .map(|&h| {
            let p = MpcParams {
                horizon: h,
                ..params.clone()
            };
            Ok((h, mpc::simulate(model, scene, &field, &p, cfg)?.metrics))
        })
        .collect()
}

pub fn mpc_table(rows: &[(usize, MpcMetrics)]) -> String {
    let mut s = String::from("horizon,cr,mci,cf_hz,reached,final_error,max_kkt,fallbacks,emergency_stops\n");
    for (h, m) in rows {
        s.push_str(&format!(
            "{h},{},{},{:.1},{},{},{:e},{},{}\n",
            m.collision_rate, m.max_input, m.control_frequency, m.reached, m.final_error, m.max_kkt, m.fallbacks, m.emergency_stops
        ));
    }
    s
}
