use std::path::Path;

use log::info;
use serde::Serialize;
use serde_json::json;

use cssdf::bench::{self, plot};
use cssdf::dataset::{generate_external, generate_self_collision, Dataset};
use cssdf::field::{train, FieldModel, FieldSpec};
use cssdf::fields::{DistanceField, LearnedField, OracleField};
use cssdf::geometry::grid::{oracle_self_distance, GridSpec};
use cssdf::geometry::scene::{in_collision, Scene};
use cssdf::mpc::{self, EpisodeConfig};
use cssdf::robot::RobotModel;
use cssdf::traj::metrics::{polyline_metrics, trajectory_metrics};
use cssdf::{Error, Result};

use crate::config::RunConfig;
use crate::{io_at, Command};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Truth {
    /// Values and gradients stored in the dataset.
    Dataset,
    /// Interpolated self-collision grid oracle (self-collision data only).
    Grid,
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| io_at(path, e))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("summary serializes");
    write(path, (text + "\n").as_bytes())
}

fn need<'a, T>(v: &'a Option<T>, flag: &str, cmd: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::InvalidInput(format!("{cmd} needs {flag}")))
}

fn same_dof(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

fn load_model(path: &Path) -> Result<FieldModel> {
    FieldModel::load(path).map_err(|e| match e {
        Error::Io(io) => io_at(path, io),
        other => other,
    })
}

fn load_scene(cfg: &RunConfig, robot: &RobotModel) -> Result<Scene> {
    match &cfg.inputs.scene {
        Some(p) => Scene::load(p, robot.point_dim()),
        None => Ok(Scene::default()),
    }
}

fn field_for(cfg: &RunConfig, robot: &RobotModel, scene: &Scene, cells: usize, spacing: f64) -> Result<Box<dyn DistanceField>> {
    Ok(match &cfg.inputs.model {
        Some(p) => {
            let m = load_model(p)?;
            same_dof(robot.dof(), m.dof())?;
            Box::new(LearnedField::new(m, scene.clone(), spacing)?)
        }
        None => Box::new(OracleField::new(robot.clone(), scene.clone(), cells)?),
    })
}

pub fn dispatch(cmd: &Command, cfg: &RunConfig, out: &Path) -> Result<()> {
    let robot = cfg.robot()?;
    match cmd {
        Command::GenSelf { csv } => {
            let data = generate_self_collision(&robot, &cfg.gen_self)?;
            save_dataset(&data.dataset, out, *csv, cfg.gen_self.balance.tau, json!({ "mined": data.mined.len() }))
        }
        Command::GenExternal { csv } => {
            let data = generate_external(&robot, &cfg.gen_external)?;
            save_dataset(&data, out, *csv, cfg.gen_external.self_collision.balance.tau, json!({}))
        }
        Command::Train { init } => cmd_train(cfg, &robot, init.as_deref(), out),
        Command::Eval { truth, oracle, cells } => cmd_eval(cfg, &robot, *truth, *oracle, *cells, out),
        Command::Plan { start, goal, table } => {
            if *table {
                cmd_plan_table(cfg, &robot, out)
            } else {
                let start = start.clone().unwrap_or_else(|| cfg.plan.start.clone());
                let goal = goal.clone().unwrap_or_else(|| cfg.plan.goal.clone());
                cmd_plan(cfg, &robot, &start, &goal, out)
            }
        }
        Command::Mpc {
            start,
            goal,
            episode_seed,
            horizons,
        } => cmd_mpc(cfg, &robot, start, goal, *episode_seed, horizons.as_deref(), out),
        Command::BenchLatency => cmd_latency(cfg, &robot, out),
        Command::Ablate => {
            let rows = bench::ablation_run(&robot, &cfg.ablate, &bench::default_variants())?;
            write(&out.join("ablation.csv"), bench::ablation_csv(&rows).as_bytes())?;
            write_json(&out.join("ablation.json"), &rows)
        }
        Command::Plot {
            input,
            output,
            title,
            log_x,
            log_y,
        } => cmd_plot(input, &out.join(output), title, *log_x, *log_y),
    }
}

fn save_dataset(data: &Dataset, out: &Path, csv: bool, tau: f64, extra: serde_json::Value) -> Result<()> {
    let path = out.join("dataset.csd");
    data.save(&path).map_err(|e| match e {
        Error::Io(io) => io_at(&path, io),
        other => other,
    })?;
    if csv {
        write(&out.join("dataset.csv"), data.to_csv().as_bytes())?;
    }
    let stats = data.stats();
    info!("{} samples, {} colliding, BSR {:.2}%", stats.count, stats.colliding, stats.bsr);
    let mut report = json!({ "stats": stats, "tau": tau, "dof": data.dof, "point_dim": data.point_dim });
    if let (Some(r), Some(e)) = (report.as_object_mut(), extra.as_object()) {
        r.extend(e.clone());
    }
    write_json(&out.join("report.json"), &report)
}

fn cmd_train(cfg: &RunConfig, robot: &RobotModel, init: Option<&Path>, out: &Path) -> Result<()> {
    let data = Dataset::load(need(&cfg.inputs.data, "--data", "train")?)?;
    same_dof(robot.dof(), data.dof)?;
    let model = match init {
        Some(p) => load_model(p)?,
        None => {
            let spec = FieldSpec::for_robot(robot, cfg.train.workspace_extension)?.with_hidden(cfg.train.hidden.clone());
            FieldModel::new(spec, cfg.seed)?
        }
    };
    let (outcome, failure) = match train(model, &data.samples, &cfg.train.optimizer) {
        Ok(o) => (o, None),
        Err(Error::Diverged { epoch, last_good }) => (
            (*last_good).clone(),
            Some(Error::Diverged {
                epoch,
                last_good,
            }),
        ),
        Err(e) => return Err(e),
    };
    outcome.model.save(&out.join("model.ckpt"))?;
    write(&out.join("history.csv"), outcome.history_csv().as_bytes())?;
    if !outcome.history.is_empty() {
        write(&out.join("loss.svg"), plot::loss_curves(&outcome.history)?.as_bytes())?;
    }
    let last = outcome.history.last();
    write_json(
        &out.join("summary.json"),
        &json!({
            "epochs": outcome.history.len(),
            "final": last,
            "diverged": failure.is_some(),
            "parameters": outcome.model.param_count(),
        }),
    )?;
    failure.map_or(Ok(()), Err)
}

fn cmd_eval(cfg: &RunConfig, robot: &RobotModel, truth: Truth, oracle: bool, cells: usize, out: &Path) -> Result<()> {
    let data = Dataset::load(need(&cfg.inputs.data, "--data", "eval")?)?;
    same_dof(robot.dof(), data.dof)?;
    let n = data.dof;
    let needs_grid = oracle || truth == Truth::Grid;
    let grid = if needs_grid {
        Some(oracle_self_distance(robot, &GridSpec::over_limits(robot, cells))?)
    } else {
        None
    };
    let (keep, tv, tg) = match (truth, &grid) {
        (Truth::Grid, Some(g)) => bench::grid_truth(g, &data.samples),
        _ => {
            let keep: Vec<usize> = (0..data.len()).collect();
            let tv = data.samples.iter().map(|s| s.value).collect();
            let tg = data.samples.iter().flat_map(|s| s.grad.iter().copied()).collect();
            (keep, tv, tg)
        }
    };
    let (pv, pg) = if oracle {
        let g = grid.as_ref().expect("grid built for the oracle predictor");
        let mut pv = Vec::with_capacity(keep.len());
        let mut pg = Vec::with_capacity(keep.len() * n);
        for &i in &keep {
            let (v, d) = g.interpolate(&data.samples[i].q);
            pv.push(v);
            pg.extend(d);
        }
        (pv, pg)
    } else {
        let m = load_model(need(&cfg.inputs.model, "--model (or --oracle)", "eval")?)?;
        same_dof(n, m.dof())?;
        let mut qs = Vec::with_capacity(keep.len() * n);
        let mut ps = Vec::with_capacity(keep.len() * data.point_dim);
        for &i in &keep {
            qs.extend_from_slice(&data.samples[i].q);
            ps.extend_from_slice(&data.samples[i].p);
        }
        m.predict_with_grad_batch(&qs, &ps)?
    };
    let report = bench::evaluate(&pv, &pg, &tv, &tg, n, &data.stats())?;
    info!("MAE {:.4} rad, GradSim {:.4}, FPR {}", report.mae, report.grad_similarity, report.fpr);
    write_json(&out.join("eval.json"), &report)
}

fn cmd_plan(cfg: &RunConfig, robot: &RobotModel, start: &[f64], goal: &[f64], out: &Path) -> Result<()> {
    if start.is_empty() || goal.is_empty() {
        return Err(Error::InvalidInput("plan needs --start and --goal (or [plan] start/goal)".into()));
    }
    let scene = load_scene(cfg, robot)?;
    let field = field_for(cfg, robot, &scene, cfg.plan.cells, cfg.plan.spacing)?;
    let colliding = |q: &[f64]| in_collision(robot, &scene, q, 0.0).unwrap_or(true);
    let oracle = |q: &[f64]| in_collision(robot, &scene, q, 0.0);
    let (lo, hi) = (robot.lower_limits(), robot.upper_limits());
    let outcome = cssdf::traj::plan(start, goal, &lo, &hi, &colliding, field.as_ref(), &cfg.plan.sampler, &cfg.plan.optimizer)?;
    let metrics = trajectory_metrics(&outcome.trajectory, oracle, outcome.total_ms)?;
    let initial = polyline_metrics(&outcome.path, oracle, outcome.init_ms)?;
    let mut buf = Vec::new();
    outcome.trajectory.write_csv(&mut buf, 0.01)?;
    write(&out.join("trajectory.csv"), &buf)?;
    let mut init_csv = (1..=robot.dof()).map(|j| format!("q_{j}")).collect::<Vec<_>>().join(",") + "\n";
    for q in &outcome.path {
        init_csv += &(q.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",") + "\n");
    }
    write(&out.join("initial_path.csv"), init_csv.as_bytes())?;
    info!("CR {:.2}%, TL {:.3} rad, {:.1} ms", metrics.collision_rate, metrics.length, metrics.time_ms);
    write_json(
        &out.join("summary.json"),
        &json!({
            "trajectory": metrics,
            "initial_path": initial,
            "report": outcome.report,
            "duration": outcome.trajectory.duration(),
        }),
    )
}

fn cmd_plan_table(cfg: &RunConfig, robot: &RobotModel, out: &Path) -> Result<()> {
    let table = bench::planning_benchmark(robot, &cfg.plan.table)?;
    write(&out.join("planning.csv"), table.csv().as_bytes())?;
    write_json(&out.join("summary.json"), &table)
}

#[allow(clippy::too_many_arguments)]
fn cmd_mpc(
    cfg: &RunConfig,
    robot: &RobotModel,
    start: &Option<Vec<f64>>,
    goal: &Option<Vec<f64>>,
    episode_seed: Option<u64>,
    horizons: Option<&[usize]>,
    out: &Path,
) -> Result<()> {
    let (scene, episode) = match episode_seed {
        Some(s) => mpc::moving_obstacle_episode(robot, s, cfg.mpc.episode.duration)?,
        None => {
            let mut e: EpisodeConfig = cfg.mpc.episode.clone();
            if let Some(s) = start {
                e.start = s.clone();
            }
            if let Some(g) = goal {
                e.goal = g.clone();
            }
            if e.start.is_empty() || e.goal.is_empty() {
                return Err(Error::InvalidInput("mpc needs --start and --goal, or --episode-seed".into()));
            }
            (load_scene(cfg, robot)?, e)
        }
    };
    let field = field_for(cfg, robot, &scene, cfg.mpc.cells, cfg.mpc.spacing)?;
    let ep = mpc::simulate(robot, &scene, field.as_ref(), &cfg.mpc.controller, &episode)?;
    let mut buf = Vec::new();
    ep.write_csv(&mut buf)?;
    write(&out.join("episode.csv"), &buf)?;
    write(&out.join("scene.json"), scene.to_json().as_bytes())?;
    if robot.point_dim() == 2 {
        let mut states = vec![(0.0, episode.start.clone())];
        states.extend(ep.steps.iter().map(|s| (s.t, s.q.clone())));
        write(&out.join("snapshots.svg"), plot::episode_snapshots(robot, &scene, &states, 6)?.as_bytes())?;
    }
    let m = &ep.metrics;
    info!(
        "CR {:.2}%, MCI {:.3} rad/s, CF {:.1} Hz, reached {}",
        m.collision_rate, m.max_input, m.control_frequency, m.reached
    );
    let sweep = match horizons {
        Some(hs) => {
            let rows: Vec<(usize, mpc::MpcMetrics)> = hs
                .iter()
                .map(|&h| {
                    let p = mpc::MpcParams {
                        horizon: h,
                        ..cfg.mpc.controller.clone()
                    };
                    Ok((h, mpc::simulate(robot, &scene, field.as_ref(), &p, &episode)?.metrics))
                })
                .collect::<Result<_>>()?;
            write(&out.join("horizons.csv"), bench::mpc_table(&rows).as_bytes())?;
            Some(rows.into_iter().map(|(h, m)| json!({ "horizon": h, "metrics": m })).collect::<Vec<_>>())
        }
        None => None,
    };
    write_json(
        &out.join("summary.json"),
        &json!({
            "horizon": cfg.mpc.controller.horizon,
            "episode": episode,
            "metrics": m,
            "horizons": sweep,
        }),
    )
}

fn cmd_latency(cfg: &RunConfig, robot: &RobotModel, out: &Path) -> Result<()> {
    let model = match &cfg.inputs.model {
        Some(p) => load_model(p)?,
        None => FieldModel::new(
            FieldSpec::for_robot(robot, cfg.train.workspace_extension)?.with_hidden(cfg.train.hidden.clone()),
            cfg.seed,
        )?,
    };
    let l = &cfg.latency;
    let rows = bench::latency_bench(&model, &l.scales, l.repeats, l.threads, cfg.seed)?;
    write(&out.join("latency.csv"), bench::latency_csv(&rows).as_bytes())?;
    write(&out.join("latency.svg"), plot::latency_chart(&rows)?.as_bytes())?;
    write_json(&out.join("summary.json"), &rows)
}

fn cmd_plot(input: &Path, output: &Path, title: &str, log_x: bool, log_y: bool) -> Result<()> {
    let text = std::fs::read_to_string(input).map_err(|e| io_at(input, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty CSV", input.display())))?
        .split(',')
        .map(str::trim)
        .collect();
    if header.len() < 2 {
        return Err(Error::Format(format!("{}: need an x column and at least one series", input.display())));
    }
    let mut series: Vec<plot::Series> = header[1..]
        .iter()
        .map(|h| plot::Series {
            name: h.to_string(),
            points: Vec::new(),
        })
        .collect();
    for line in lines {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let Some(Ok(x)) = cells.first().map(|c| c.parse::<f64>()) else {
            continue;
        };
        for (s, c) in series.iter_mut().zip(&cells[1..]) {
            if let Ok(y) = c.parse::<f64>() {
                s.points.push((x, y));
            }
        }
    }
    series.retain(|s| !s.points.is_empty());
    let svg = plot::line_chart(title, header[0], "", &series, log_x, log_y)?;
    write(output, svg.as_bytes())
}
