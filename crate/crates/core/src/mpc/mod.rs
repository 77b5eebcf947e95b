//! Receding-horizon joint-velocity control with linearized distance-field
//! safety rows, and a simulation loop over (possibly moving) scenes.

pub mod qp;

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::DistanceField;
use crate::geometry::scene::{in_collision, Scene};
use crate::robot::RobotModel;
pub use qp::{QpInstance, QpSettings, QpSolution, QpStatus, Residuals};

/// Right-hand side of the safety row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SafetyForm {
    /// `∇φᵀ(q_{k+1} − q_k) ≥ Δt(γ − φ)`.
    Verbatim,
    /// `φ(q_{k+1}) ≥ (1 − decay·Δt) φ(q_k)` to first order.
    Barrier { decay: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcParams {
    pub horizon: usize,
    pub dt: f64,
    /// Diagonal state-tracking weight.
    pub q_weight: f64,
    /// Diagonal input weight.
    pub r_weight: f64,
    /// Symmetric input bound (rad/s).
    pub u_max: f64,
    /// Safety margin (rad).
    pub gamma: f64,
    /// Safety rows per predicted step (smallest field candidates).
    pub rows_per_step: usize,
    /// Candidates farther than this (rad) produce no row.
    pub activation: f64,
    pub safety_form: SafetyForm,
    pub solver: QpSettings,
    /// Consecutive solver failures before commanding zero velocity.
    pub max_failures: usize,
}

impl Default for MpcParams {
    fn default() -> Self {
        MpcParams {
            horizon: 10,
            dt: 0.01,
            q_weight: 100.0,
            r_weight: 0.1,
            u_max: 1.0,
            gamma: 0.05,
            rows_per_step: 5,
            activation: 1.0,
            safety_form: SafetyForm::Verbatim,
            solver: QpSettings::default(),
            max_failures: 3,
        }
    }
}

impl MpcParams {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        if !(self.dt > 0.0) || !(self.q_weight > 0.0) || !(self.r_weight > 0.0) {
            return Err(Error::invalid("need dt > 0 and positive Q, R weights"));
        }
        if !(self.u_max > 0.0) || !(self.gamma > 0.0) {
            return Err(Error::invalid("need u_max > 0 and gamma > 0"));
        }
        if let SafetyForm::Barrier { decay } = self.safety_form {
            if !(decay > 0.0) || decay * self.dt > 1.0 {
                return Err(Error::invalid("barrier decay must lie in (0, 1/dt]"));
            }
        }
        Ok(())
    }
}

/// Linearized safety constraint on the input of step `k`:
/// `gradᵀ u_k ≥ lower` (already divided by Δt), or `u_k = 0` when the
/// gradient vanishes inside the margin.
#[derive(Debug, Clone, PartialEq)]
pub enum SafetyRow {
    Linear { k: usize, grad: Vec<f64>, phi: f64, lower: f64 },
    Stop { k: usize },
}

/// Row built from `φ(q_k)` and `∇φ(q_k)`.
pub fn linearized_safety_row(k: usize, phi: f64, grad: &[f64], params: &MpcParams) -> SafetyRow {
    let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if gnorm < 1e-12 && phi < params.gamma {
        return SafetyRow::Stop { k };
    }
    let lower = match params.safety_form {
        SafetyForm::Verbatim => params.gamma - phi,
        SafetyForm::Barrier { decay } => -decay * phi,
    };
    SafetyRow::Linear {
        k,
        grad: grad.to_vec(),
        phi,
        lower,
    }
}

/// The horizon problem about the current state.
#[derive(Debug, Clone)]
pub struct MpcProblem<'a> {
    pub params: &'a MpcParams,
    pub q_lower: &'a [f64],
    pub q_upper: &'a [f64],
    pub q_current: &'a [f64],
    /// Reference for predicted states 1..=H.
    pub reference: &'a [Vec<f64>],
}

impl MpcProblem<'_> {
    fn dof(&self) -> usize {
        self.q_current.len()
    }

    /// Tracking plus input cost of a stacked input sequence.
    pub fn cost(&self, z: &[f64]) -> f64 {
        let n = self.dof();
        let p = self.params;
        let mut q = self.q_current.to_vec();
        let mut c = 0.0;
        for k in 0..p.horizon {
            for j in 0..n {
                let u = z[k * n + j];
                c += p.r_weight * u * u;
                q[j] += p.dt * u;
                let e = q[j] - self.reference[k][j];
                c += p.q_weight * e * e;
            }
        }
        c
    }
}

/// Assembles the QP over stacked inputs `u_0..u_{H-1}` (states eliminated).
/// Rows: input box, state box for k = 1..H, then safety rows in order.
pub fn build_qp(prob: &MpcProblem, rows: &[SafetyRow]) -> Result<QpInstance> {
    let p = prob.params;
    p.validate()?;
    let n = prob.dof();
    let h = p.horizon;
    Error::check_dim(n, prob.q_lower.len())?;
    Error::check_dim(n, prob.q_upper.len())?;
    if prob.reference.len() < h {
        return Err(Error::invalid(format!("reference has {} points, horizon needs {h}", prob.reference.len())));
    }
    let nv = n * h;
    let (dt, qw, rw) = (p.dt, p.q_weight, p.r_weight);
    let mut pm = DMatrix::<f64>::zeros(nv, nv);
    let mut qv = DVector::<f64>::zeros(nv);
    for a in 0..h {
        for j in 0..n {
            for b in 0..h {
                pm[(a * n + j, b * n + j)] = 2.0 * dt * dt * qw * (h - a.max(b)) as f64;
            }
            pm[(a * n + j, a * n + j)] += 2.0 * rw;
            let err: f64 = (a + 1..=h).map(|k| prob.q_current[j] - prob.reference[k - 1][j]).sum();
            qv[a * n + j] = 2.0 * dt * qw * err;
        }
    }
    let stops = rows.iter().filter(|r| matches!(r, SafetyRow::Stop { .. })).count();
    let linear = rows.len() - stops;
    let m = 2 * nv + linear + stops * n;
    let mut c = DMatrix::<f64>::zeros(m, nv);
    let mut l = DVector::<f64>::zeros(m);
    let mut u = DVector::<f64>::zeros(m);
    for i in 0..nv {
        c[(i, i)] = 1.0;
        l[i] = -p.u_max;
        u[i] = p.u_max;
    }
    // state box, divided by dt: sum_{j<k} u_j within [(q_min - q)/dt, (q_max - q)/dt]
    for k in 1..=h {
        for j in 0..n {
            let r = nv + (k - 1) * n + j;
            for a in 0..k {
                c[(r, a * n + j)] = 1.0;
            }
            l[r] = (prob.q_lower[j] - prob.q_current[j]) / dt;
            u[r] = (prob.q_upper[j] - prob.q_current[j]) / dt;
        }
    }
    let mut r = 2 * nv;
    for row in rows {
        match row {
            SafetyRow::Linear { k, grad, lower, .. } => {
                if *k >= h {
                    return Err(Error::invalid("safety row beyond the horizon"));
                }
                Error::check_dim(n, grad.len())?;
                for j in 0..n {
                    c[(r, k * n + j)] = grad[j];
                }
                l[r] = *lower;
                u[r] = f64::INFINITY;
                r += 1;
            }
            SafetyRow::Stop { k } => {
                for j in 0..n {
                    c[(r, k * n + j)] = 1.0;
                    r += 1;
                }
            }
        }
    }
    QpInstance::new(pm, qv, c, l, u)
}

/// Safety rows about nominal states `nominal[k]` (k = 0..H-1) from the field
/// at time `t`: the `rows_per_step` smallest candidates within `activation`.
pub fn safety_rows(field: &dyn DistanceField, nominal: &[Vec<f64>], t: f64, params: &MpcParams) -> Result<Vec<SafetyRow>> {
    let mut out = Vec::new();
    for (k, q) in nominal.iter().enumerate() {
        let cands = field.candidates(q, t)?;
        let mut order: Vec<usize> = (0..cands.len()).filter(|&i| cands[i].value < params.activation).collect();
        order.sort_by(|&a, &b| cands[a].value.total_cmp(&cands[b].value));
        for &i in order.iter().take(params.rows_per_step) {
            let c = &cands[i];
            if !c.value.is_finite() || c.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Optimization("distance field returned a non-finite value".into()));
            }
            let row = linearized_safety_row(k, c.value, &c.grad, params);
            let stop = matches!(row, SafetyRow::Stop { .. });
            out.push(row);
            if stop {
                break;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Solved,
    /// Solver failed; previous input halved.
    Fallback,
    /// Repeated failure or vanishing gradient inside the margin.
    EmergencyStop,
}

impl std::fmt::Display for StepStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StepStatus::Solved => "solved",
            StepStatus::Fallback => "fallback",
            StepStatus::EmergencyStop => "emergency_stop",
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub u: Vec<f64>,
    pub status: StepStatus,
    pub qp_status: QpStatus,
    /// Smallest field value at the current state.
    pub phi: f64,
    pub solve_ms: f64,
    pub kkt: f64,
    /// Smallest slack of the step-0 safety rows in configuration units
    /// (None without rows).
    pub min_slack: Option<f64>,
    pub rows: usize,
}

pub struct Controller {
    params: MpcParams,
    q_lower: Vec<f64>,
    q_upper: Vec<f64>,
    prev: Option<(DVector<f64>, DVector<f64>)>,
    last_u: Vec<f64>,
    failures: usize,
}

impl Controller {
    pub fn new(params: MpcParams, q_lower: Vec<f64>, q_upper: Vec<f64>) -> Result<Self> {
        params.validate()?;
        Error::check_dim(q_lower.len(), q_upper.len())?;
        let n = q_lower.len();
        Ok(Controller {
            params,
            q_lower,
            q_upper,
            prev: None,
            last_u: vec![0.0; n],
            failures: 0,
        })
    }

    pub fn params(&self) -> &MpcParams {
        &self.params
    }

    /// Predicted states from the previous solution shifted by one step.
    fn nominal(&self, q: &[f64]) -> Vec<Vec<f64>> {
        let n = q.len();
        let h = self.params.horizon;
        let mut out = vec![q.to_vec()];
        let mut cur = q.to_vec();
        for k in 1..h {
            if let Some((z, _)) = &self.prev {
                let src = (k).min(h - 1);
                for j in 0..n {
                    cur[j] += self.params.dt * z[src * n + j];
                }
            }
            out.push(cur.clone());
        }
        out
    }

    /// One control step: linearize, solve, apply the first input.
    pub fn step(&mut self, q: &[f64], t: f64, field: &dyn DistanceField, reference: &[Vec<f64>]) -> Result<StepLog> {
        let n = self.q_lower.len();
        Error::check_dim(n, q.len())?;
        let p = &self.params;
        let phi = field.distance(q, t)?.value;
        let rows = safety_rows(field, &self.nominal(q), t, p)?;
        let prob = MpcProblem {
            params: p,
            q_lower: &self.q_lower,
            q_upper: &self.q_upper,
            q_current: q,
            reference,
        };
        let inst = build_qp(&prob, &rows)?;
        let warm = self.prev.as_ref().filter(|(_, y)| y.len() == inst.rows()).map(|(x, y)| (x, y));
        let clock = Instant::now();
        let sol = qp::solve(&inst, &p.solver, warm)?;
        let solve_ms = clock.elapsed().as_secs_f64() * 1e3;
        let stop_now = rows.iter().any(|r| matches!(r, SafetyRow::Stop { k: 0 }));
        let (u, status) = if sol.status == QpStatus::Solved {
            self.failures = 0;
            let u: Vec<f64> = (0..n).map(|j| sol.x[j].clamp(-p.u_max, p.u_max)).collect();
            self.prev = Some((sol.x.clone(), sol.y.clone()));
            (u, if stop_now { StepStatus::EmergencyStop } else { StepStatus::Solved })
        } else {
            self.failures += 1;
            self.prev = None;
            if self.failures >= p.max_failures {
                (vec![0.0; n], StepStatus::EmergencyStop)
            } else {
                (self.last_u.iter().map(|v| 0.5 * v).collect(), StepStatus::Fallback)
            }
        };
        let mut min_slack: Option<f64> = None;
        for r in &rows {
            if let SafetyRow::Linear { k: 0, grad, lower, .. } = r {
                let s = p.dt * (grad.iter().zip(&u).map(|(g, v)| g * v).sum::<f64>() - lower);
                min_slack = Some(min_slack.map_or(s, |m| m.min(s)));
            }
        }
        self.last_u = u.clone();
        Ok(StepLog {
            u,
            status,
            qp_status: sol.status,
            phi,
            solve_ms,
            kkt: sol.residuals.max(),
            min_slack,
            rows: rows.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub start: Vec<f64>,
    pub goal: Vec<f64>,
    /// Simulated time (s).
    pub duration: f64,
    /// Speed of the straight-line reference (rad/s).
    pub ref_speed: f64,
    pub goal_tol: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            start: Vec::new(),
            goal: Vec::new(),
            duration: 10.0,
            ref_speed: 0.5,
            goal_tol: 1e-2,
        }
    }
}

/// Straight-line reference from `start` to `goal` at `speed`, held at the goal.
pub fn line_reference(start: &[f64], goal: &[f64], speed: f64, t: f64) -> Vec<f64> {
    let d: f64 = start.iter().zip(goal).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let s = if d == 0.0 { 1.0 } else { (speed * t / d).min(1.0) };
    start.iter().zip(goal).map(|(a, b)| a + s * (b - a)).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct EpisodeStep {
    pub t: f64,
    pub q: Vec<f64>,
    pub log: StepLog,
    pub colliding: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct MpcMetrics {
    /// Percentage of steps whose resulting state collides.
    pub collision_rate: f64,
    /// Largest commanded |u|_inf (rad/s).
    pub max_input: f64,
    /// 1 / mean QP solve time (Hz).
    pub control_frequency: f64,
    pub reached: bool,
    pub final_error: f64,
    /// Largest KKT residual over solved QPs.
    pub max_kkt: f64,
    pub fallbacks: usize,
    pub emergency_stops: usize,
    pub min_phi: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Episode {
    pub steps: Vec<EpisodeStep>,
    pub metrics: MpcMetrics,
}

impl Episode {
    /// Per-step CSV: `t, q_*, u_*, phi, solve_ms, status`.
    pub fn write_csv(&self, mut w: impl std::io::Write) -> Result<()> {
        let n = self.steps.first().map_or(0, |s| s.q.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|j| format!("q_{j}")));
        header.extend((1..=n).map(|j| format!("u_{j}")));
        header.extend(["phi", "solve_ms", "status"].map(String::from));
        writeln!(w, "{}", header.join(","))?;
        for s in &self.steps {
            let mut row: Vec<String> = std::iter::once(s.t).chain(s.q.iter().copied()).map(|v| v.to_string()).collect();
            row.extend(s.log.u.iter().map(|v| v.to_string()));
            row.push(s.log.phi.to_string());
            row.push(format!("{:.4}", s.log.solve_ms));
            row.push(s.log.status.to_string());
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Runs the controller from `cfg.start` for `cfg.duration` seconds. Collisions
/// are judged by the exact oracle at each new state and time.
pub fn simulate(
    model: &RobotModel,
    scene: &Scene,
    field: &dyn DistanceField,
    params: &MpcParams,
    cfg: &EpisodeConfig,
) -> Result<Episode> {
    let n = model.dof();
    Error::check_dim(n, cfg.start.len())?;
    Error::check_dim(n, cfg.goal.len())?;
    if !(cfg.duration > 0.0) || !(cfg.ref_speed > 0.0) {
        return Err(Error::invalid("episode duration and reference speed must be positive"));
    }
    let mut ctrl = Controller::new(params.clone(), model.lower_limits(), model.upper_limits())?;
    let dt = params.dt;
    let steps = (cfg.duration / dt).round() as usize;
    let mut q = cfg.start.clone();
    let mut out = Vec::with_capacity(steps);
    let mut m = MpcMetrics {
        min_phi: f64::INFINITY,
        ..Default::default()
    };
    let mut solve_total = 0.0;
    let mut hits = 0;
    for s in 0..steps {
        let t = s as f64 * dt;
        let reference: Vec<Vec<f64>> = (1..=params.horizon)
            .map(|k| line_reference(&cfg.start, &cfg.goal, cfg.ref_speed, t + k as f64 * dt))
            .collect();
        let log = ctrl.step(&q, t, field, &reference)?;
        solve_total += log.solve_ms;
        m.max_input = log.u.iter().fold(m.max_input, |a, v| a.max(v.abs()));
        m.min_phi = m.min_phi.min(log.phi);
        match log.status {
            StepStatus::Solved => m.max_kkt = m.max_kkt.max(log.kkt),
            StepStatus::Fallback => m.fallbacks += 1,
            StepStatus::EmergencyStop => m.emergency_stops += 1,
        }
        for j in 0..n {
            q[j] += dt * log.u[j];
        }
        let colliding = in_collision(model, scene, &q, t + dt)?;
        if colliding {
            hits += 1;
        }
        out.push(EpisodeStep {
            t: t + dt,
            q: q.clone(),
            log,
            colliding,
        });
    }
    m.collision_rate = 100.0 * hits as f64 / steps.max(1) as f64;
    m.control_frequency = if solve_total > 0.0 {
        1e3 * steps as f64 / solve_total
    } else {
        f64::INFINITY
    };
    m.final_error = q.iter().zip(&cfg.goal).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    m.reached = m.final_error <= cfg.goal_tol;
    Ok(Episode { steps: out, metrics: m })
}

/// Seeded planar-arm episode with one disc that starts on the straight-line
/// route (at the midpoint configuration) and drifts outward beyond the arm's
/// reach. Start and goal are collision-free for the whole episode.
pub fn moving_obstacle_episode(model: &RobotModel, seed: u64, duration: f64) -> Result<(Scene, EpisodeConfig)> {
    use rand::{Rng, SeedableRng};
    if model.dof() != 2 || model.point_dim() != 2 {
        return Err(Error::invalid("moving-obstacle episodes are defined for the planar two-link arm"));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..1000 {
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let start = vec![side * rng.gen_range(-1.2..-0.4), rng.gen_range(-0.6..0.6)];
        let goal = vec![side * rng.gen_range(0.4..1.2), rng.gen_range(-0.6..0.6)];
        let mid: Vec<f64> = start.iter().zip(&goal).map(|(a, b)| 0.5 * (a + b)).collect();
        let spheres = model.forward_spheres(&mid)?;
        let pick = rng.gen_range(spheres.len() / 2..spheres.len());
        let c = spheres[pick].center;
        let ang = c[1].atan2(c[0]) + rng.gen_range(-0.5..0.5);
        let speed = rng.gen_range(0.3..0.5);
        let obstacle = crate::geometry::scene::Primitive::circle([c[0], c[1]], rng.gen_range(0.25..0.4))
            .with_velocity(&[speed * ang.cos(), speed * ang.sin()]);
        let scene = Scene::new(vec![obstacle]);
        let mut ok = !in_collision(model, &scene, &start, 0.0)?;
        let mut t = 0.0;
        while ok && t <= duration {
            ok = !in_collision(model, &scene, &goal, t)?;
            t += 0.25;
        }
        if ok {
            let cfg = EpisodeConfig {
                start,
                goal,
                duration,
                ..Default::default()
            };
            return Ok((scene, cfg));
        }
    }
    Err(Error::invalid(format!("no valid episode for seed {seed}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{FieldValue, OracleField};
    use crate::geometry::scene::Primitive;

    struct Plane {
        a: Vec<f64>,
        b: f64,
    }

    impl DistanceField for Plane {
        fn dof(&self) -> usize {
            self.a.len()
        }
        fn candidates(&self, q: &[f64], _t: f64) -> Result<Vec<FieldValue>> {
            Ok(vec![FieldValue {
                value: self.a.iter().zip(q).map(|(x, y)| x * y).sum::<f64>() + self.b,
                grad: self.a.clone(),
            }])
        }
    }

    fn problem<'a>(p: &'a MpcParams, q: &'a [f64], r: &'a [Vec<f64>]) -> MpcProblem<'a> {
        MpcProblem {
            params: p,
            q_lower: &[-3.0, -3.0],
            q_upper: &[3.0, 3.0],
            q_current: q,
            reference: r,
        }
    }

    #[test]
    fn row_at_margin_admits_standing_still() {
        let p = MpcParams::default();
        match linearized_safety_row(0, p.gamma, &[0.3, -0.4], &p) {
            SafetyRow::Linear { lower, .. } => assert_eq!(lower, 0.0),
            r => panic!("{r:?}"),
        }
        match linearized_safety_row(0, p.gamma + 0.1, &[1.0, 0.0], &p) {
            SafetyRow::Linear { lower, .. } => assert!((p.dt * -lower - p.dt * 0.1).abs() < 1e-15),
            r => panic!("{r:?}"),
        }
        assert_eq!(linearized_safety_row(2, 0.0, &[0.0, 0.0], &p), SafetyRow::Stop { k: 2 });
    }

    #[test]
    fn oracle_row_predicts_first_order_change() {
        let m = RobotModel::planar_benchmark();
        let scene = Scene::new(vec![Primitive::circle([2.5, 1.5], 0.5)]);
        let f = OracleField::new(m, scene, 201).unwrap();
        let mut checked = 0;
        for i in 0..40 {
            let q = [-2.5 + 0.125 * i as f64, 0.4];
            let v = f.distance(&q, 0.0).unwrap();
            if v.value.abs() < 0.1 {
                continue;
            }
            let d = 1e-3;
            let norm = v.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            let q2: Vec<f64> = q.iter().zip(&v.grad).map(|(a, g)| a + d * g / norm).collect();
            let dv = f.distance(&q2, 0.0).unwrap().value - v.value;
            assert!((dv - d * norm).abs() <= 0.1 * d, "{q:?}: {dv}");
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn stationary_reference_gives_zero_input() {
        let p = MpcParams {
            horizon: 1,
            ..Default::default()
        };
        let q = [0.2, -0.1];
        let r = vec![q.to_vec()];
        let inst = build_qp(&problem(&p, &q, &r), &[]).unwrap();
        let s = qp::solve(&inst, &p.solver, None).unwrap();
        assert_eq!(s.status, QpStatus::Solved);
        assert!(s.x.amax() < 1e-9);
    }

    #[test]
    fn qp_cost_matches_problem_cost() {
        let p = MpcParams::default();
        let q = [0.2, -0.1];
        let r: Vec<Vec<f64>> = (0..p.horizon).map(|k| vec![0.3 + 0.01 * k as f64, 0.0]).collect();
        let prob = problem(&p, &q, &r);
        let inst = build_qp(&prob, &[]).unwrap();
        let base: f64 = r.iter().map(|x| p.q_weight * ((q[0] - x[0]).powi(2) + (q[1] - x[1]).powi(2))).sum();
        assert!((prob.cost(&vec![0.0; 2 * p.horizon]) - base).abs() < 1e-12);
        let z: Vec<f64> = (0..2 * p.horizon).map(|i| (i as f64 * 0.37).sin()).collect();
        let zv = DVector::from_vec(z.clone());
        assert!((inst.objective(&zv) + base - prob.cost(&z)).abs() < 1e-9);
        let eig = nalgebra::SymmetricEigen::new(inst.p.clone()).eigenvalues;
        assert!(eig.min() >= -1e-10);
    }

    #[test]
    fn one_step_safety_on_linear_field() {
        let p = MpcParams::default();
        let field = Plane {
            a: vec![0.6, -0.8],
            b: 0.0,
        };
        let mut ctrl = Controller::new(p.clone(), vec![-3.0; 2], vec![3.0; 2]).unwrap();
        // the reference pulls straight through the zero level set
        for q in [[0.3, -0.1], [0.06, 0.0], [0.02, 0.0]] {
            let r = vec![vec![-2.0, 2.0]; p.horizon];
            let phi0 = field.distance(&q, 0.0).unwrap().value;
            let log = ctrl.step(&q, 0.0, &field, &r).unwrap();
            assert_eq!(log.status, StepStatus::Solved);
            let q1: Vec<f64> = q.iter().zip(&log.u).map(|(a, u)| a + p.dt * u).collect();
            let phi1 = field.distance(&q1, 0.0).unwrap().value;
            assert!(phi1 >= phi0 + p.dt * (p.gamma - phi0) - 1e-6, "{phi0} -> {phi1}");
            assert!(log.u.iter().all(|u| u.abs() <= p.u_max));
        }
    }

    #[test]
    fn infeasible_steps_fall_back_then_stop() {
        let p = MpcParams {
            u_max: 0.1,
            ..Default::default()
        };
        // demands escape speed 10 with |u| <= 0.1
        let field = Plane {
            a: vec![1.0, 0.0],
            b: -10.0,
        };
        let mut ctrl = Controller::new(p.clone(), vec![-30.0; 2], vec![30.0; 2]).unwrap();
        ctrl.last_u = vec![0.08, 0.0];
        let r = vec![vec![0.0, 0.0]; p.horizon];
        let s1 = ctrl.step(&[0.0, 0.0], 0.0, &field, &r).unwrap();
        assert_eq!(s1.status, StepStatus::Fallback);
        assert_eq!(s1.u, vec![0.04, 0.0]);
        let s2 = ctrl.step(&[0.0, 0.0], 0.0, &field, &r).unwrap();
        assert_eq!(s2.u, vec![0.02, 0.0]);
        let s3 = ctrl.step(&[0.0, 0.0], 0.0, &field, &r).unwrap();
        assert_eq!(s3.status, StepStatus::EmergencyStop);
        assert_eq!(s3.u, vec![0.0, 0.0]);
    }

    #[test]
    fn empty_scene_reaches_goal() {
        let m = RobotModel::planar_benchmark();
        let scene = Scene::default();
        let f = OracleField::new(m.clone(), scene.clone(), 101).unwrap();
        let cfg = EpisodeConfig {
            start: vec![0.5, 1.0],
            goal: vec![1.2, 0.6],
            duration: 3.0,
            ..Default::default()
        };
        let ep = simulate(&m, &scene, &f, &MpcParams::default(), &cfg).unwrap();
        assert_eq!(ep.metrics.collision_rate, 0.0);
        assert!(ep.metrics.reached, "{:?}", ep.metrics);
        assert!(ep.metrics.max_input <= 1.0);
        let mut csv = Vec::new();
        ep.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), ep.steps.len() + 1);
    }

    #[test]
    fn moving_obstacle_episode_is_safe_and_deterministic() {
        let m = RobotModel::planar_benchmark();
        let (scene, cfg) = moving_obstacle_episode(&m, 3, 12.0).unwrap();
        let f = OracleField::new(m.clone(), scene.clone(), 101).unwrap();
        let ep = simulate(&m, &scene, &f, &MpcParams::default(), &cfg).unwrap();
        assert_eq!(ep.metrics.collision_rate, 0.0, "{:?}", ep.metrics);
        assert!(ep.metrics.reached, "{:?}", ep.metrics);
        assert!(ep.metrics.max_kkt <= 1e-6);
        // the obstacle pushes the arm off the straight line
        let off = ep
            .steps
            .iter()
            .map(|s| {
                let r = line_reference(&cfg.start, &cfg.goal, cfg.ref_speed, s.t);
                (s.q[0] - r[0]).hypot(s.q[1] - r[1])
            })
            .fold(0.0, f64::max);
        assert!(off > 0.05, "{off}");
        let ep2 = simulate(&m, &scene, &f, &MpcParams::default(), &cfg).unwrap();
        for (a, b) in ep.steps.iter().zip(&ep2.steps) {
            assert_eq!(a.q, b.q);
            assert_eq!(a.log.u, b.log.u);
        }
    }
}
