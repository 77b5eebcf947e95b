//! Offline trajectory optimization on a signed distance field, initialized by
//! a sampling planner.

pub mod lbfgs;
pub mod metrics;
pub mod objective;
pub mod penalty;
pub mod rrt;
pub mod spline;

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::DistanceField;

pub use metrics::{trajectory_metrics, PlanMetrics};
pub use objective::{objective, objective_full, CostTerms, Layout, SafetyWeighting, TrajParams, TrajWeights};
pub use penalty::PenaltyParams;
pub use rrt::{rrt_connect, RrtParams};
pub use spline::SplineTrajectory;

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Largest box violations of a trajectory (zero when feasible).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct BoxViolation {
    pub joint: f64,
    pub velocity: f64,
    pub acceleration: f64,
}

impl BoxViolation {
    pub fn max(&self) -> f64 {
        self.joint.max(self.velocity).max(self.acceleration)
    }
}

pub fn box_violation(tr: &SplineTrajectory, lower: &[f64], upper: &[f64], params: &TrajParams) -> BoxViolation {
    let mut v = BoxViolation::default();
    for q in &tr.q {
        for j in 0..q.len() {
            v.joint = v.joint.max(lower[j] - q[j]).max(q[j] - upper[j]);
        }
    }
    for m in &tr.m {
        for x in m {
            v.acceleration = v.acceleration.max(x.abs() - params.acc_limit);
        }
    }
    for i in 0..tr.segments() {
        for x in tr.left_velocity(i) {
            v.velocity = v.velocity.max(x.abs() - params.vel_limit);
        }
    }
    v
}

#[derive(Debug, Clone, Serialize)]
pub struct OptReport {
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    pub objective: f64,
    /// Safety weight of the last solve.
    pub safety_weight: f64,
    /// Solves run, including re-solves with a raised safety weight.
    pub solves: usize,
    /// Uniform time scaling applied after optimization to meet the velocity
    /// and acceleration boxes (1 when not needed).
    pub time_scale: f64,
    pub violation: BoxViolation,
    pub feasible: bool,
}

/// Optimizes knot positions, interior accelerations and durations with the
/// end points and boundary velocities held fixed. Box constraints are
/// penalized during descent, then projected: knots are clamped to the joint
/// box, interior accelerations to the acceleration box, and (with zero
/// boundary velocities) time is stretched uniformly until the velocity and
/// acceleration boxes hold.
pub fn optimize(
    initial: &SplineTrajectory,
    field: &dyn DistanceField,
    params: &TrajParams,
    lower: &[f64],
    upper: &[f64],
) -> Result<(SplineTrajectory, OptReport)> {
    params.validate()?;
    Error::check_dim(initial.dof(), lower.len())?;
    Error::check_dim(initial.dof(), upper.len())?;
    let layout = Layout::new(initial)?;
    let mut params = params.clone();
    let x0 = layout.pack(initial);
    let mut iterations = 0;
    let mut solves = 0;
    let res = loop {
        let res = lbfgs::minimize(
            |x| objective(&layout, x, field, &params, lower, upper),
            x0.clone(),
            &lbfgs::LbfgsParams {
                max_iters: params.max_iters,
                grad_tol: params.grad_tol,
                ..Default::default()
            },
        )?;
        iterations += res.iterations;
        solves += 1;
        if params.weights.safety == 0.0 || solves > params.safety_rounds || !penetrates(&layout.unpack(&res.x), field, params.field_time)? {
            break res;
        }
        // a trajectory straddling a thin obstacle is a local minimum the
        // penalty cannot undo, so restart from the initial trajectory
        params.weights.safety *= 10.0;
        log::debug!("field negative along the trajectory; re-solving with safety weight {}", params.weights.safety);
    };
    let params = &params;
    let mut tr = layout.unpack(&res.x);
    let last = tr.q.len() - 1;
    for i in 1..last {
        for j in 0..tr.dof() {
            tr.q[i][j] = tr.q[i][j].clamp(lower[j], upper[j]);
            tr.m[i][j] = tr.m[i][j].clamp(-params.acc_limit, params.acc_limit);
        }
    }
    tr.apply_boundary_velocities();
    let mut time_scale = 1.0;
    let at_rest = tr.v_start.iter().chain(&tr.v_end).all(|v| *v == 0.0);
    let v = box_violation(&tr, lower, upper, params);
    if at_rest && (v.velocity > 0.0 || v.acceleration > 0.0) {
        let vel_ratio = (0..tr.segments())
            .flat_map(|i| tr.left_velocity(i))
            .chain((0..tr.segments()).flat_map(|i| tr.right_velocity(i)))
            .fold(0.0f64, |a, x| a.max(x.abs()))
            / params.vel_limit;
        let acc_ratio = tr.m.iter().flatten().fold(0.0f64, |a, x| a.max(x.abs())) / params.acc_limit;
        time_scale = vel_ratio.max(acc_ratio.sqrt()).max(1.0) * (1.0 + 1e-9);
        for t in tr.t.iter_mut() {
            *t *= time_scale;
        }
        for m in tr.m.iter_mut().flatten() {
            *m /= time_scale * time_scale;
        }
    }
    let violation = box_violation(&tr, lower, upper, params);
    let feasible = violation.max() <= 1e-6;
    if !feasible {
        log::warn!("trajectory violates its box constraints by {:.3e}", violation.max());
    }
    Ok((
        tr,
        OptReport {
            iterations,
            converged: res.converged,
            grad_norm: res.grad_norm,
            objective: res.value,
            safety_weight: params.weights.safety,
            solves,
            time_scale,
            violation,
            feasible,
        },
    ))
}

/// Whether the field reads negative at any of the densely resampled states.
fn penetrates(tr: &SplineTrajectory, field: &dyn DistanceField, t: f64) -> Result<bool> {
    for q in tr.resample(metrics::DENSE_STATES) {
        if field.distance(&q, t)?.value < 0.0 {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Spline through a polyline, resampled into segments of about
/// `segment_length` rad and timed at `speed` rad/s, starting and ending at rest.
pub fn spline_from_path(path: &[Vec<f64>], segment_length: f64, speed: f64) -> Result<SplineTrajectory> {
    if path.len() < 2 {
        return Err(Error::invalid("path needs at least two waypoints"));
    }
    if !(segment_length > 0.0) || !(speed > 0.0) {
        return Err(Error::invalid("segment length and speed must be positive"));
    }
    let total = metrics::path_length(path);
    let segs = ((total / segment_length).ceil() as usize).clamp(2, 200);
    let knots = metrics::resample_polyline(path, segs + 1);
    let t = knots
        .windows(2)
        .map(|w| (dist(&w[0], &w[1]) / speed).max(0.05))
        .collect();
    SplineTrajectory::from_waypoints(knots, t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanParams {
    pub rrt: RrtParams,
    pub segment_length: f64,
    pub speed: f64,
}

impl Default for PlanParams {
    fn default() -> Self {
        PlanParams {
            rrt: RrtParams::default(),
            segment_length: 0.25,
            speed: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub path: Vec<Vec<f64>>,
    pub trajectory: SplineTrajectory,
    pub report: OptReport,
    pub init_ms: f64,
    pub total_ms: f64,
}

/// Sampling initializer followed by trajectory optimization.
#[allow(clippy::too_many_arguments)]
pub fn plan(
    start: &[f64],
    goal: &[f64],
    lower: &[f64],
    upper: &[f64],
    colliding: &dyn Fn(&[f64]) -> bool,
    field: &dyn DistanceField,
    plan_params: &PlanParams,
    params: &TrajParams,
) -> Result<PlanOutcome> {
    let clock = Instant::now();
    let path = rrt_connect(lower, upper, start, goal, colliding, &plan_params.rrt)?;
    let init_ms = clock.elapsed().as_secs_f64() * 1e3;
    let init = spline_from_path(&path, plan_params.segment_length, plan_params.speed)?;
    let (trajectory, report) = optimize(&init, field, params, lower, upper)?;
    Ok(PlanOutcome {
        path,
        trajectory,
        report,
        init_ms,
        total_ms: clock.elapsed().as_secs_f64() * 1e3,
    })
}
