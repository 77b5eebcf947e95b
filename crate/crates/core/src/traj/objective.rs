//! Trajectory cost (smoothness, time, time regularity, length, safety, box and
//! velocity-continuity penalties) with its analytic gradient.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::penalty::PenaltyParams;
use super::spline::{accel_shape, weighted_trace, SplineTrajectory, SMOOTHNESS_WEIGHT};
use crate::error::{Error, Result};
use crate::fields::DistanceField;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajWeights {
    pub smooth: f64,
    pub time: f64,
    pub regularity: f64,
    pub length: f64,
    pub safety: f64,
    /// Squared velocity jump between adjacent segments.
    pub continuity: f64,
    /// Squared violation of joint, velocity and acceleration boxes.
    pub bounds: f64,
}

impl Default for TrajWeights {
    fn default() -> Self {
        TrajWeights {
            smooth: 1.0,
            time: 1.0,
            regularity: 0.1,
            length: 1.0,
            safety: 10.0,
            continuity: 10.0,
            bounds: 1000.0,
        }
    }
}

/// How safety samples are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyWeighting {
    /// Plain sum over knots and interior samples.
    Count,
    /// Each sample weighted by its share of the segment chord length, so the
    /// term approximates a line integral and cannot be lowered by moving
    /// knots away from obstacles.
    ArcLength,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajParams {
    pub weights: TrajWeights,
    pub penalty: PenaltyParams,
    /// Extra safety samples inside each segment (control points always count).
    pub samples_per_segment: usize,
    pub safety_weighting: SafetyWeighting,
    /// With arc-length weighting, longest chord distance (rad) between
    /// safety samples; long segments get more than `samples_per_segment`.
    pub sample_spacing: f64,
    /// While the field is negative somewhere along the result, re-solve from
    /// the initial trajectory with the safety weight raised tenfold, at most
    /// this many times.
    pub safety_rounds: usize,
    /// L-BFGS iteration cap per solve.
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Symmetric joint velocity limit (rad/s).
    pub vel_limit: f64,
    /// Symmetric joint acceleration limit (rad/s²).
    pub acc_limit: f64,
    /// Scene time at which the field is queried.
    pub field_time: f64,
}

impl Default for TrajParams {
    fn default() -> Self {
        TrajParams {
            weights: TrajWeights::default(),
            penalty: PenaltyParams::default(),
            samples_per_segment: 5,
            safety_weighting: SafetyWeighting::ArcLength,
            sample_spacing: 0.05,
            safety_rounds: 3,
            max_iters: 500,
            grad_tol: 1e-4,
            vel_limit: 2.0,
            acc_limit: 10.0,
            field_time: 0.0,
        }
    }
}

impl TrajParams {
    pub fn validate(&self) -> Result<()> {
        self.penalty.validate()?;
        let w = &self.weights;
        let all = [w.smooth, w.time, w.regularity, w.length, w.safety, w.continuity, w.bounds];
        if all.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::invalid("trajectory weights must be finite and non-negative"));
        }
        if !(self.vel_limit > 0.0) || !(self.acc_limit > 0.0) {
            return Err(Error::invalid("velocity and acceleration limits must be positive"));
        }
        if !(self.sample_spacing > 0.0) {
            return Err(Error::invalid("safety sample spacing must be positive"));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::invalid("gradient tolerance must be positive"));
        }
        Ok(())
    }
}

/// Gradient with respect to every knot position, knot acceleration and
/// duration (before eliminating the end accelerations).
#[derive(Debug, Clone)]
pub struct FullGradient {
    pub q: Vec<Vec<f64>>,
    pub m: Vec<Vec<f64>>,
    pub t: Vec<f64>,
}

impl FullGradient {
    fn zeros(tr: &SplineTrajectory) -> Self {
        let n = tr.dof();
        FullGradient {
            q: vec![vec![0.0; n]; tr.q.len()],
            m: vec![vec![0.0; n]; tr.m.len()],
            t: vec![0.0; tr.t.len()],
        }
    }
}

#[derive(Clone, Copy)]
enum Side {
    Left,
    Right,
}

/// Adds `coeff * d v_j / d(params)` for the left or right endpoint velocity of
/// segment `i`.
fn add_velocity_grad(tr: &SplineTrajectory, g: &mut FullGradient, side: Side, i: usize, j: usize, coeff: f64) {
    let t = tr.t[i];
    let dq = tr.q[i + 1][j] - tr.q[i][j];
    let (a, b) = (tr.m[i][j], tr.m[i + 1][j]);
    g.q[i + 1][j] += coeff / t;
    g.q[i][j] -= coeff / t;
    match side {
        Side::Left => {
            g.m[i][j] -= coeff * t / 3.0;
            g.m[i + 1][j] -= coeff * t / 6.0;
            g.t[i] += coeff * (-dq / (t * t) - a / 3.0 - b / 6.0);
        }
        Side::Right => {
            g.m[i][j] += coeff * t / 6.0;
            g.m[i + 1][j] += coeff * t / 3.0;
            g.t[i] += coeff * (-dq / (t * t) + a / 6.0 + b / 3.0);
        }
    }
}

/// `w * max(0, lo - x, x - hi)^2` and its derivative.
fn box_hinge(x: f64, lo: f64, hi: f64, w: f64) -> (f64, f64) {
    if x < lo {
        let v = lo - x;
        (w * v * v, -2.0 * w * v)
    } else if x > hi {
        let v = x - hi;
        (w * v * v, 2.0 * w * v)
    } else {
        (0.0, 0.0)
    }
}

/// Safety sample locations `(segment, s)`: every knot plus `extra[i]` evenly
/// spaced interior points in segment `i`.
pub fn safety_samples(extra: &[usize]) -> Vec<(usize, f64)> {
    let segments = extra.len();
    let mut out = Vec::with_capacity(extra.iter().map(|e| e + 1).sum::<usize>() + 1);
    for (i, &e) in extra.iter().enumerate() {
        for k in 0..=e {
            out.push((i, k as f64 / (e + 1) as f64));
        }
    }
    out.push((segments - 1, 1.0));
    out
}

/// Cost terms, reported separately for diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CostTerms {
    pub smooth: f64,
    pub time: f64,
    pub regularity: f64,
    pub length: f64,
    pub safety: f64,
    pub continuity: f64,
    pub bounds: f64,
}

impl CostTerms {
    pub fn total(&self) -> f64 {
        self.smooth + self.time + self.regularity + self.length + self.safety + self.continuity + self.bounds
    }
}

/// Weighted cost of `tr` and its gradient with respect to all spline
/// parameters. `lower`/`upper` are the joint limits.
pub fn objective_full(
    tr: &SplineTrajectory,
    field: &dyn DistanceField,
    params: &TrajParams,
    lower: &[f64],
    upper: &[f64],
) -> Result<(CostTerms, FullGradient)> {
    let n = tr.dof();
    Error::check_dim(field.dof(), n)?;
    let w = &params.weights;
    let segs = tr.segments();
    let mut g = FullGradient::zeros(tr);
    let mut c = CostTerms::default();

    for i in 0..segs {
        let t = tr.t[i];
        let (a, b) = (&tr.m[i], &tr.m[i + 1]);
        if w.smooth != 0.0 {
            let tr2 = weighted_trace(&SMOOTHNESS_WEIGHT, a, b);
            c.smooth += w.smooth * t / 3.0 * tr2;
            g.t[i] += w.smooth * tr2 / 3.0;
            for j in 0..n {
                g.m[i][j] += w.smooth * t / 3.0 * (2.0 * a[j] + b[j]);
                g.m[i + 1][j] += w.smooth * t / 3.0 * (a[j] + 2.0 * b[j]);
            }
        }
        c.time += w.time * t;
        g.t[i] += w.time;
        if i > 0 && w.regularity != 0.0 {
            let d = t - tr.t[i - 1];
            c.regularity += w.regularity * d * d;
            g.t[i] += 2.0 * w.regularity * d;
            g.t[i - 1] -= 2.0 * w.regularity * d;
        }
        if w.length != 0.0 {
            let len = super::dist(&tr.q[i + 1], &tr.q[i]);
            c.length += w.length * len;
            if len > 0.0 {
                for j in 0..n {
                    let d = w.length * (tr.q[i + 1][j] - tr.q[i][j]) / len;
                    g.q[i + 1][j] += d;
                    g.q[i][j] -= d;
                }
            }
        }
    }

    if w.continuity != 0.0 {
        for i in 1..segs {
            let r = tr.right_velocity(i - 1);
            let l = tr.left_velocity(i);
            for j in 0..n {
                let jump = r[j] - l[j];
                c.continuity += w.continuity * jump * jump;
                let k = 2.0 * w.continuity * jump;
                add_velocity_grad(tr, &mut g, Side::Right, i - 1, j, k);
                add_velocity_grad(tr, &mut g, Side::Left, i, j, -k);
            }
        }
    }

    if w.bounds != 0.0 {
        for (i, q) in tr.q.iter().enumerate() {
            for j in 0..n {
                let (v, d) = box_hinge(q[j], lower[j], upper[j], w.bounds);
                c.bounds += v;
                g.q[i][j] += d;
            }
        }
        for (i, m) in tr.m.iter().enumerate() {
            for j in 0..n {
                let (v, d) = box_hinge(m[j], -params.acc_limit, params.acc_limit, w.bounds);
                c.bounds += v;
                g.m[i][j] += d;
            }
        }
        for i in 0..segs {
            let vl = tr.left_velocity(i);
            for j in 0..n {
                let (v, d) = box_hinge(vl[j], -params.vel_limit, params.vel_limit, w.bounds);
                c.bounds += v;
                if d != 0.0 {
                    add_velocity_grad(tr, &mut g, Side::Left, i, j, d);
                }
            }
        }
    }

    if w.safety != 0.0 {
        let by_length = params.safety_weighting == SafetyWeighting::ArcLength;
        let chords: Vec<f64> = (0..segs).map(|i| super::dist(&tr.q[i + 1], &tr.q[i])).collect();
        let extra: Vec<usize> = chords
            .iter()
            .map(|c| {
                let fill = if by_length { (c / params.sample_spacing).ceil() as usize } else { 0 };
                params.samples_per_segment.max(fill.saturating_sub(1))
            })
            .collect();
        let mut samples = safety_samples(&extra);
        if by_length {
            // the goal knot closes the last segment and carries no length
            samples.pop();
        }
        let evals: Vec<Result<(f64, Vec<f64>)>> = samples
            .par_iter()
            .map(|&(i, s)| {
                let x = tr.segment_position(i, s);
                let fv = field.distance(&x, params.field_time)?;
                if !fv.value.is_finite() || fv.grad.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Optimization("distance field returned a non-finite value".into()));
                }
                Ok((fv.value, fv.grad))
            })
            .collect();
        let share: Vec<f64> = extra.iter().map(|e| 1.0 / (e + 1) as f64).collect();
        let mut seg_penalty = vec![0.0; segs];
        for (&(i, s), e) in samples.iter().zip(evals) {
            let (phi, grad) = e?;
            let (p, dp) = params.penalty.eval(phi);
            let weight = if by_length { chords[i] * share[i] } else { 1.0 };
            c.safety += w.safety * weight * p;
            seg_penalty[i] += p;
            let t = tr.t[i];
            let (c0, c1) = accel_shape(s);
            let k = t * t / 6.0;
            for j in 0..n {
                let gx = w.safety * weight * dp * grad[j];
                if gx == 0.0 {
                    continue;
                }
                g.q[i][j] += (1.0 - s) * gx;
                g.q[i + 1][j] += s * gx;
                g.m[i][j] += k * c0 * gx;
                g.m[i + 1][j] += k * c1 * gx;
                g.t[i] += gx * t / 3.0 * (tr.m[i][j] * c0 + tr.m[i + 1][j] * c1);
            }
        }
        if by_length {
            for i in 0..segs {
                if chords[i] > 0.0 {
                    let k = w.safety * share[i] * seg_penalty[i] / chords[i];
                    for j in 0..n {
                        let d = k * (tr.q[i + 1][j] - tr.q[i][j]);
                        g.q[i + 1][j] += d;
                        g.q[i][j] -= d;
                    }
                }
            }
        }
    }
    Ok((c, g))
}

/// Decision-vector view of a trajectory with fixed end positions and
/// boundary velocities: interior positions, interior accelerations, then
/// log-durations.
#[derive(Debug, Clone)]
pub struct Layout {
    base: SplineTrajectory,
}

impl Layout {
    pub fn new(base: &SplineTrajectory) -> Result<Self> {
        base.validate()?;
        Ok(Layout { base: base.clone() })
    }

    pub fn len(&self) -> usize {
        let n = self.base.dof();
        let segs = self.base.segments();
        2 * n * (segs - 1) + segs
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pack(&self, tr: &SplineTrajectory) -> Vec<f64> {
        let segs = tr.segments();
        let mut x = Vec::with_capacity(self.len());
        for q in &tr.q[1..segs] {
            x.extend_from_slice(q);
        }
        for m in &tr.m[1..segs] {
            x.extend_from_slice(m);
        }
        x.extend(tr.t.iter().map(|t| t.ln()));
        x
    }

    pub fn unpack(&self, x: &[f64]) -> SplineTrajectory {
        let n = self.base.dof();
        let segs = self.base.segments();
        let mut tr = self.base.clone();
        let inner = n * (segs - 1);
        for i in 1..segs {
            tr.q[i].copy_from_slice(&x[(i - 1) * n..i * n]);
            tr.m[i].copy_from_slice(&x[inner + (i - 1) * n..inner + i * n]);
        }
        for i in 0..segs {
            tr.t[i] = x[2 * inner + i].exp();
        }
        tr.apply_boundary_velocities();
        tr
    }

    /// Chains a full gradient through the end-acceleration elimination and
    /// the log-duration reparameterization.
    pub fn reduce(&self, tr: &SplineTrajectory, mut g: FullGradient) -> Vec<f64> {
        let n = tr.dof();
        let segs = tr.segments();
        let last = segs;
        if segs == 1 {
            let t = tr.t[0];
            for j in 0..n {
                let d = (tr.q[1][j] - tr.q[0][j]) / t;
                g.t[0] += g.m[0][j] * (-6.0 * d / (t * t) - tr.m[0][j] / t);
                g.t[0] += g.m[1][j] * (6.0 * d / (t * t) - tr.m[1][j] / t);
            }
        } else {
            let t0 = tr.t[0];
            let tn = tr.t[segs - 1];
            for j in 0..n {
                let g0 = g.m[0][j];
                g.q[1][j] += 3.0 * g0 / (t0 * t0);
                g.m[1][j] -= 0.5 * g0;
                g.t[0] += g0 * (-6.0 * (tr.q[1][j] - tr.q[0][j]) / (t0 * t0 * t0) + 3.0 * tr.v_start[j] / (t0 * t0));
                let gn = g.m[last][j];
                g.q[last - 1][j] += 3.0 * gn / (tn * tn);
                g.m[last - 1][j] -= 0.5 * gn;
                g.t[segs - 1] +=
                    gn * (-3.0 * tr.v_end[j] / (tn * tn) + 6.0 * (tr.q[last][j] - tr.q[last - 1][j]) / (tn * tn * tn));
            }
        }
        let mut x = Vec::with_capacity(self.len());
        for q in &g.q[1..segs] {
            x.extend_from_slice(q);
        }
        for m in &g.m[1..segs] {
            x.extend_from_slice(m);
        }
        x.extend(g.t.iter().zip(&tr.t).map(|(gt, t)| gt * t));
        x
    }
}

/// Cost and gradient with respect to the decision vector `x` of `layout`.
pub fn objective(
    layout: &Layout,
    x: &[f64],
    field: &dyn DistanceField,
    params: &TrajParams,
    lower: &[f64],
    upper: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let tr = layout.unpack(x);
    let (c, g) = objective_full(&tr, field, params, lower, upper)?;
    Ok((c.total(), layout.reduce(&tr, g)))
}
