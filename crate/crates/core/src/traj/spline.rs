//! Piecewise-cubic joint trajectories parameterized by knot positions, knot
//! accelerations and segment durations.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SplineTrajectory {
    /// Knot positions q_0..q_N.
    pub q: Vec<Vec<f64>>,
    /// Knot accelerations m_0..m_N.
    pub m: Vec<Vec<f64>>,
    /// Segment durations T_0..T_{N-1}, strictly positive.
    pub t: Vec<f64>,
    pub v_start: Vec<f64>,
    pub v_end: Vec<f64>,
}

/// Shape weights of the acceleration terms at normalized time `s`.
#[inline]
pub(crate) fn accel_shape(s: f64) -> (f64, f64) {
    let r = 1.0 - s;
    (r * r * r - r, s * s * s - s)
}

impl SplineTrajectory {
    pub fn new(q: Vec<Vec<f64>>, m: Vec<Vec<f64>>, t: Vec<f64>, v_start: Vec<f64>, v_end: Vec<f64>) -> Result<Self> {
        let tr = SplineTrajectory { q, m, t, v_start, v_end };
        tr.validate()?;
        Ok(tr)
    }

    /// Knots joined with zero boundary velocity; interior accelerations zero
    /// and the end accelerations chosen to honour the boundary velocities.
    pub fn from_waypoints(q: Vec<Vec<f64>>, t: Vec<f64>) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::invalid("need at least two knots"));
        }
        let n = q[0].len();
        let m = vec![vec![0.0; n]; q.len()];
        let mut tr = SplineTrajectory {
            q,
            m,
            t,
            v_start: vec![0.0; n],
            v_end: vec![0.0; n],
        };
        tr.validate()?;
        tr.apply_boundary_velocities();
        Ok(tr)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.q.len();
        if k < 2 {
            return Err(Error::invalid("need at least two knots"));
        }
        let n = self.q[0].len();
        if n == 0 {
            return Err(Error::invalid("empty configuration"));
        }
        if self.m.len() != k || self.t.len() != k - 1 {
            return Err(Error::invalid(format!(
                "{k} knots need {k} accelerations and {} durations",
                k - 1
            )));
        }
        for v in self.q.iter().chain(&self.m).chain([&self.v_start, &self.v_end]) {
            Error::check_dim(n, v.len())?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("non-finite trajectory entry"));
            }
        }
        if self.t.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
            return Err(Error::invalid("segment durations must be positive and finite"));
        }
        Ok(())
    }

    pub fn dof(&self) -> usize {
        self.q[0].len()
    }

    pub fn segments(&self) -> usize {
        self.t.len()
    }

    pub fn duration(&self) -> f64 {
        self.t.iter().sum()
    }

    /// Velocity at the start of segment `i`.
    pub fn left_velocity(&self, i: usize) -> Vec<f64> {
        let t = self.t[i];
        (0..self.dof())
            .map(|j| (self.q[i + 1][j] - self.q[i][j]) / t - t * self.m[i][j] / 3.0 - t * self.m[i + 1][j] / 6.0)
            .collect()
    }

    /// Velocity at the end of segment `i`.
    pub fn right_velocity(&self, i: usize) -> Vec<f64> {
        let t = self.t[i];
        (0..self.dof())
            .map(|j| (self.q[i + 1][j] - self.q[i][j]) / t + t * self.m[i][j] / 6.0 + t * self.m[i + 1][j] / 3.0)
            .collect()
    }

    /// Recomputes m_0 and m_N so that the start and end velocities equal
    /// `v_start` and `v_end`, keeping the interior accelerations.
    pub fn apply_boundary_velocities(&mut self) {
        let (m0, mn) = boundary_accels(self);
        let last = self.m.len() - 1;
        self.m[0] = m0;
        self.m[last] = mn;
    }

    /// Segment containing time `t` and the normalized local time.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let total = self.duration();
        if !(t >= 0.0 && t <= total) {
            return Err(Error::Range { value: t, lo: 0.0, hi: total });
        }
        let mut start = 0.0;
        for (i, d) in self.t.iter().enumerate() {
            if t <= start + d || i + 1 == self.t.len() {
                return Ok((i, ((t - start) / d).clamp(0.0, 1.0)));
            }
            start += d;
        }
        unreachable!()
    }

    /// Position at normalized time `s` of segment `i`.
    pub fn segment_position(&self, i: usize, s: f64) -> Vec<f64> {
        let t = self.t[i];
        let (c0, c1) = accel_shape(s);
        let k = t * t / 6.0;
        (0..self.dof())
            .map(|j| (1.0 - s) * self.q[i][j] + s * self.q[i + 1][j] + k * (self.m[i][j] * c0 + self.m[i + 1][j] * c1))
            .collect()
    }

    /// Position, velocity and acceleration at time `t`.
    pub fn eval(&self, t: f64) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let (i, s) = self.locate(t)?;
        let d = self.t[i];
        let q = self.segment_position(i, s);
        let r = 1.0 - s;
        let n = self.dof();
        let mut qd = Vec::with_capacity(n);
        let mut qdd = Vec::with_capacity(n);
        for j in 0..n {
            let (a, b) = (self.m[i][j], self.m[i + 1][j]);
            qd.push(
                (self.q[i + 1][j] - self.q[i][j]) / d + d / 6.0 * (a * (1.0 - 3.0 * r * r) + b * (3.0 * s * s - 1.0)),
            );
            qdd.push(a * r + b * s);
        }
        Ok((q, qd, qdd))
    }

    /// `count` states evenly spaced in time over the whole trajectory.
    pub fn resample(&self, count: usize) -> Vec<Vec<f64>> {
        let total = self.duration();
        let count = count.max(2);
        (0..count)
            .map(|k| {
                let t = total * k as f64 / (count - 1) as f64;
                self.eval(t.min(total)).expect("time in range").0
            })
            .collect()
    }

    /// Writes `t, q_*, qd_*, qdd_*` rows every `dt` seconds (end included).
    pub fn write_csv(&self, mut w: impl std::io::Write, dt: f64) -> Result<()> {
        if !(dt > 0.0) {
            return Err(Error::invalid("sampling period must be positive"));
        }
        let n = self.dof();
        let mut header = vec!["t".to_string()];
        for p in ["q", "qd", "qdd"] {
            header.extend((1..=n).map(|j| format!("{p}_{j}")));
        }
        writeln!(w, "{}", header.join(","))?;
        let total = self.duration();
        let steps = (total / dt).ceil() as usize;
        for k in 0..=steps {
            let t = (k as f64 * dt).min(total);
            let (q, qd, qdd) = self.eval(t)?;
            let row: Vec<String> = std::iter::once(t)
                .chain(q)
                .chain(qd)
                .chain(qdd)
                .map(|x| format!("{x}"))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// End accelerations m_0, m_N implied by the boundary velocities.
pub(crate) fn boundary_accels(tr: &SplineTrajectory) -> (Vec<f64>, Vec<f64>) {
    let n = tr.dof();
    let last = tr.q.len() - 1;
    if tr.segments() == 1 {
        let t = tr.t[0];
        let mut m0 = vec![0.0; n];
        let mut m1 = vec![0.0; n];
        for j in 0..n {
            let d = (tr.q[1][j] - tr.q[0][j]) / t;
            m0[j] = (-4.0 * tr.v_start[j] - 2.0 * tr.v_end[j] + 6.0 * d) / t;
            m1[j] = (2.0 * tr.v_start[j] + 4.0 * tr.v_end[j] - 6.0 * d) / t;
        }
        return (m0, m1);
    }
    let t0 = tr.t[0];
    let tn = tr.t[last - 1];
    let m0 = (0..n)
        .map(|j| 3.0 * (tr.q[1][j] - tr.q[0][j]) / (t0 * t0) - 3.0 * tr.v_start[j] / t0 - 0.5 * tr.m[1][j])
        .collect();
    let mn = (0..n)
        .map(|j| {
            3.0 * tr.v_end[j] / tn - 3.0 * (tr.q[last][j] - tr.q[last - 1][j]) / (tn * tn) - 0.5 * tr.m[last - 1][j]
        })
        .collect();
    (m0, mn)
}

/// Trace of `m_jᵀ K m_j` where the rows of `m_j` are `a` and `b` and `K` is
/// the 2x2 weight matrix.
pub fn weighted_trace(k: &[[f64; 2]; 2], a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| k[0][0] * x * x + (k[0][1] + k[1][0]) * x * y + k[1][1] * y * y)
        .sum()
}

/// Upper-triangular smoothness weight.
pub const SMOOTHNESS_WEIGHT: [[f64; 2]; 2] = [[1.0, 1.0], [0.0, 1.0]];
