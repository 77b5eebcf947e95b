//! Convex QP `min ½xᵀPx + qᵀx  s.t.  l ≤ Cx ≤ u` solved by operator
//! splitting (ADMM) with adaptive step, solution polishing and primal
//! infeasibility detection. Includes an exhaustive active-set solver for tiny
//! instances.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct QpInstance {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub c: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
}

impl QpInstance {
    pub fn new(p: DMatrix<f64>, q: DVector<f64>, c: DMatrix<f64>, l: DVector<f64>, u: DVector<f64>) -> Result<Self> {
        let n = q.len();
        let m = l.len();
        if p.shape() != (n, n) || c.shape() != (m, n) || u.len() != m {
            return Err(Error::invalid(format!(
                "inconsistent QP shapes: P {:?}, q {}, C {:?}, l {}, u {}",
                p.shape(),
                n,
                c.shape(),
                m,
                u.len()
            )));
        }
        if (0..m).any(|i| l[i] > u[i] || l[i].is_nan() || u[i].is_nan()) {
            return Err(Error::invalid("QP bounds need l <= u"));
        }
        if p.iter().chain(q.iter()).chain(c.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite QP data"));
        }
        let asym = (&p - p.transpose()).abs().max();
        if asym > 1e-9 * p.abs().max().max(1.0) {
            return Err(Error::invalid("QP cost matrix must be symmetric"));
        }
        Ok(QpInstance { p, q, c, l, u })
    }

    pub fn vars(&self) -> usize {
        self.q.len()
    }

    pub fn rows(&self) -> usize {
        self.l.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }

    /// Primal, dual and complementarity residuals (infinity norms) of a
    /// primal-dual pair. Multipliers are negative on active lower bounds and
    /// positive on active upper bounds.
    pub fn residuals(&self, x: &DVector<f64>, y: &DVector<f64>) -> Residuals {
        let cx = &self.c * x;
        let mut primal = 0.0f64;
        let mut compl = 0.0f64;
        for i in 0..self.rows() {
            primal = primal.max(self.l[i] - cx[i]).max(cx[i] - self.u[i]);
            let yp = y[i].max(0.0);
            let ym = (-y[i]).max(0.0);
            compl = compl.max(yp.min(self.u[i] - cx[i]).abs()).max(ym.min(cx[i] - self.l[i]).abs());
        }
        let dual = (&self.p * x + &self.q + self.c.transpose() * y).amax();
        Residuals {
            primal,
            dual,
            complementarity: compl,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Residuals {
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.complementarity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    MaxIter,
    Infeasible,
}

impl std::fmt::Display for QpStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QpStatus::Solved => "solved",
            QpStatus::MaxIter => "max_iter",
            QpStatus::Infeasible => "infeasible",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QpSettings {
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub max_iter: usize,
    /// ADMM stopping tolerances (absolute and relative).
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_infeasible: f64,
    /// Residual bound required to report `Solved`.
    pub kkt_tol: f64,
    pub adaptive_rho: bool,
    pub polish: bool,
    pub check_every: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            max_iter: 4000,
            eps_abs: 1e-7,
            eps_rel: 1e-7,
            eps_infeasible: 1e-7,
            kkt_tol: 1e-6,
            adaptive_rho: true,
            polish: true,
            check_every: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub residuals: Residuals,
    pub polished: bool,
}

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_SCALE: f64 = 1e3;

fn row_rhos(inst: &QpInstance, rho: f64) -> DVector<f64> {
    DVector::from_iterator(
        inst.rows(),
        (0..inst.rows()).map(|i| {
            let (l, u) = (inst.l[i], inst.u[i]);
            if l == u {
                rho * RHO_EQ_SCALE
            } else if l == f64::NEG_INFINITY && u == f64::INFINITY {
                RHO_MIN
            } else {
                rho
            }
        }),
    )
}

fn factor(inst: &QpInstance, sigma: f64, rhos: &DVector<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let n = inst.vars();
    let mut k = &inst.p + DMatrix::<f64>::identity(n, n) * sigma;
    let scaled = DMatrix::from_fn(inst.rows(), n, |i, j| inst.c[(i, j)] * rhos[i]);
    k += inst.c.transpose() * scaled;
    nalgebra::Cholesky::new(k).ok_or_else(|| Error::Optimization("ADMM system is not positive definite".into()))
}

fn project(v: &DVector<f64>, inst: &QpInstance) -> DVector<f64> {
    DVector::from_iterator(v.len(), (0..v.len()).map(|i| v[i].clamp(inst.l[i], inst.u[i])))
}

/// Solves the equality-constrained KKT system for the given active rows.
/// `active[i]` is `Some(bound)` for rows held at `bound`.
fn solve_kkt(inst: &QpInstance, active: &[Option<f64>]) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = inst.vars();
    let rows: Vec<usize> = (0..inst.rows()).filter(|i| active[*i].is_some()).collect();
    let k = rows.len();
    let mut kkt = DMatrix::<f64>::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&inst.p);
    let mut rhs = DVector::<f64>::zeros(n + k);
    for j in 0..n {
        rhs[j] = -inst.q[j];
    }
    for (r, &i) in rows.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = inst.c[(i, j)];
            kkt[(j, n + r)] = inst.c[(i, j)];
        }
        rhs[n + r] = active[i].unwrap();
    }
    let lu = kkt.clone().full_piv_lu();
    let mut sol = lu.solve(&rhs)?;
    // one refinement step against the exact system
    let err = &rhs - &kkt * &sol;
    if let Some(d) = lu.solve(&err) {
        sol += d;
    }
    if sol.iter().any(|v| !v.is_finite()) || (&kkt * &sol - &rhs).amax() > 1e-8 * (1.0 + rhs.amax()) {
        return None;
    }
    let x = sol.rows(0, n).into_owned();
    let mut y = DVector::<f64>::zeros(inst.rows());
    for (r, &i) in rows.iter().enumerate() {
        y[i] = sol[n + r];
    }
    Some((x, y))
}

fn polish(inst: &QpInstance, z: &DVector<f64>, y: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    let active: Vec<Option<f64>> = (0..inst.rows())
        .map(|i| {
            if inst.l[i] == inst.u[i] {
                Some(inst.l[i])
            } else if z[i] - inst.l[i] < -y[i] {
                Some(inst.l[i])
            } else if inst.u[i] - z[i] < y[i] {
                Some(inst.u[i])
            } else {
                None
            }
        })
        .collect();
    solve_kkt(inst, &active)
}

fn primal_infeasible(inst: &QpInstance, dy: &DVector<f64>, eps: f64) -> bool {
    let norm = dy.amax();
    if norm < 1e-30 {
        return false;
    }
    if (inst.c.transpose() * dy).amax() > eps * norm {
        return false;
    }
    let mut support = 0.0;
    for i in 0..inst.rows() {
        let d = dy[i] / norm;
        if d > eps {
            if inst.u[i] == f64::INFINITY {
                return false;
            }
            support += inst.u[i] * d;
        } else if d < -eps {
            if inst.l[i] == f64::NEG_INFINITY {
                return false;
            }
            support += inst.l[i] * d;
        }
    }
    support < -eps
}

/// ADMM with optional warm start `(x, y)`.
pub fn solve(inst: &QpInstance, s: &QpSettings, warm: Option<(&DVector<f64>, &DVector<f64>)>) -> Result<QpSolution> {
    let n = inst.vars();
    let m = inst.rows();
    if !(s.rho > 0.0) || !(s.sigma > 0.0) || !(s.alpha > 0.0 && s.alpha < 2.0) {
        return Err(Error::invalid("ADMM needs rho > 0, sigma > 0 and alpha in (0, 2)"));
    }
    let mut rho = s.rho;
    let mut last_up: Option<bool> = None;
    let mut rhos = row_rhos(inst, rho);
    let mut chol = factor(inst, s.sigma, &rhos)?;
    let (mut x, mut y) = match warm {
        Some((x0, y0)) if x0.len() == n && y0.len() == m => (x0.clone(), y0.clone()),
        _ => (DVector::zeros(n), DVector::zeros(m)),
    };
    let mut z = project(&(&inst.c * &x), inst);
    let ct = inst.c.transpose();
    let mut best: Option<(DVector<f64>, DVector<f64>, Residuals, bool)> = None;
    let finish = |x: DVector<f64>, y: DVector<f64>, status, iterations, residuals, polished| QpSolution {
        x,
        y,
        status,
        iterations,
        residuals,
        polished,
    };
    for it in 1..=s.max_iter {
        let rz = DVector::from_iterator(m, (0..m).map(|i| rhos[i] * z[i] - y[i]));
        let rhs = &x * s.sigma - &inst.q + &ct * rz;
        let xt = chol.solve(&rhs);
        let zt = &inst.c * &xt;
        let x_new = &xt * s.alpha + &x * (1.0 - s.alpha);
        let zr = &zt * s.alpha + &z * (1.0 - s.alpha);
        let z_new = project(&DVector::from_iterator(m, (0..m).map(|i| zr[i] + y[i] / rhos[i])), inst);
        let y_new = DVector::from_iterator(m, (0..m).map(|i| y[i] + rhos[i] * (zr[i] - z_new[i])));
        let dy = &y_new - &y;
        x = x_new;
        z = z_new;
        y = y_new;

        if it % s.check_every != 0 && it != s.max_iter {
            continue;
        }
        let cx = &inst.c * &x;
        let px = &inst.p * &x;
        let cty = &ct * &y;
        let r_p = (&cx - &z).amax();
        let r_d = (&px + &inst.q + &cty).amax();
        let prim_scale = cx.amax().max(z.amax());
        let dual_scale = px.amax().max(cty.amax()).max(inst.q.amax());
        let converged = r_p <= s.eps_abs + s.eps_rel * prim_scale && r_d <= s.eps_abs + s.eps_rel * dual_scale;
        let loose = r_p <= 1e3 * s.eps_abs + s.eps_rel * prim_scale && r_d <= 1e3 * s.eps_abs + s.eps_rel * dual_scale;

        if s.polish && loose {
            if let Some((xp, yp)) = polish(inst, &z, &y) {
                let res = inst.residuals(&xp, &yp);
                if res.max() <= s.kkt_tol {
                    return Ok(finish(xp, yp, QpStatus::Solved, it, res, true));
                }
            }
        }
        if converged {
            let res = inst.residuals(&x, &y);
            if res.max() <= s.kkt_tol {
                return Ok(finish(x, y, QpStatus::Solved, it, res, false));
            }
            if best.as_ref().is_none_or(|b| res.max() < b.2.max()) {
                best = Some((x.clone(), y.clone(), res, false));
            }
        }
        if primal_infeasible(inst, &dy, s.eps_infeasible) {
            let res = inst.residuals(&x, &y);
            return Ok(finish(x, y, QpStatus::Infeasible, it, res, false));
        }
        if s.adaptive_rho && it % (s.check_every * 5) == 0 {
            let ratio = ((r_p / prim_scale.max(1e-30)) / (r_d / dual_scale.max(1e-30)).max(1e-30)).sqrt();
            let mut new_rho = (rho * ratio).clamp(RHO_MIN, RHO_MAX);
            if new_rho > 5.0 * rho || new_rho < 0.2 * rho {
                // a reversal halves the step in log space, otherwise rho can
                // cycle between two values without converging
                let up = new_rho > rho;
                if last_up.is_some_and(|u| u != up) {
                    new_rho = (rho * new_rho).sqrt();
                }
                last_up = Some(up);
                rho = new_rho;
                rhos = row_rhos(inst, rho);
                chol = factor(inst, s.sigma, &rhos)?;
            }
        }
    }
    let (x, y, res, polished) = match best {
        Some(b) => b,
        None => {
            let res = inst.residuals(&x, &y);
            (x, y, res, false)
        }
    };
    Ok(finish(x, y, QpStatus::MaxIter, s.max_iter, res, polished))
}

/// Exact solution by enumerating every active set (3^m assignments). Only
/// for tiny instances with positive definite `P`; returns `None` when no
/// assignment satisfies the KKT conditions (infeasible instance). Sets with
/// linearly dependent rows are skipped.
pub fn solve_active_set(inst: &QpInstance) -> Result<Option<(DVector<f64>, DVector<f64>)>> {
    let m = inst.rows();
    if m > 12 {
        return Err(Error::invalid("active-set enumeration is limited to 12 rows"));
    }
    let tol = 1e-9;
    let mut best: Option<(f64, DVector<f64>, DVector<f64>)> = None;
    let total = 3usize.pow(m as u32);
    'outer: for code in 0..total {
        let mut c = code;
        let mut active = Vec::with_capacity(m);
        for i in 0..m {
            let choice = c % 3;
            c /= 3;
            let a = match choice {
                0 => None,
                1 => Some(inst.l[i]),
                _ => Some(inst.u[i]),
            };
            // an equality row may be left out of the active set: when rows
            // are dependent, some optimal KKT point uses an independent subset
            if inst.l[i] == inst.u[i] && choice == 2 {
                continue 'outer;
            }
            if a.is_some_and(|b| !b.is_finite()) {
                continue 'outer;
            }
            active.push((choice, a));
        }
        let bounds: Vec<Option<f64>> = active.iter().map(|a| a.1).collect();
        let Some((x, y)) = solve_kkt(inst, &bounds) else {
            continue;
        };
        let cx = &inst.c * &x;
        let scale = 1.0 + cx.amax();
        for i in 0..m {
            if cx[i] < inst.l[i] - tol * scale || cx[i] > inst.u[i] + tol * scale {
                continue 'outer;
            }
            let eq = inst.l[i] == inst.u[i];
            match active[i].0 {
                1 if !eq && y[i] > tol => continue 'outer,
                2 if y[i] < -tol => continue 'outer,
                _ => {}
            }
        }
        let f = inst.objective(&x);
        if best.as_ref().is_none_or(|b| f < b.0) {
            best = Some((f, x, y));
        }
    }
    Ok(best.map(|b| (b.1, b.2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_d(upper: f64) -> QpInstance {
        QpInstance::new(
            DMatrix::from_element(1, 1, 2.0),
            DVector::from_element(1, -2.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, f64::NEG_INFINITY),
            DVector::from_element(1, upper),
        )
        .unwrap()
    }

    #[test]
    fn unconstrained_scalar() {
        let s = solve(&one_d(f64::INFINITY), &QpSettings::default(), None).unwrap();
        assert_eq!(s.status, QpStatus::Solved);
        assert!((s.x[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn box_clipped_scalar() {
        let s = solve(&one_d(0.5), &QpSettings::default(), None).unwrap();
        assert_eq!(s.status, QpStatus::Solved);
        assert!((s.x[0] - 0.5).abs() < 1e-9);
        assert!((s.y[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn infeasible_rows_are_detected() {
        let inst = QpInstance::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
            DVector::from_vec(vec![1.0, f64::NEG_INFINITY]),
            DVector::from_vec(vec![f64::INFINITY, 0.0]),
        )
        .unwrap();
        let s = solve(&inst, &QpSettings::default(), None).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
        assert!(solve_active_set(&inst).unwrap().is_none());
    }

    #[test]
    fn bad_shapes_are_rejected() {
        assert!(QpInstance::new(
            DMatrix::identity(2, 2),
            DVector::zeros(3),
            DMatrix::zeros(1, 2),
            DVector::zeros(1),
            DVector::zeros(1)
        )
        .is_err());
        assert!(QpInstance::new(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::identity(1, 1),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 0.0)
        )
        .is_err());
    }

    pub(crate) fn random_instance(rng: &mut ChaCha8Rng) -> QpInstance {
        let n = rng.gen_range(1..=6);
        let m = rng.gen_range(1..=6);
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let p = &a * a.transpose() + DMatrix::identity(n, n) * 0.1;
        let q = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
        let c = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
        let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let cx = &c * &x0;
        let mut l = DVector::zeros(m);
        let mut u = DVector::zeros(m);
        for i in 0..m {
            match rng.gen_range(0..5) {
                0 => {
                    l[i] = cx[i];
                    u[i] = cx[i];
                }
                1 => {
                    l[i] = f64::NEG_INFINITY;
                    u[i] = cx[i] + rng.gen_range(0.0..0.5);
                }
                2 => {
                    l[i] = cx[i] - rng.gen_range(0.0..0.5);
                    u[i] = f64::INFINITY;
                }
                _ => {
                    l[i] = cx[i] - rng.gen_range(0.0..0.5);
                    u[i] = cx[i] + rng.gen_range(0.0..0.5);
                }
            }
        }
        QpInstance::new(p, q, c, l, u).unwrap()
    }

    #[test]
    fn admm_matches_active_set_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in 0..100 {
            let inst = random_instance(&mut rng);
            let s = solve(&inst, &QpSettings::default(), None).unwrap();
            assert_eq!(s.status, QpStatus::Solved, "instance {k}: {:?}", s.residuals);
            let (xo, _) = solve_active_set(&inst).unwrap().expect("feasible by construction");
            assert!((&s.x - &xo).amax() <= 1e-6, "instance {k}: {} vs {}", s.x, xo);
            assert!(s.residuals.max() <= 1e-6);
        }
    }

    #[test]
    fn solver_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inst = random_instance(&mut rng);
        let a = solve(&inst, &QpSettings::default(), None).unwrap();
        let b = solve(&inst, &QpSettings::default(), None).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.iterations, b.iterations);
    }
}
