//! Discretized configuration-space signed distance fields.
//!
//! Cells are classified at their centres; a safe cell stores the Euclidean
//! distance (rad) to the nearest colliding cell centre and a colliding cell
//! stores minus the distance to the nearest safe cell centre, both reduced by
//! half the smallest cell size since the boundary lies between centres. Distances come
//! from a separable exact Euclidean distance transform (lower envelope of
//! parabolas, one pass per axis) that also tracks the winning cell.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::scene::Scene;
use crate::geometry::spheres_self_collide;
use crate::robot::{lift, RobotModel};

const GRID_MAGIC: &[u8; 4] = b"CSG1";

/// Grid resolution and extent over the joint box.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub counts: Vec<usize>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl GridSpec {
    pub fn new(counts: Vec<usize>, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if counts.is_empty() || counts.len() != lower.len() || counts.len() != upper.len() {
            return Err(Error::invalid("grid counts and bounds must have the same non-zero length"));
        }
        for a in 0..counts.len() {
            if counts[a] < 2 || !(lower[a] < upper[a]) {
                return Err(Error::invalid(format!("grid axis {a}: need >= 2 cells and lower < upper")));
            }
        }
        Ok(GridSpec { counts, lower, upper })
    }

    /// `cells` per joint over the robot's joint-limit box.
    pub fn over_limits(model: &RobotModel, cells: usize) -> Self {
        GridSpec::new(vec![cells; model.dof()], model.lower_limits(), model.upper_limits())
            .expect("joint limits are ordered")
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_size(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / self.counts[axis] as f64
    }

    pub fn max_cell_size(&self) -> f64 {
        (0..self.dim()).map(|a| self.cell_size(a)).fold(0.0, f64::max)
    }

    /// Diameter of the configuration box.
    pub fn diameter(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| (u - l).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.dim()];
        for a in (0..self.dim().saturating_sub(1)).rev() {
            s[a] = s[a + 1] * self.counts[a + 1];
        }
        s
    }

    /// Row-major flat index (last axis fastest).
    pub fn flat(&self, idx: &[usize]) -> usize {
        idx.iter().zip(self.strides()).map(|(i, s)| i * s).sum()
    }

    pub fn unflat(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for a in (0..self.dim()).rev() {
            idx[a] = flat % self.counts[a];
            flat /= self.counts[a];
        }
        idx
    }

    pub fn center(&self, flat: usize) -> Vec<f64> {
        self.unflat(flat)
            .iter()
            .enumerate()
            .map(|(a, &i)| self.lower[a] + (i as f64 + 0.5) * self.cell_size(a))
            .collect()
    }

    /// Cell containing `q` (clamped to the grid).
    pub fn locate(&self, q: &[f64]) -> Vec<usize> {
        (0..self.dim())
            .map(|a| {
                let t = ((q[a] - self.lower[a]) / self.cell_size(a)).floor();
                (t.max(0.0) as usize).min(self.counts[a] - 1)
            })
            .collect()
    }
}

/// A signed C-space distance grid.
#[derive(Debug, Clone)]
pub struct CSpaceGrid {
    pub spec: GridSpec,
    pub values: Vec<f64>,
    /// Flat index of the nearest opposite-class cell (`usize::MAX` if none).
    pub nearest: Vec<usize>,
    /// True when every cell had the same class.
    pub degenerate: bool,
}

impl CSpaceGrid {
    /// Builds the signed field from a per-cell collision classification.
    pub fn from_classes(spec: GridSpec, colliding: &[bool]) -> Self {
        assert_eq!(colliding.len(), spec.len());
        let spacing: Vec<f64> = (0..spec.dim()).map(|a| spec.cell_size(a)).collect();
        let (d_to_col, src_col) = edt(&spec.counts, &spacing, colliding);
        let safe: Vec<bool> = colliding.iter().map(|c| !c).collect();
        let (d_to_safe, src_safe) = edt(&spec.counts, &spacing, &safe);
        let diameter = spec.diameter();
        // the boundary lies between cell centres, half a cell from each
        let half = 0.5 * spacing.iter().cloned().fold(f64::INFINITY, f64::min);
        let n_col = colliding.iter().filter(|c| **c).count();
        let degenerate = n_col == 0 || n_col == colliding.len();
        if degenerate {
            log::warn!("C-space grid has a single class ({n_col} colliding of {}); values clamped to the box diameter", colliding.len());
        }
        let mut values = Vec::with_capacity(spec.len());
        let mut nearest = Vec::with_capacity(spec.len());
        for i in 0..spec.len() {
            if colliding[i] {
                values.push(-(d_to_safe[i].sqrt() - half).min(diameter));
                nearest.push(src_safe[i]);
            } else {
                values.push((d_to_col[i].sqrt() - half).min(diameter));
                nearest.push(src_col[i]);
            }
        }
        CSpaceGrid {
            spec,
            values,
            nearest,
            degenerate,
        }
    }

    fn classify(spec: &GridSpec, f: impl Fn(&[f64]) -> bool + Sync) -> Vec<bool> {
        (0..spec.len())
            .into_par_iter()
            .map(|i| f(&spec.center(i)))
            .collect()
    }

    pub fn value(&self, flat: usize) -> f64 {
        self.values[flat]
    }

    /// Multilinear interpolation between cell centres (linear extrapolation
    /// past the outermost centres) and its exact gradient.
    pub fn interpolate(&self, q: &[f64]) -> (f64, Vec<f64>) {
        let n = self.spec.dim();
        let strides = self.spec.strides();
        let mut base = vec![0usize; n];
        let mut frac = vec![0.0; n];
        for a in 0..n {
            let h = self.spec.cell_size(a);
            let t = (q[a] - self.spec.lower[a]) / h - 0.5;
            let i0 = (t.floor().max(0.0) as usize).min(self.spec.counts[a] - 2);
            base[a] = i0;
            frac[a] = t - i0 as f64;
        }
        let mut value = 0.0;
        let mut grad = vec![0.0; n];
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            let mut flat = 0;
            for a in 0..n {
                let hi = (corner >> a) & 1 == 1;
                w *= if hi { frac[a] } else { 1.0 - frac[a] };
                flat += (base[a] + hi as usize) * strides[a];
            }
            let v = self.values[flat];
            value += w * v;
            for (g, a) in grad.iter_mut().zip(0..n) {
                let hi = (corner >> a) & 1 == 1;
                let mut dw = if hi { 1.0 } else { -1.0 };
                for b in 0..n {
                    if b != a {
                        let hib = (corner >> b) & 1 == 1;
                        dw *= if hib { frac[b] } else { 1.0 - frac[b] };
                    }
                }
                *g += dw * v / self.spec.cell_size(a);
            }
        }
        (value, grad)
    }

    /// Central-difference gradient norm at interior cell `flat`.
    pub fn fd_gradient_norm(&self, flat: usize) -> Option<f64> {
        let idx = self.spec.unflat(flat);
        let strides = self.spec.strides();
        let mut s = 0.0;
        for a in 0..self.spec.dim() {
            if idx[a] == 0 || idx[a] + 1 >= self.spec.counts[a] {
                return None;
            }
            let g = (self.values[flat + strides[a]] - self.values[flat - strides[a]]) / (2.0 * self.spec.cell_size(a));
            s += g * g;
        }
        Some(s.sqrt())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(GRID_MAGIC)?;
        w.write_all(&(self.spec.dim() as u32).to_le_bytes())?;
        for &c in &self.spec.counts {
            w.write_all(&(c as u64).to_le_bytes())?;
        }
        for a in 0..self.spec.dim() {
            w.write_all(&self.spec.lower[a].to_le_bytes())?;
            w.write_all(&self.spec.upper[a].to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    /// Reads a grid dump. The nearest-cell table is not stored and comes back
    /// empty.
    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != GRID_MAGIC {
            return Err(Error::Format("not a CSG1 grid dump".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        if dim == 0 || dim > 16 {
            return Err(Error::Format(format!("implausible grid dimension {dim}")));
        }
        let mut counts = Vec::with_capacity(dim);
        for _ in 0..dim {
            r.read_exact(&mut b8)?;
            counts.push(u64::from_le_bytes(b8) as usize);
        }
        let mut lower = Vec::with_capacity(dim);
        let mut upper = Vec::with_capacity(dim);
        for _ in 0..dim {
            r.read_exact(&mut b8)?;
            lower.push(f64::from_le_bytes(b8));
            r.read_exact(&mut b8)?;
            upper.push(f64::from_le_bytes(b8));
        }
        let spec = GridSpec::new(counts, lower, upper)?;
        let mut values = Vec::with_capacity(spec.len());
        for _ in 0..spec.len() {
            r.read_exact(&mut b8)?;
            values.push(f64::from_le_bytes(b8));
        }
        Ok(CSpaceGrid {
            spec,
            values,
            nearest: Vec::new(),
            degenerate: false,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Generalized self-collision distance over `spec`: link-pair collisions and
/// joint limits, with safe cells additionally capped by their distance to the
/// joint-limit boundary.
pub fn oracle_self_distance(model: &RobotModel, spec: &GridSpec) -> Result<CSpaceGrid> {
    Error::check_dim(model.dof(), spec.dim())?;
    let classes = CSpaceGrid::classify(spec, |q| {
        crate::geometry::is_self_collision(model, q).expect("grid dimension checked")
    });
    let mut grid = CSpaceGrid::from_classes(spec.clone(), &classes);
    for i in 0..spec.len() {
        if !classes[i] {
            let lim = model.limit_distance(&spec.center(i));
            if lim < grid.values[i] {
                grid.values[i] = lim;
            }
        }
    }
    Ok(grid)
}

/// Signed C-space distance to the set of configurations whose spheres contain `p`.
pub fn oracle_point_distance(model: &RobotModel, spec: &GridSpec, p: &[f64]) -> Result<CSpaceGrid> {
    Error::check_dim(model.dof(), spec.dim())?;
    let p3 = model.lift_point(p)?;
    let classes = CSpaceGrid::classify(spec, |q| {
        model
            .forward_spheres(q)
            .expect("grid dimension checked")
            .iter()
            .any(|s| s.contains(&p3))
    });
    Ok(CSpaceGrid::from_classes(spec.clone(), &classes))
}

/// Signed distance to the union of self-collision and scene-contact
/// configurations at time `t`.
pub fn oracle_scene_distance(model: &RobotModel, spec: &GridSpec, scene: &Scene, t: f64) -> Result<CSpaceGrid> {
    Error::check_dim(model.dof(), spec.dim())?;
    let classes = CSpaceGrid::classify(spec, |q| {
        if !model.within_limits(q) {
            return true;
        }
        let s = model.forward_spheres(q).expect("grid dimension checked");
        spheres_self_collide(model, &s) || scene.robot_collides(&s, t)
    });
    let mut grid = CSpaceGrid::from_classes(spec.clone(), &classes);
    for i in 0..spec.len() {
        if !classes[i] {
            let lim = model.limit_distance(&spec.center(i));
            if lim < grid.values[i] {
                grid.values[i] = lim;
            }
        }
    }
    Ok(grid)
}

/// Whether a point set collides at `q` (used by scene-free point-cloud oracles).
pub fn points_collide(model: &RobotModel, q: &[f64], points: &[Vec<f64>]) -> Result<bool> {
    let s = model.forward_spheres(q)?;
    Ok(points.iter().any(|p| {
        let p3 = lift(p);
        s.iter().any(|sp| sp.contains(&p3))
    }))
}

/// Squared Euclidean distance transform of a boolean feature mask on a
/// regular grid with per-axis spacing. Returns squared distances (infinite
/// when there is no feature) and the flat index of the nearest feature.
pub fn edt(counts: &[usize], spacing: &[f64], feature: &[bool]) -> (Vec<f64>, Vec<usize>) {
    let total: usize = counts.iter().product();
    assert_eq!(feature.len(), total);
    let mut d2: Vec<f64> = feature.iter().map(|&f| if f { 0.0 } else { f64::INFINITY }).collect();
    let mut src: Vec<usize> = (0..total).map(|i| if feature[i] { i } else { usize::MAX }).collect();

    let dim = counts.len();
    let mut strides = vec![1usize; dim];
    for a in (0..dim.saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * counts[a + 1];
    }

    let max_len = counts.iter().copied().max().unwrap_or(0);
    let mut f = vec![0.0; max_len];
    let mut out = vec![0.0; max_len];
    let mut winner = vec![0usize; max_len];
    let mut v = vec![0usize; max_len];
    let mut z = vec![0.0; max_len + 1];
    let mut line_src = vec![0usize; max_len];

    for axis in 0..dim {
        let n = counts[axis];
        let stride = strides[axis];
        let h = spacing[axis];
        // every line along `axis` starts at a cell whose `axis` index is 0
        for start in 0..total {
            if (start / stride) % n != 0 {
                continue;
            }
            for i in 0..n {
                f[i] = d2[start + i * stride];
                line_src[i] = src[start + i * stride];
            }
            envelope_1d(&f[..n], h, &mut out[..n], &mut winner[..n], &mut v, &mut z);
            for i in 0..n {
                d2[start + i * stride] = out[i];
                src[start + i * stride] = if out[i].is_finite() { line_src[winner[i]] } else { usize::MAX };
            }
        }
    }
    (d2, src)
}

/// 1-D squared distance transform: `out[i] = min_j f[j] + (h (i - j))^2`.
fn envelope_1d(f: &[f64], h: f64, out: &mut [f64], winner: &mut [usize], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let xq = h * q as f64;
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let xp = h * p as f64;
            let s = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
            if s > z[k as usize] {
                k += 1;
                v[k as usize] = q;
                z[k as usize] = s;
                z[k as usize + 1] = f64::INFINITY;
                break;
            }
            k -= 1;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for i in 0..n {
        let x = h * i as f64;
        while z[j + 1] < x {
            j += 1;
        }
        let p = v[j];
        let dx = x - h * p as f64;
        out[i] = dx * dx + f[p];
        winner[i] = p;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    /// Exhaustive nearest-opposite-class search over cell centres.
    fn brute(spec: &GridSpec, classes: &[bool], i: usize) -> f64 {
        let ci = spec.center(i);
        let mut best = f64::INFINITY;
        for j in 0..spec.len() {
            if classes[j] != classes[i] {
                let cj = spec.center(j);
                let d = ci.iter().zip(&cj).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                best = best.min(d);
            }
        }
        let half = 0.5 * (0..spec.dim()).map(|a| spec.cell_size(a)).fold(f64::INFINITY, f64::min);
        if classes[i] {
            -(best - half)
        } else {
            best - half
        }
    }

    #[test]
    fn edt_matches_exhaustive_search_anisotropic_3d() {
        let spec = GridSpec::new(vec![7, 9, 5], vec![0.0, -1.0, 0.0], vec![1.0, 2.0, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let classes: Vec<bool> = (0..spec.len()).map(|_| rng.gen_bool(0.1)).collect();
        let g = CSpaceGrid::from_classes(spec.clone(), &classes);
        for i in 0..spec.len() {
            assert!((g.values[i] - brute(&spec, &classes, i)).abs() < 1e-12);
            // nearest index points at an opposite-class cell at that distance
            let n = g.nearest[i];
            assert_ne!(classes[n], classes[i]);
            let d = spec.center(i).iter().zip(spec.center(n)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!((d - 0.5 * spec.cell_size(2) - g.values[i].abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn self_distance_matches_exhaustive_search_101() {
        let m = RobotModel::planar_benchmark();
        let spec = GridSpec::over_limits(&m, 101);
        let g = oracle_self_distance(&m, &spec).unwrap();
        let classes: Vec<bool> = (0..spec.len())
            .map(|i| crate::geometry::is_self_collision(&m, &spec.center(i)).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..300 {
            let i = rng.gen_range(0..spec.len());
            let mut expect = brute(&spec, &classes, i);
            if !classes[i] {
                expect = expect.min(m.limit_distance(&spec.center(i)));
            }
            assert!((g.values[i] - expect).abs() < 1e-12, "cell {i}");
        }
        // sign agrees with the binary test everywhere; zero never occurs
        for i in 0..spec.len() {
            assert_eq!(g.values[i] < 0.0, classes[i]);
            assert!(g.values[i] != 0.0);
            assert!(g.values[i].abs() <= spec.diameter());
        }
    }

    #[test]
    fn cells_adjacent_to_boundary_are_within_one_diagonal() {
        let m = RobotModel::planar_benchmark();
        let spec = GridSpec::over_limits(&m, 61);
        let g = oracle_self_distance(&m, &spec).unwrap();
        let h = spec.max_cell_size();
        for i in 0..spec.len() {
            let idx = spec.unflat(i);
            for a in 0..2 {
                for step in [-1i64, 1] {
                    let j = idx[a] as i64 + step;
                    if j < 0 || j >= 61 {
                        continue;
                    }
                    let mut nb = idx.clone();
                    nb[a] = j as usize;
                    let k = spec.flat(&nb);
                    if (g.values[k] < 0.0) != (g.values[i] < 0.0) {
                        assert!(g.values[i].abs() <= 2f64.sqrt() * h + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn unreachable_point_is_clamped_to_diameter() {
        let m = RobotModel::planar(&[1.0, 1.0], 0.1, 5, PI).unwrap();
        let spec = GridSpec::over_limits(&m, 41);
        let g = oracle_point_distance(&m, &spec, &[5.0, 5.0]).unwrap();
        assert!(g.degenerate);
        assert!(g.values.iter().all(|v| (*v - spec.diameter()).abs() < 1e-12));
    }

    #[test]
    fn point_distance_sign_convention() {
        let m = RobotModel::planar(&[1.0, 1.0], 0.1, 5, PI).unwrap();
        let spec = GridSpec::over_limits(&m, 81);
        let p = [1.2, 0.6];
        let g = oracle_point_distance(&m, &spec, &p).unwrap();
        for i in 0..spec.len() {
            let c = crate::geometry::collides_with_point(&m, &spec.center(i), &p).unwrap();
            assert_eq!(c, g.values[i] < 0.0);
        }
    }

    #[test]
    fn interpolation_reproduces_linear_field() {
        let spec = GridSpec::new(vec![10, 12], vec![-1.0, 0.0], vec![1.0, 3.0]).unwrap();
        let values = (0..spec.len())
            .map(|i| {
                let c = spec.center(i);
                0.3 * c[0] - 0.7 * c[1] + 0.2
            })
            .collect();
        let g = CSpaceGrid {
            spec,
            values,
            nearest: Vec::new(),
            degenerate: false,
        };
        let (v, grad) = g.interpolate(&[0.123, 2.5]);
        assert!((v - (0.3 * 0.123 - 0.7 * 2.5 + 0.2)).abs() < 1e-12);
        assert!((grad[0] - 0.3).abs() < 1e-12 && (grad[1] + 0.7).abs() < 1e-12);
    }

    #[test]
    fn dump_round_trip() {
        let m = RobotModel::planar_benchmark();
        let g = oracle_self_distance(&m, &GridSpec::over_limits(&m, 21)).unwrap();
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"CSG1");
        assert_eq!(buf.len(), 4 + 4 + 2 * 8 + 2 * 16 + 21 * 21 * 8);
        let back = CSpaceGrid::read_from(&buf[..]).unwrap();
        assert_eq!(back.values, g.values);
        assert_eq!(back.spec, g.spec);
        assert!(CSpaceGrid::read_from(&b"XXXX"[..]).is_err());
    }

    fn eikonal_share(g: &CSpaceGrid) -> f64 {
        let band = 2.0 * g.spec.max_cell_size();
        let mut n = 0;
        let mut ok = 0;
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
        ok as f64 / n as f64
    }

    #[test]
    fn oracle_is_eikonal_away_from_the_boundary() {
        let m = RobotModel::planar_benchmark();
        let spec = GridSpec::over_limits(&m, 201);
        let g = oracle_self_distance(&m, &spec).unwrap();
        assert!(eikonal_share(&g) >= 0.95, "{}", eikonal_share(&g));
        let pg = oracle_point_distance(&m, &spec, &[1.5, 1.0]).unwrap();
        assert!(eikonal_share(&pg) >= 0.95, "{}", eikonal_share(&pg));
    }

    #[test]
    fn projection_lands_on_the_zero_level_set() {
        let m = RobotModel::planar_benchmark();
        let spec = GridSpec::over_limits(&m, 201);
        let g = oracle_point_distance(&m, &spec, &[1.5, 1.0]).unwrap();
        let h = spec.max_cell_size();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ok = 0;
        let trials = 500;
        for _ in 0..trials {
            let q = [rng.gen_range(-PI..PI), rng.gen_range(-PI..PI)];
            let (d, grad) = g.interpolate(&q);
            let Ok(proj) = crate::geometry::project_to_boundary(&q, d, &grad) else { continue };
            if g.interpolate(&proj).0.abs() <= 2.0 * h {
                ok += 1;
            }
        }
        // failures concentrate on the medial axis where the gradient is ambiguous
        assert!(ok as f64 >= 0.9 * trials as f64, "{ok}/{trials}");
    }
}
