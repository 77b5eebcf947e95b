//! End-to-end generation of self-collision and external-collision samples.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mining::{BoundaryOracle, DEFAULT_TOLERANCE};
use super::sampling::{balance_classes, sample_base_configs, uniform_in, BalanceParams, LabeledConfig};
use super::voxel::{build_voxel_map, VoxelConfigMap};
use super::{make_self_collision_points, Dataset, FieldSample};
use crate::error::{Error, Result};
use crate::geometry::{compose_distance, is_self_collision};
use crate::neighbor::{ExactIndex, IndexKind, NeighborIndex};
use crate::robot::RobotModel;

pub(crate) type Checker<'a> = Box<dyn Fn(&[f64]) -> bool + Send + Sync + 'a>;

/// Sampling strategy for self-collision data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfVariant {
    /// Uniform samples only.
    Uniform,
    /// Uniform samples plus class balancing.
    Balanced,
    /// Balancing, boundary mining and perturbations around mined points.
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfCollisionConfig {
    pub samples: usize,
    pub variant: SelfVariant,
    pub seed: u64,
    pub tolerance: f64,
    /// Opposite-class neighbors bisected per ground-truth query.
    pub candidates: usize,
    pub balance: BalanceParams,
    /// Share of `samples` drawn uniformly before balancing (complete variant).
    pub base_fraction: f64,
    /// Perturbation scale around mined boundary points (rad).
    pub boundary_sigma: f64,
    pub index: IndexKind,
    pub workspace_extension: f64,
    /// Share of virtual points forced outside the reachable ball.
    pub outside_fraction: f64,
}

impl Default for SelfCollisionConfig {
    fn default() -> Self {
        SelfCollisionConfig {
            samples: 10_000,
            variant: SelfVariant::Complete,
            seed: 0,
            tolerance: DEFAULT_TOLERANCE,
            candidates: 4,
            balance: BalanceParams::default(),
            base_fraction: 0.5,
            boundary_sigma: 0.05,
            index: IndexKind::Exact,
            workspace_extension: 1.5,
            outside_fraction: 1.0,
        }
    }
}

impl SelfCollisionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::invalid("samples must be positive"));
        }
        if !(self.tolerance > 0.0) || !(self.boundary_sigma > 0.0) {
            return Err(Error::invalid("tolerance and boundary sigma must be positive"));
        }
        if !(self.base_fraction > 0.0 && self.base_fraction <= 1.0) {
            return Err(Error::invalid("base fraction must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Generated self-collision samples plus the mined boundary points.
#[derive(Debug, Clone)]
pub struct SelfCollisionData {
    pub dataset: Dataset,
    pub mined: Vec<Vec<f64>>,
}

/// Self-collision distance estimator backed by labeled and mined samples.
pub struct SelfDistance<'a> {
    model: &'a RobotModel,
    oracle: BoundaryOracle<Checker<'a>>,
}

impl<'a> SelfDistance<'a> {
    fn new(model: &'a RobotModel, cfg: &SelfCollisionConfig) -> Self {
        let checker: Checker<'a> = Box::new(move |q: &[f64]| is_self_collision(model, q).unwrap_or(true));
        let mut oracle = BoundaryOracle::new(cfg.index, model.dof(), checker, cfg.seed ^ 0x1d);
        oracle.tol = cfg.tolerance;
        oracle.candidates = cfg.candidates;
        SelfDistance { model, oracle }
    }

    /// Signed self-collision distance and its gradient. Safe values are capped
    /// by the distance to the joint-limit faces.
    pub fn evaluate(&self, q: &[f64]) -> Result<Option<(f64, Vec<f64>)>> {
        let est = self.oracle.estimate(q)?;
        let colliding = self.oracle.is_colliding(q);
        if colliding {
            return Ok(est.map(|e| (e.value, e.grad)));
        }
        let (lim, lgrad) = limit_distance_grad(self.model, q);
        match est {
            Some(e) if e.value <= lim => Ok(Some((e.value, e.grad))),
            _ if lim > 0.0 => Ok(Some((lim, lgrad))),
            _ => Ok(None),
        }
    }
}

/// Distance to the nearest joint-limit face from inside the box, with its gradient.
fn limit_distance_grad(model: &RobotModel, q: &[f64]) -> (f64, Vec<f64>) {
    let lo = model.lower_limits();
    let hi = model.upper_limits();
    let mut best = (f64::INFINITY, 0, 1.0);
    for j in 0..q.len() {
        let a = q[j] - lo[j];
        let b = hi[j] - q[j];
        if a < best.0 {
            best = (a, j, 1.0);
        }
        if b < best.0 {
            best = (b, j, -1.0);
        }
    }
    let mut g = vec![0.0; q.len()];
    g[best.1] = best.2;
    (best.0, g)
}

/// Builds the labeled sample set and the boundary oracle for `cfg.variant`.
fn self_collision_run<'a>(
    model: &'a RobotModel,
    cfg: &SelfCollisionConfig,
) -> Result<(SelfDistance<'a>, Vec<LabeledConfig>, Vec<Vec<f64>>)> {
    cfg.validate()?;
    let (lo, hi) = model.extended_limits();
    let checker = |q: &[f64]| is_self_collision(model, q).unwrap_or(true);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e1f);
    let mut sd = SelfDistance::new(model, cfg);
    let mut mined = Vec::new();
    let samples = match cfg.variant {
        SelfVariant::Uniform => {
            let s = sample_base_configs(model, cfg.samples, cfg.seed)?;
            for x in &s {
                sd.oracle.insert(&x.q, x.colliding)?;
            }
            s
        }
        SelfVariant::Balanced => {
            let base = sample_base_configs(model, cfg.samples, cfg.seed)?;
            let mut s = balance_classes(base, &cfg.balance, &lo, &hi, checker, cfg.seed + 1)?;
            for x in &s {
                sd.oracle.insert(&x.q, x.colliding)?;
            }
            s.shuffle(&mut rng);
            s.truncate(cfg.samples);
            s
        }
        SelfVariant::Complete => {
            let n_base = ((cfg.base_fraction * cfg.samples as f64).ceil() as usize).max(1);
            let base = sample_base_configs(model, n_base, cfg.seed)?;
            let mut s = balance_classes(base, &cfg.balance, &lo, &hi, checker, cfg.seed + 1)?;
            for x in &s {
                sd.oracle.insert(&x.q, x.colliding)?;
            }
            let mut skipped = 0usize;
            for x in &s {
                match sd.oracle.mine(&x.q, x.colliding) {
                    Ok(m) => mined.push(m.boundary),
                    Err(Error::NotBracketed) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            if skipped > 0 {
                log::debug!("boundary mining skipped {skipped} stale samples");
            }
            if mined.is_empty() {
                return Err(Error::ClassMissing("boundary"));
            }
            let normal = Normal::new(0.0, cfg.boundary_sigma).expect("sigma checked");
            while s.len() < cfg.samples {
                let c = &mined[rng.gen_range(0..mined.len())];
                let q: Vec<f64> = c.iter().map(|x| x + normal.sample(&mut rng)).collect();
                if q.iter().zip(lo.iter().zip(&hi)).any(|(x, (l, h))| x < l || x > h) {
                    continue;
                }
                let colliding = checker(&q);
                s.push(LabeledConfig { q, colliding });
            }
            s.shuffle(&mut rng);
            s.truncate(cfg.samples);
            s
        }
    };
    Ok((sd, samples, mined))
}

/// Self-collision dataset with virtual obstacle points.
pub fn generate_self_collision(model: &RobotModel, cfg: &SelfCollisionConfig) -> Result<SelfCollisionData> {
    let (sd, samples, mined) = self_collision_run(model, cfg)?;
    let bounds = model.workspace_bounds(cfg.workspace_extension)?;
    let points = make_self_collision_points(model, &bounds, samples.len(), cfg.outside_fraction, cfg.seed ^ 0x9017)?;
    let out: Vec<Option<FieldSample>> = samples
        .par_iter()
        .zip(points)
        .map(|(s, p)| {
            Ok(sd.evaluate(&s.q)?.and_then(|(value, grad)| {
                (value != 0.0).then(|| FieldSample {
                    q: s.q.clone(),
                    p,
                    value,
                    label: value < 0.0,
                    grad,
                })
            }))
        })
        .collect::<Result<_>>()?;
    let dropped = out.iter().filter(|s| s.is_none()).count();
    if dropped > 0 {
        log::debug!("dropped {dropped} samples without a bracketed boundary");
    }
    let dataset = Dataset::new(model.dof(), model.point_dim(), out.into_iter().flatten().collect())?;
    Ok(SelfCollisionData { dataset, mined })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExternalConfig {
    /// Obstacle points drawn inside the reachable ball.
    pub points: usize,
    pub samples_per_point: usize,
    /// Configurations hashed into the voxel map.
    pub table_size: usize,
    /// Voxel edge (m); defaults to the smallest sphere radius.
    pub resolution: Option<f64>,
    /// Free-side pool radius around the colliding set (rad).
    pub free_radius: f64,
    /// Boundary crossings mined per point.
    pub mine_per_point: usize,
    /// Share of samples perturbed around mined points.
    pub boundary_fraction: f64,
    pub boundary_sigma: f64,
    pub tolerance: f64,
    pub candidates: usize,
    pub index: IndexKind,
    pub seed: u64,
    /// Configuration of the self-collision estimator composed into every sample.
    pub self_collision: SelfCollisionConfig,
}

impl Default for ExternalConfig {
    fn default() -> Self {
        ExternalConfig {
            points: 200,
            samples_per_point: 50,
            table_size: 20_000,
            resolution: None,
            free_radius: 1.0,
            mine_per_point: 64,
            boundary_fraction: 0.5,
            boundary_sigma: 0.05,
            tolerance: DEFAULT_TOLERANCE,
            candidates: 4,
            index: IndexKind::Exact,
            seed: 0,
            self_collision: SelfCollisionConfig::default(),
        }
    }
}

impl ExternalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points == 0 {
            return Err(Error::invalid(
                "external generation needs at least one obstacle point; use self-collision generation for robot-only data",
            ));
        }
        if self.samples_per_point == 0 || self.table_size == 0 {
            return Err(Error::invalid("samples per point and table size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.boundary_fraction) {
            return Err(Error::invalid("boundary fraction must be in [0, 1]"));
        }
        if !(self.tolerance > 0.0) || !(self.boundary_sigma > 0.0) || !(self.free_radius > 0.0) {
            return Err(Error::invalid("tolerance, sigma and free radius must be positive"));
        }
        self.self_collision.validate()
    }
}

/// Smallest collision-sphere radius of the model.
fn smallest_radius(model: &RobotModel) -> f64 {
    model
        .links()
        .iter()
        .flat_map(|l| l.local_spheres.iter().map(|s| s.radius))
        .fold(f64::INFINITY, f64::min)
}

/// External-collision samples: per obstacle point, the risk configurations
/// from the voxel map form the colliding set, nearby table configurations the
/// free set, and the boundary is refined by bisection against the point
/// contact test. Values are composed with the self-collision distance.
pub fn generate_external(model: &RobotModel, cfg: &ExternalConfig) -> Result<Dataset> {
    cfg.validate()?;
    let n = model.dof();
    let (lo, hi) = model.extended_limits();
    let diameter = lo.iter().zip(&hi).map(|(l, h)| (h - l) * (h - l)).sum::<f64>().sqrt();

    let (sd, _, _) = self_collision_run(model, &cfg.self_collision)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let table: Vec<Vec<f64>> = (0..cfg.table_size).map(|_| uniform_in(&mut rng, &lo, &hi)).collect();
    let map_bounds = model.workspace_bounds(1.05)?;
    let res = cfg.resolution.unwrap_or_else(|| smallest_radius(model));
    let map = build_voxel_map(model, table, &map_bounds, res)?;

    let reach = model.reach();
    let base = model.base_position();
    let w = model.point_dim();
    let mut points = Vec::with_capacity(cfg.points);
    while points.len() < cfg.points {
        let p: Vec<f64> = (0..w).map(|a| base[a] + rng.gen_range(-reach..reach)).collect();
        let r2: f64 = p.iter().enumerate().map(|(a, x)| (x - base[a]).powi(2)).sum();
        if r2.sqrt() <= reach {
            points.push(p);
        }
    }

    let per_point: Vec<Vec<FieldSample>> = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| point_samples(model, cfg, &sd, &map, p, diameter, cfg.seed.wrapping_add(1 + i as u64)))
        .collect::<Result<_>>()?;
    Dataset::new(n, w, per_point.into_iter().flatten().collect())
}

fn point_samples(
    model: &RobotModel,
    cfg: &ExternalConfig,
    sd: &SelfDistance<'_>,
    map: &VoxelConfigMap,
    p: &[f64],
    diameter: f64,
    seed: u64,
) -> Result<Vec<FieldSample>> {
    let n = model.dof();
    let (lo, hi) = model.extended_limits();
    let p3 = model.lift_point(p)?;
    let touches = move |q: &[f64]| {
        model
            .forward_spheres(q)
            .map(|s| s.iter().any(|sp| sp.contains(&p3)))
            .unwrap_or(false)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let colliding: Vec<u32> = map
        .risk_configs(p)?
        .iter()
        .copied()
        .filter(|&id| touches(map.config(id)))
        .collect();
    let mut oracle = None;
    let mut mined = Vec::new();
    if !colliding.is_empty() {
        let mut col_index = ExactIndex::new(n);
        for &id in &colliding {
            col_index.insert(map.config(id))?;
        }
        let mut o = BoundaryOracle::new(cfg.index, n, touches, seed);
        o.tol = cfg.tolerance;
        o.candidates = cfg.candidates;
        let mut pool = Vec::new();
        for &id in &colliding {
            o.insert(map.config(id), true)?;
            pool.push((map.config(id), true));
        }
        let mut sorted = colliding.clone();
        sorted.sort_unstable();
        for (id, q) in map.configs().iter().enumerate() {
            if sorted.binary_search(&(id as u32)).is_ok() {
                continue;
            }
            let (_, d) = col_index.nearest(q, 1)?[0];
            if d <= cfg.free_radius {
                o.insert(q, false)?;
                pool.push((q, false));
            }
        }
        pool.shuffle(&mut rng);
        for (q, c) in pool.into_iter().take(cfg.mine_per_point) {
            match o.mine(q, c) {
                Ok(m) => mined.push(m.boundary),
                Err(Error::NotBracketed) | Err(Error::EmptyIndex) => {}
                Err(e) => return Err(e),
            }
        }
        oracle = Some(o);
    }

    let n_boundary = if mined.is_empty() {
        0
    } else {
        (cfg.boundary_fraction * cfg.samples_per_point as f64).round() as usize
    };
    let normal = Normal::new(0.0, cfg.boundary_sigma).expect("sigma checked");
    let mut out = Vec::with_capacity(cfg.samples_per_point);
    let mut attempts = 0;
    while out.len() < cfg.samples_per_point && attempts < 20 * cfg.samples_per_point {
        attempts += 1;
        let q: Vec<f64> = if out.len() < n_boundary {
            let c = &mined[rng.gen_range(0..mined.len())];
            let q: Vec<f64> = c.iter().map(|x| x + normal.sample(&mut rng)).collect();
            if q.iter().zip(lo.iter().zip(&hi)).any(|(x, (l, h))| x < l || x > h) {
                continue;
            }
            q
        } else {
            uniform_in(&mut rng, &lo, &hi)
        };
        let Some((vs, gs)) = sd.evaluate(&q)? else { continue };
        let (vc, gc) = match oracle.as_ref().map(|o| o.estimate(&q)).transpose()?.flatten() {
            Some(e) => (e.value, e.grad),
            None if touches(&q) => continue,
            None => (diameter, gs.clone()),
        };
        let value = compose_distance(vs, vc);
        if value == 0.0 {
            continue;
        }
        let grad = if value == vs { gs } else { gc };
        out.push(FieldSample {
            q,
            p: p.to_vec(),
            value,
            label: value < 0.0,
            grad,
        });
    }
    Ok(out)
}

/// Draws `total` samples, a `fraction_a` share from `a` and the rest from `b`
/// (without replacement while possible).
pub fn mix_datasets(a: &Dataset, b: &Dataset, fraction_a: f64, total: usize, seed: u64) -> Result<Dataset> {
    Error::check_dim(a.dof, b.dof)?;
    Error::check_dim(a.point_dim, b.point_dim)?;
    if !(0.0..=1.0).contains(&fraction_a) {
        return Err(Error::invalid("mix fraction must be in [0, 1]"));
    }
    let na = (fraction_a * total as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(total);
    for (src, k) in [(a, na), (b, total - na)] {
        if k == 0 {
            continue;
        }
        if src.is_empty() {
            return Err(Error::invalid("cannot draw from an empty dataset"));
        }
        let mut idx: Vec<usize> = (0..src.len()).collect();
        while idx.len() < k {
            idx.extend(0..src.len());
        }
        idx.shuffle(&mut rng);
        out.extend(idx[..k].iter().map(|&i| src.samples[i].clone()));
    }
    out.shuffle(&mut rng);
    Dataset::new(a.dof, a.point_dim, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetStats;
    use crate::geometry::grid::{oracle_point_distance, oracle_self_distance, GridSpec};

    fn cfg(variant: SelfVariant, samples: usize) -> SelfCollisionConfig {
        SelfCollisionConfig {
            samples,
            variant,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn every_sample_satisfies_invariants() {
        let m = RobotModel::planar_benchmark();
        for v in [SelfVariant::Uniform, SelfVariant::Balanced, SelfVariant::Complete] {
            let d = generate_self_collision(&m, &cfg(v, 2000)).unwrap().dataset;
            assert!(d.len() >= 1900, "{v:?} kept {}", d.len());
            for s in &d.samples {
                s.check().unwrap();
            }
        }
    }

    #[test]
    fn variants_order_boundary_ratio_and_balance() {
        let m = RobotModel::planar_benchmark();
        let u = generate_self_collision(&m, &cfg(SelfVariant::Uniform, 4000)).unwrap().dataset.stats();
        let b = generate_self_collision(&m, &cfg(SelfVariant::Balanced, 4000)).unwrap().dataset.stats();
        let c = generate_self_collision(&m, &cfg(SelfVariant::Complete, 4000)).unwrap().dataset.stats();
        let show = |s: &DatasetStats| format!("ratio {:.1} bsr {:.2}", s.class_ratio, s.bsr);
        assert!(u.class_ratio > 65.0, "{}", show(&u));
        assert!(b.class_ratio < 60.0 && b.class_ratio < u.class_ratio - 10.0, "{}", show(&b));
        assert!(c.class_ratio < 60.0, "{}", show(&c));
        assert!(c.bsr > 10.0 && c.bsr > 2.0 * u.bsr, "{} vs {}", show(&c), show(&u));
    }

    #[test]
    fn mined_points_lie_on_the_oracle_boundary() {
        let m = RobotModel::planar_benchmark();
        let spec = GridSpec::over_limits(&m, 201);
        let g = oracle_self_distance(&m, &spec).unwrap();
        let data = generate_self_collision(&m, &cfg(SelfVariant::Complete, 2000)).unwrap();
        let h = spec.max_cell_size();
        let near = data.mined.iter().filter(|q| g.interpolate(q).0.abs() <= 2.0 * h).count();
        assert!(near as f64 >= 0.9 * data.mined.len() as f64, "{near}/{}", data.mined.len());
    }

    #[test]
    fn self_values_track_the_grid_oracle() {
        let m = RobotModel::planar_benchmark();
        let spec = GridSpec::over_limits(&m, 201);
        let g = oracle_self_distance(&m, &spec).unwrap();
        let d = generate_self_collision(&m, &cfg(SelfVariant::Complete, 4000)).unwrap().dataset;
        let h = spec.max_cell_size();
        let ok = d.samples.iter().filter(|s| (g.interpolate(&s.q).0 - s.value).abs() <= 2.0 * h).count();
        assert!(ok as f64 >= 0.9 * d.len() as f64, "{ok}/{}", d.len());
    }

    #[test]
    fn external_samples_match_point_oracle() {
        let m = RobotModel::planar_benchmark();
        let c = ExternalConfig {
            points: 6,
            samples_per_point: 40,
            table_size: 4000,
            self_collision: cfg(SelfVariant::Complete, 2000),
            seed: 5,
            ..Default::default()
        };
        let d = generate_external(&m, &c).unwrap();
        assert!(d.len() >= 200);
        for s in &d.samples {
            s.check().unwrap();
        }
        let spec = GridSpec::over_limits(&m, 201);
        let selfg = oracle_self_distance(&m, &spec).unwrap();
        let h = spec.max_cell_size();
        let mut ok = 0;
        let mut grids = std::collections::HashMap::new();
        for s in &d.samples {
            let key = format!("{:?}", s.p);
            let pg = grids.entry(key).or_insert_with(|| oracle_point_distance(&m, &spec, &s.p).unwrap());
            let expect = compose_distance(selfg.interpolate(&s.q).0, pg.interpolate(&s.q).0);
            if (expect - s.value).abs() <= 2.0 * h {
                ok += 1;
            }
            let touching = crate::geometry::collides_with_point(&m, &s.q, &s.p).unwrap();
            if touching {
                assert!(s.value < 0.0);
            }
        }
        assert!(ok as f64 >= 0.9 * d.len() as f64, "{ok}/{}", d.len());
    }

    #[test]
    fn mixing_respects_fraction() {
        let mk = |v: f64, n: usize| {
            let s = FieldSample {
                q: vec![0.0],
                p: vec![0.0, 0.0],
                value: v,
                label: v < 0.0,
                grad: vec![1.0],
            };
            Dataset::new(1, 2, vec![s; n]).unwrap()
        };
        let d = mix_datasets(&mk(1.0, 10), &mk(-1.0, 300), 0.5, 100, 0).unwrap();
        assert_eq!(d.len(), 100);
        assert_eq!(d.samples.iter().filter(|s| s.value > 0.0).count(), 50);
    }
}
