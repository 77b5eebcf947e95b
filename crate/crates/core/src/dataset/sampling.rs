//! Uniform base sampling and class balancing by neighborhood perturbation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::is_self_collision;
use crate::robot::RobotModel;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledConfig {
    pub q: Vec<f64>,
    pub colliding: bool,
}

/// Uniform draw from the box `[lower, upper]`.
pub(crate) fn uniform_in(rng: &mut impl Rng, lower: &[f64], upper: &[f64]) -> Vec<f64> {
    lower.iter().zip(upper).map(|(l, h)| rng.gen_range(*l..*h)).collect()
}

/// `n` configurations uniform over the extended joint box, labeled by the
/// self-collision checker.
pub fn sample_base_configs(model: &RobotModel, n: usize, seed: u64) -> Result<Vec<LabeledConfig>> {
    if n == 0 {
        return Err(Error::invalid("need at least one base sample"));
    }
    let (lo, hi) = model.extended_limits();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let q = uniform_in(&mut rng, &lo, &hi);
            let colliding = is_self_collision(model, &q)?;
            Ok(LabeledConfig { q, colliding })
        })
        .collect()
}

/// Perturbation-based class balancing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceParams {
    /// Largest tolerated majority/minority count ratio.
    pub tau: f64,
    /// Standard deviation of the Gaussian perturbation (rad).
    pub sigma: f64,
    /// Attempts allowed per needed sample.
    pub attempt_factor: usize,
}

impl Default for BalanceParams {
    fn default() -> Self {
        BalanceParams {
            tau: 1.25,
            sigma: 0.05,
            attempt_factor: 10,
        }
    }
}

/// Adds perturbed copies of minority samples until the majority/minority
/// ratio is at most `tau`. Perturbations are relabeled by `checker`, kept only
/// if they land in the minority class, and redrawn if they leave the box.
pub fn balance_classes(
    mut samples: Vec<LabeledConfig>,
    params: &BalanceParams,
    lower: &[f64],
    upper: &[f64],
    checker: impl Fn(&[f64]) -> bool,
    seed: u64,
) -> Result<Vec<LabeledConfig>> {
    if !(params.tau >= 1.0) || !(params.sigma > 0.0) {
        return Err(Error::invalid("need tau >= 1 and sigma > 0"));
    }
    let n_col = samples.iter().filter(|s| s.colliding).count();
    let n_free = samples.len() - n_col;
    if n_col == 0 {
        return Err(Error::ClassMissing("colliding"));
    }
    if n_free == 0 {
        return Err(Error::ClassMissing("collision-free"));
    }
    let minority_is_col = n_col < n_free;
    let (major, minor) = if minority_is_col { (n_free, n_col) } else { (n_col, n_free) };
    if (major as f64) <= params.tau * minor as f64 {
        return Ok(samples);
    }
    let needed = (major as f64 / params.tau).ceil() as usize - minor;
    let sources: Vec<Vec<f64>> = samples
        .iter()
        .filter(|s| s.colliding == minority_is_col)
        .map(|s| s.q.clone())
        .collect();
    let normal = Normal::new(0.0, params.sigma).expect("sigma > 0");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut added = 0;
    let mut attempts = 0;
    let budget = needed * params.attempt_factor.max(1);
    while added < needed && attempts < budget {
        attempts += 1;
        let src = &sources[rng.gen_range(0..sources.len())];
        let q: Vec<f64> = src.iter().map(|x| x + normal.sample(&mut rng)).collect();
        if q.iter().zip(lower.iter().zip(upper)).any(|(x, (l, h))| x < l || x > h) {
            continue;
        }
        if checker(&q) == minority_is_col {
            samples.push(LabeledConfig {
                q,
                colliding: minority_is_col,
            });
            added += 1;
        }
    }
    if added < needed {
        log::warn!("class balancing stopped after {attempts} attempts with {added}/{needed} new samples");
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::grid::{oracle_self_distance, GridSpec};

    #[test]
    fn base_sampling_is_deterministic() {
        let m = RobotModel::planar_benchmark();
        let a = sample_base_configs(&m, 500, 7).unwrap();
        assert_eq!(a.len(), 500);
        assert_eq!(a, sample_base_configs(&m, 500, 7).unwrap());
        assert_ne!(a, sample_base_configs(&m, 500, 8).unwrap());
    }

    #[test]
    fn collision_fraction_matches_grid_volume() {
        let m = RobotModel::planar_benchmark();
        let g = oracle_self_distance(&m, &GridSpec::over_limits(&m, 401)).unwrap();
        let grid_frac = g.values.iter().filter(|v| **v < 0.0).count() as f64 / g.values.len() as f64;
        let s = sample_base_configs(&m, 20_000, 1).unwrap();
        let frac = s.iter().filter(|x| x.colliding).count() as f64 / s.len() as f64;
        assert!((frac - grid_frac).abs() < 0.02, "sampled {frac} grid {grid_frac}");
    }

    #[test]
    fn balanced_input_is_unchanged() {
        let s = vec![
            LabeledConfig { q: vec![0.0], colliding: true },
            LabeledConfig { q: vec![1.0], colliding: false },
        ];
        let out = balance_classes(s.clone(), &BalanceParams::default(), &[-2.0], &[2.0], |q| q[0] < 0.5, 0).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn skewed_split_is_balanced_to_tau() {
        // 87/13 split on a 1-D interval with colliding set q < -0.74
        let checker = |q: &[f64]| q[0] < -0.74;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = Vec::new();
        while s.len() < 1000 {
            let q = vec![rng.gen_range(-1.0..1.0)];
            let c = checker(&q);
            s.push(LabeledConfig { q, colliding: c });
        }
        let n_col = s.iter().filter(|x| x.colliding).count();
        assert!((100..170).contains(&n_col));
        let out = balance_classes(s, &BalanceParams::default(), &[-1.0], &[1.0], checker, 3).unwrap();
        let c = out.iter().filter(|x| x.colliding).count();
        let f = out.len() - c;
        assert!(f.max(c) as f64 / f.min(c) as f64 <= 1.25);
        assert!(out.iter().all(|x| x.colliding == checker(&x.q)));
    }

    #[test]
    fn missing_class_is_an_error() {
        let s = vec![LabeledConfig { q: vec![0.0], colliding: false }];
        assert!(matches!(
            balance_classes(s, &BalanceParams::default(), &[-1.0], &[1.0], |_| false, 0),
            Err(Error::ClassMissing(_))
        ));
    }
}
