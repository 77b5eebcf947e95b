//! Ground-truth collision checks and configuration-space signed distances.
//!
//! Everything here is the reference the learned field is measured against:
//! binary checks on the sphere model, the single-point composition and
//! multi-point aggregation rules, boundary projection, and brute-force
//! C-space distance grids (see [`grid`]).

pub mod grid;
pub mod scene;

pub use grid::{CSpaceGrid, GridSpec};
pub use scene::{Primitive, Scene};

use crate::error::{Error, Result};
use crate::robot::{RobotModel, Sphere};

/// Self-collision test: joint-limit violation, or any checked sphere pair
/// overlapping.
pub fn is_self_collision(model: &RobotModel, q: &[f64]) -> Result<bool> {
    if !model.within_limits(q) {
        Error::check_dim(model.dof(), q.len())?;
        return Ok(true);
    }
    let spheres = model.forward_spheres(q)?;
    Ok(spheres_self_collide(model, &spheres))
}

pub(crate) fn spheres_self_collide(model: &RobotModel, spheres: &[Sphere]) -> bool {
    model
        .checked_pairs()
        .iter()
        .any(|&(a, b)| spheres[a].overlaps(&spheres[b]))
}

/// True iff `p` lies inside any world-frame sphere of the robot at `q`.
pub fn collides_with_point(model: &RobotModel, q: &[f64], p: &[f64]) -> Result<bool> {
    let p3 = model.lift_point(p)?;
    let spheres = model.forward_spheres(q)?;
    Ok(spheres.iter().any(|s| s.contains(&p3)))
}

/// Workspace clearance between the robot at `q` and `p` (negative inside a sphere).
pub fn point_clearance(model: &RobotModel, q: &[f64], p: &[f64]) -> Result<f64> {
    let p3 = model.lift_point(p)?;
    let spheres = model.forward_spheres(q)?;
    Ok(spheres
        .iter()
        .map(|s| s.signed_distance(&p3))
        .fold(f64::INFINITY, f64::min))
}

/// Composite distance for one point: the deeper-penetration-limited maximum
/// when both sources are in collision, otherwise the nearest boundary.
pub fn compose_distance(d_self: f64, d_point: f64) -> f64 {
    if d_self < 0.0 && d_point < 0.0 {
        d_self.max(d_point)
    } else {
        d_self.min(d_point)
    }
}

/// Index of the entry selected by [`aggregate_points`].
pub fn aggregate_index(values: &[f64]) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty value list"));
    }
    let all_negative = values.iter().all(|v| *v < 0.0);
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        let better = if all_negative { *v > values[best] } else { *v < values[best] };
        if better {
            best = i;
        }
    }
    Ok(best)
}

/// Multi-point aggregation: maximum when every value is negative, minimum
/// over all values otherwise.
pub fn aggregate_points(values: &[f64]) -> Result<f64> {
    aggregate_index(values).map(|i| values[i])
}

/// One-step projection onto the zero level set: `q - d * grad / |grad|`.
pub fn project_to_boundary(q: &[f64], d: f64, grad: &[f64]) -> Result<Vec<f64>> {
    Error::check_dim(q.len(), grad.len())?;
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !(norm > 1e-12) || !norm.is_finite() {
        return Err(Error::DegenerateGradient);
    }
    if !(0.5..=1.5).contains(&norm) {
        log::debug!("projecting with gradient norm {norm:.3}; renormalizing");
    }
    Ok(q.iter().zip(grad).map(|(x, g)| x - d * g / norm).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn compose_examples() {
        assert_eq!(compose_distance(-0.2, -0.5), -0.2);
        assert_eq!(compose_distance(0.3, 0.1), 0.1);
        assert_eq!(compose_distance(-0.2, 0.1), -0.2);
        assert_eq!(compose_distance(0.1, 0.3), compose_distance(0.3, 0.1));
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate_points(&[-0.3, -0.1]).unwrap(), -0.1);
        assert_eq!(aggregate_points(&[0.5, -0.2, 0.4]).unwrap(), -0.2);
        assert_eq!(aggregate_points(&[0.7]).unwrap(), 0.7);
        assert!(aggregate_points(&[]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn aggregate_is_permutation_invariant(mut v in proptest::collection::vec(-2.0f64..2.0, 1..12), seed in 0u64..1000) {
            let a = aggregate_points(&v).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..v.len()).rev() {
                let j = rng.gen_range(0..=i);
                v.swap(i, j);
            }
            proptest::prop_assert_eq!(a, aggregate_points(&v).unwrap());
        }

        #[test]
        fn compose_is_commutative(a in -2.0f64..2.0, b in -2.0f64..2.0) {
            proptest::prop_assert_eq!(compose_distance(a, b), compose_distance(b, a));
        }
    }

    #[test]
    fn projection_cases() {
        let q = [0.3, -0.2];
        assert_eq!(project_to_boundary(&q, 0.0, &[1.0, 0.0]).unwrap(), q.to_vec());
        let a = project_to_boundary(&q, 0.25, &[0.6, 0.8]).unwrap();
        let b = project_to_boundary(&q, 0.25, &[1.2, 1.6]).unwrap();
        assert_eq!(a, b);
        assert!((a[0] - (0.3 - 0.15)).abs() < 1e-15);
        assert!(matches!(project_to_boundary(&q, 0.1, &[0.0, 0.0]), Err(Error::DegenerateGradient)));
    }

    #[test]
    fn straight_arm_is_free_and_folded_arm_collides() {
        let m = RobotModel::planar(&[1.0, 1.0], 0.1, 5, PI).unwrap();
        assert!(!is_self_collision(&m, &[0.0, 0.0]).unwrap());
        // q2 = pi folds link 2 back onto link 1: sphere centres coincide
        let s = m.forward_spheres(&[0.0, PI]).unwrap();
        assert!(crate::robot::dist2(&s[3].center, &s[6].center) < 1e-20);
        assert!(is_self_collision(&m, &[0.0, PI]).unwrap());
        assert!(is_self_collision(&m, &[0.0, PI + 0.1]).unwrap(), "limit violation");
    }

    #[test]
    fn self_collision_matches_pairwise_brute_force() {
        let m = RobotModel::planar_benchmark();
        let pairs = m.checked_pairs().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let q = [rng.gen_range(-PI..PI), rng.gen_range(-PI..PI)];
            let s = m.forward_spheres(&q).unwrap();
            let mut brute = false;
            for &(a, b) in &pairs {
                let d = crate::robot::dist2(&s[a].center, &s[b].center).sqrt();
                if d < s[a].radius + s[b].radius {
                    brute = true;
                }
            }
            assert_eq!(brute, is_self_collision(&m, &q).unwrap());
        }
    }

    #[test]
    fn point_collision_cases() {
        let m = RobotModel::planar(&[1.0, 1.0], 0.1, 5, PI).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let q = [rng.gen_range(-PI..PI), rng.gen_range(-PI..PI)];
            assert!(!collides_with_point(&m, &q, &[2.5, 0.0]).unwrap());
            let s = m.forward_spheres(&q).unwrap();
            assert!(collides_with_point(&m, &q, &s[7].center[..2]).unwrap());
            let p = [rng.gen_range(-2.2..2.2), rng.gen_range(-2.2..2.2)];
            let direct = s
                .iter()
                .map(|s| ((s.center[0] - p[0]).powi(2) + (s.center[1] - p[1]).powi(2)).sqrt() - s.radius)
                .fold(f64::INFINITY, f64::min);
            assert_eq!(direct <= 0.0, collides_with_point(&m, &q, &p).unwrap());
        }
    }
}
