//! Collision rate, path length and planning time of trajectories.

use serde::Serialize;

use super::dist;
use super::spline::SplineTrajectory;
use crate::error::Result;
use crate::fields::DistanceField;

/// States per trajectory used for collision rate and length.
pub const DENSE_STATES: usize = 1000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PlanMetrics {
    /// Percentage of resampled states in collision.
    pub collision_rate: f64,
    /// Summed joint-space length over the resampled states (rad).
    pub length: f64,
    /// Wall-clock planning time (ms).
    pub time_ms: f64,
}

pub fn path_length(states: &[Vec<f64>]) -> f64 {
    states.windows(2).map(|w| dist(&w[0], &w[1])).sum()
}

/// `count` points evenly spaced by arc length along a polyline.
pub fn resample_polyline(path: &[Vec<f64>], count: usize) -> Vec<Vec<f64>> {
    let count = count.max(2);
    if path.len() < 2 {
        return vec![path[0].clone(); count];
    }
    let mut cum = vec![0.0];
    for w in path.windows(2) {
        cum.push(cum.last().unwrap() + dist(&w[0], &w[1]));
    }
    let total = *cum.last().unwrap();
    let mut seg = 0;
    (0..count)
        .map(|k| {
            let target = total * k as f64 / (count - 1) as f64;
            while seg + 2 < cum.len() && cum[seg + 1] < target {
                seg += 1;
            }
            let len = cum[seg + 1] - cum[seg];
            let s = if len > 0.0 { ((target - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
            path[seg].iter().zip(&path[seg + 1]).map(|(a, b)| a + s * (b - a)).collect()
        })
        .collect()
}

/// Collision rate (percent) and length of a state sequence.
pub fn state_metrics(states: &[Vec<f64>], colliding: impl Fn(&[f64]) -> Result<bool>) -> Result<(f64, f64)> {
    let mut hits = 0;
    for s in states {
        if colliding(s)? {
            hits += 1;
        }
    }
    Ok((100.0 * hits as f64 / states.len().max(1) as f64, path_length(states)))
}

pub fn trajectory_metrics(
    tr: &SplineTrajectory,
    colliding: impl Fn(&[f64]) -> Result<bool>,
    time_ms: f64,
) -> Result<PlanMetrics> {
    let (collision_rate, length) = state_metrics(&tr.resample(DENSE_STATES), colliding)?;
    Ok(PlanMetrics {
        collision_rate,
        length,
        time_ms,
    })
}

pub fn polyline_metrics(
    path: &[Vec<f64>],
    colliding: impl Fn(&[f64]) -> Result<bool>,
    time_ms: f64,
) -> Result<PlanMetrics> {
    let (collision_rate, length) = state_metrics(&resample_polyline(path, DENSE_STATES), colliding)?;
    Ok(PlanMetrics {
        collision_rate,
        length,
        time_ms,
    })
}

/// Deepest penetration `max(0, -phi)` over a state sequence.
pub fn penetration_depth(states: &[Vec<f64>], field: &dyn DistanceField, t: f64) -> Result<f64> {
    let mut depth = 0.0f64;
    for s in states {
        depth = depth.max(-field.distance(s, t)?.value);
    }
    Ok(depth)
}

/// Mean of per-trial metrics.
pub fn average(ms: &[PlanMetrics]) -> PlanMetrics {
    let n = ms.len().max(1) as f64;
    PlanMetrics {
        collision_rate: ms.iter().map(|m| m.collision_rate).sum::<f64>() / n,
        length: ms.iter().map(|m| m.length).sum::<f64>() / n,
        time_ms: ms.iter().map(|m| m.time_ms).sum::<f64>() / n,
    }
}
