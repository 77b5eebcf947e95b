//! Bidirectional RRT (RRT-Connect) over a binary collision checker, with one
//! greedy shortcut pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dist;
use crate::dataset::sampling::uniform_in;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RrtParams {
    /// Longest tree extension (rad).
    pub step: f64,
    /// Edge collision-check spacing (rad).
    pub resolution: f64,
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for RrtParams {
    fn default() -> Self {
        RrtParams {
            step: 0.2,
            resolution: 0.02,
            max_samples: 10_000,
            seed: 0,
        }
    }
}

/// Whether every point along `a -> b` (spacing at most `res`) is free.
pub fn edge_free(a: &[f64], b: &[f64], res: f64, colliding: &dyn Fn(&[f64]) -> bool) -> bool {
    let steps = (dist(a, b) / res).ceil().max(1.0) as usize;
    (1..=steps).all(|k| {
        let s = k as f64 / steps as f64;
        let p: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + s * (y - x)).collect();
        !colliding(&p)
    })
}

struct Tree {
    nodes: Vec<Vec<f64>>,
    parent: Vec<usize>,
}

impl Tree {
    fn new(root: Vec<f64>) -> Self {
        Tree {
            nodes: vec![root],
            parent: vec![usize::MAX],
        }
    }

    fn nearest(&self, q: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, n) in self.nodes.iter().enumerate() {
            let d: f64 = n.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    fn path_to_root(&self, mut i: usize) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        while i != usize::MAX {
            out.push(self.nodes[i].clone());
            i = self.parent[i];
        }
        out
    }
}

enum Extend {
    Trapped,
    Advanced(usize),
    Reached(usize),
}

fn extend(tree: &mut Tree, target: &[f64], p: &RrtParams, colliding: &dyn Fn(&[f64]) -> bool) -> Extend {
    let near = tree.nearest(target);
    let from = &tree.nodes[near];
    let d = dist(from, target);
    let (q_new, reached) = if d <= p.step {
        (target.to_vec(), true)
    } else {
        let s = p.step / d;
        (from.iter().zip(target).map(|(a, b)| a + s * (b - a)).collect(), false)
    };
    if !edge_free(from, &q_new, p.resolution, colliding) {
        return Extend::Trapped;
    }
    tree.nodes.push(q_new);
    tree.parent.push(near);
    let id = tree.nodes.len() - 1;
    if reached {
        Extend::Reached(id)
    } else {
        Extend::Advanced(id)
    }
}

/// Greedy shortcut: from each kept waypoint jump to the farthest later one
/// reachable by a free straight edge.
pub fn shortcut(path: &[Vec<f64>], res: f64, colliding: &dyn Fn(&[f64]) -> bool) -> Vec<Vec<f64>> {
    if path.len() <= 2 {
        return path.to_vec();
    }
    let mut out = vec![path[0].clone()];
    let mut i = 0;
    let last = path.len() - 1;
    while i < last {
        let mut j = last;
        while j > i + 1 && !edge_free(&path[i], &path[j], res, colliding) {
            j -= 1;
        }
        out.push(path[j].clone());
        i = j;
    }
    out
}

/// Collision-free polyline from `start` to `goal` inside `[lower, upper]`.
pub fn rrt_connect(
    lower: &[f64],
    upper: &[f64],
    start: &[f64],
    goal: &[f64],
    colliding: &dyn Fn(&[f64]) -> bool,
    p: &RrtParams,
) -> Result<Vec<Vec<f64>>> {
    Error::check_dim(lower.len(), start.len())?;
    Error::check_dim(lower.len(), goal.len())?;
    if !(p.step > 0.0) || !(p.resolution > 0.0) {
        return Err(Error::invalid("step and resolution must be positive"));
    }
    if colliding(start) {
        return Err(Error::invalid("start configuration is in collision"));
    }
    if colliding(goal) {
        return Err(Error::invalid("goal configuration is in collision"));
    }
    if edge_free(start, goal, p.resolution, colliding) {
        return Ok(vec![start.to_vec(), goal.to_vec()]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut a = Tree::new(start.to_vec());
    let mut b = Tree::new(goal.to_vec());
    let mut a_is_start = true;
    for _ in 0..p.max_samples {
        let q_rand = uniform_in(&mut rng, lower, upper);
        let new_id = match extend(&mut a, &q_rand, p, colliding) {
            Extend::Trapped => None,
            Extend::Advanced(i) | Extend::Reached(i) => Some(i),
        };
        if let Some(ia) = new_id {
            let target = a.nodes[ia].clone();
            loop {
                match extend(&mut b, &target, p, colliding) {
                    Extend::Advanced(_) => continue,
                    Extend::Trapped => break,
                    Extend::Reached(ib) => {
                        let mut pa = a.path_to_root(ia);
                        pa.reverse();
                        let pb = b.path_to_root(ib);
                        // pb[0] duplicates the connection point
                        pa.extend(pb.into_iter().skip(1));
                        if !a_is_start {
                            pa.reverse();
                        }
                        return Ok(shortcut(&pa, p.resolution, colliding));
                    }
                }
            }
        }
        std::mem::swap(&mut a, &mut b);
        a_is_start = !a_is_start;
    }
    Err(Error::PlanningFailed(format!("no path after {} samples", p.max_samples)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_walls(q: &[f64]) -> bool {
        // two blocks leaving a gap around y = 0.2
        (q[0].abs() < 0.3) && (q[1] > 0.4 || q[1] < 0.0)
    }

    #[test]
    fn empty_space_is_straight() {
        let p = rrt_connect(&[-3.0; 2], &[3.0; 2], &[-2.0, 0.0], &[2.0, 1.0], &|_| false, &RrtParams::default()).unwrap();
        assert_eq!(p.len(), 2);
    }

    #[test]
    fn finds_path_through_gap() {
        let par = RrtParams::default();
        let start = [-1.0, -1.0];
        let goal = [1.0, 1.5];
        let p = rrt_connect(&[-2.0; 2], &[2.0; 2], &start, &goal, &two_walls, &par).unwrap();
        assert_eq!(p.first().unwrap().as_slice(), &start);
        assert_eq!(p.last().unwrap().as_slice(), &goal);
        for w in p.windows(2) {
            assert!(edge_free(&w[0], &w[1], par.resolution, &two_walls));
        }
        assert!(p.iter().all(|q| !two_walls(q)));
    }

    #[test]
    fn blocked_goal_fails() {
        let wall = |q: &[f64]| q[0].abs() < 0.1;
        let r = rrt_connect(
            &[-1.0; 2],
            &[1.0; 2],
            &[-0.5, 0.0],
            &[0.5, 0.0],
            &wall,
            &RrtParams {
                max_samples: 300,
                ..Default::default()
            },
        );
        assert!(matches!(r, Err(Error::PlanningFailed(_))));
        assert!(rrt_connect(&[-1.0; 2], &[1.0; 2], &[0.0, 0.0], &[0.5, 0.0], &wall, &RrtParams::default()).is_err());
    }
}
