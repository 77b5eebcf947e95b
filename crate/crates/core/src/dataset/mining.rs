//! Boundary mining by nearest-opposite search plus bisection, and
//! nearest-boundary ground truth.

use crate::error::{Error, Result};
use crate::neighbor::{new_index, IndexKind, NeighborIndex};

/// Default bisection tolerance (rad).
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// A bracketed boundary crossing.
#[derive(Debug, Clone, PartialEq)]
pub struct MinedBoundary {
    /// Midpoint of the final bracket.
    pub boundary: Vec<f64>,
    /// Bracket end labeled collision-free.
    pub free: Vec<f64>,
    /// Bracket end labeled colliding.
    pub colliding: Vec<f64>,
    pub iterations: usize,
}

impl MinedBoundary {
    pub fn width(&self) -> f64 {
        dist(&self.free, &self.colliding)
    }
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Number of halvings that bring a bracket of length `len` to at most `tol`.
pub fn bisection_steps(len: f64, tol: f64) -> usize {
    if len <= tol {
        0
    } else {
        (len / tol).log2().ceil() as usize
    }
}

/// Bisects the segment `[a, b]` on the label flip of `checker` (true means
/// colliding) until the bracket is at most `tol` wide.
pub fn bisect(a: &[f64], b: &[f64], checker: impl Fn(&[f64]) -> bool, tol: f64) -> Result<MinedBoundary> {
    Error::check_dim(a.len(), b.len())?;
    if !(tol > 0.0) {
        return Err(Error::invalid("bisection tolerance must be positive"));
    }
    let la = checker(a);
    if la == checker(b) {
        return Err(Error::NotBracketed);
    }
    let iterations = bisection_steps(dist(a, b), tol);
    let mut lo = a.to_vec();
    let mut hi = b.to_vec();
    let mut mid = vec![0.0; a.len()];
    for _ in 0..iterations {
        for i in 0..mid.len() {
            mid[i] = 0.5 * (lo[i] + hi[i]);
        }
        if checker(&mid) == la {
            lo.copy_from_slice(&mid);
        } else {
            hi.copy_from_slice(&mid);
        }
    }
    let boundary = lo.iter().zip(&hi).map(|(x, y)| 0.5 * (x + y)).collect();
    let (free, colliding) = if la { (hi, lo) } else { (lo, hi) };
    Ok(MinedBoundary {
        boundary,
        free,
        colliding,
        iterations,
    })
}

/// Distance and direction from a boundary point: `value = ±|q - q_b|` with the
/// minus sign for colliding `q`, and `grad = (q - q_b) / |q - q_b|` for either
/// label.
pub fn ground_truth(q: &[f64], q_boundary: &[f64], colliding: bool) -> Result<(f64, Vec<f64>)> {
    Error::check_dim(q.len(), q_boundary.len())?;
    let d = dist(q, q_boundary);
    if !(d > 0.0) {
        return Err(Error::ZeroDistance);
    }
    let grad = q.iter().zip(q_boundary).map(|(x, b)| (x - b) / d).collect();
    Ok((if colliding { -d } else { d }, grad))
}

/// Finds the nearest configuration of the opposite class, bisects towards it
/// and inserts both bracket ends into the index of their class. A stale
/// nearest neighbor (same label as `q`) triggers one re-query.
pub fn mine_boundary(
    free_index: &mut dyn NeighborIndex,
    col_index: &mut dyn NeighborIndex,
    q: &[f64],
    colliding: bool,
    checker: impl Fn(&[f64]) -> bool,
    tol: f64,
) -> Result<MinedBoundary> {
    let other = {
        let opposite: &dyn NeighborIndex = if colliding { &*free_index } else { &*col_index };
        if opposite.is_empty() {
            return Err(Error::EmptyIndex);
        }
        opposite
            .nearest(q, 2)?
            .into_iter()
            .map(|(id, _)| opposite.point(id).to_vec())
            .find(|o| checker(o) != colliding)
            .ok_or(Error::NotBracketed)?
    };
    let mined = if colliding {
        bisect(&other, q, &checker, tol)?
    } else {
        bisect(q, &other, &checker, tol)?
    };
    free_index.insert(&mined.free)?;
    col_index.insert(&mined.colliding)?;
    Ok(mined)
}

/// Signed distance estimate from labeled samples: bisects towards the `k`
/// nearest samples of the opposite class and keeps the closest crossing.
pub struct BoundaryOracle<C> {
    free: Box<dyn NeighborIndex>,
    col: Box<dyn NeighborIndex>,
    checker: C,
    pub tol: f64,
    pub candidates: usize,
}

/// Result of a [`BoundaryOracle`] query. `grad` is the gradient of `value`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryEstimate {
    pub value: f64,
    pub grad: Vec<f64>,
    pub colliding: bool,
    pub boundary: Vec<f64>,
}

impl<C: Fn(&[f64]) -> bool + Sync> BoundaryOracle<C> {
    pub fn new(kind: IndexKind, dim: usize, checker: C, seed: u64) -> Self {
        BoundaryOracle {
            free: new_index(kind, dim, seed),
            col: new_index(kind, dim, seed ^ 0xc01),
            checker,
            tol: DEFAULT_TOLERANCE,
            candidates: 4,
        }
    }

    pub fn is_colliding(&self, q: &[f64]) -> bool {
        (self.checker)(q)
    }

    pub fn counts(&self) -> (usize, usize) {
        (self.free.len(), self.col.len())
    }

    pub fn insert(&mut self, q: &[f64], colliding: bool) -> Result<()> {
        if colliding {
            self.col.insert(q)?;
        } else {
            self.free.insert(q)?;
        }
        Ok(())
    }

    /// Mines one boundary crossing starting from a labeled sample.
    pub fn mine(&mut self, q: &[f64], colliding: bool) -> Result<MinedBoundary> {
        mine_boundary(self.free.as_mut(), self.col.as_mut(), q, colliding, &self.checker, self.tol)
    }

    /// `None` when no opposite-class sample brackets a crossing.
    pub fn estimate(&self, q: &[f64]) -> Result<Option<BoundaryEstimate>> {
        let colliding = (self.checker)(q);
        let opposite = if colliding { &self.free } else { &self.col };
        if opposite.is_empty() {
            return Ok(None);
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for (id, _) in opposite.nearest(q, self.candidates.max(1))? {
            let other = opposite.point(id);
            let m = match bisect(q, other, &self.checker, self.tol) {
                Ok(m) => m,
                Err(Error::NotBracketed) => continue,
                Err(e) => return Err(e),
            };
            let d = dist(q, &m.boundary);
            if d > 0.0 && best.as_ref().map_or(true, |(bd, _)| d < *bd) {
                best = Some((d, m.boundary));
            }
        }
        let Some((_, boundary)) = best else { return Ok(None) };
        let (value, mut grad) = ground_truth(q, &boundary, colliding)?;
        if colliding {
            grad.iter_mut().for_each(|g| *g = -*g);
        }
        Ok(Some(BoundaryEstimate {
            value,
            grad,
            colliding,
            boundary,
        }))
    }
}
