//! Spatial hash from workspace voxels to the sampled configurations whose
//! spheres touch them.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::robot::{RobotModel, Sphere, WorkspaceBox};

/// Regular voxelization of a workspace box.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub origin: Vec<f64>,
    pub resolution: f64,
    pub counts: Vec<usize>,
}

impl VoxelGrid {
    pub fn new(bounds: &WorkspaceBox, resolution: f64) -> Result<Self> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(Error::invalid("voxel resolution must be positive"));
        }
        let counts: Vec<usize> = (0..bounds.dim())
            .map(|a| (((bounds.max[a] - bounds.min[a]) / resolution).ceil() as usize).max(1))
            .collect();
        if counts.iter().try_fold(1u64, |acc, c| acc.checked_mul(*c as u64)).map_or(true, |n| n > u32::MAX as u64) {
            return Err(Error::invalid("voxel grid too fine for the workspace box"));
        }
        Ok(VoxelGrid {
            origin: bounds.min.clone(),
            resolution,
            counts,
        })
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

    /// `floor((p - origin) / resolution)` per axis, unchecked.
    pub fn hash_raw(&self, p: &[f64]) -> Vec<i64> {
        p.iter()
            .zip(&self.origin)
            .map(|(x, o)| ((x - o) / self.resolution).floor() as i64)
            .collect()
    }

    /// Voxel index of `p`; the upper box face belongs to the last voxel.
    pub fn hash(&self, p: &[f64]) -> Result<Vec<usize>> {
        Error::check_dim(self.dim(), p.len())?;
        self.hash_raw(p)
            .into_iter()
            .enumerate()
            .map(|(a, i)| {
                let top = self.origin[a] + self.counts[a] as f64 * self.resolution;
                if i < 0 || p[a] > top || !p[a].is_finite() {
                    Err(Error::OutOfBounds(format!("point {p:?} outside the hashed box")))
                } else {
                    Ok((i as usize).min(self.counts[a] - 1))
                }
            })
            .collect()
    }

    pub fn flat(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.counts).fold(0, |acc, (i, n)| acc * n + i)
    }

    pub fn unflat(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for a in (0..self.dim()).rev() {
            idx[a] = flat % self.counts[a];
            flat /= self.counts[a];
        }
        idx
    }

    /// Closed box of voxel `idx`.
    pub fn voxel_bounds(&self, idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let lo: Vec<f64> = idx
            .iter()
            .zip(&self.origin)
            .map(|(i, o)| o + *i as f64 * self.resolution)
            .collect();
        let hi = lo.iter().map(|l| l + self.resolution).collect();
        (lo, hi)
    }

    /// Exact test of a sphere against voxel `idx` (closed sets, first `dim` axes).
    pub fn sphere_touches(&self, s: &Sphere, idx: &[usize]) -> bool {
        let (lo, hi) = self.voxel_bounds(idx);
        let d2: f64 = (0..self.dim())
            .map(|a| {
                let c = s.center[a];
                let e = c - c.clamp(lo[a], hi[a]);
                e * e
            })
            .sum();
        d2 <= s.radius * s.radius
    }

    /// Voxels whose closed box meets the sphere's bounding box.
    fn influence(&self, s: &Sphere) -> Option<Vec<(usize, usize)>> {
        let mut ranges = Vec::with_capacity(self.dim());
        for a in 0..self.dim() {
            let lo = ((s.center[a] - s.radius - self.origin[a]) / self.resolution).floor() as i64;
            let hi = ((s.center[a] + s.radius - self.origin[a]) / self.resolution).floor() as i64;
            if lo < 0 || hi > self.counts[a] as i64 || s.center[a] + s.radius > self.origin[a] + self.counts[a] as f64 * self.resolution {
                return None;
            }
            ranges.push((lo as usize, (hi as usize).min(self.counts[a] - 1)));
        }
        Some(ranges)
    }
}

/// Compressed voxel → configuration-id lists plus the configuration table.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelConfigMap {
    pub grid: VoxelGrid,
    configs: Vec<Vec<f64>>,
    keys: Vec<u32>,
    offsets: Vec<usize>,
    ids: Vec<u32>,
}

impl VoxelConfigMap {
    pub fn configs(&self) -> &[Vec<f64>] {
        &self.configs
    }

    pub fn config(&self, id: u32) -> &[f64] {
        &self.configs[id as usize]
    }

    /// Number of non-empty voxels.
    pub fn occupied(&self) -> usize {
        self.keys.len()
    }

    /// Total (voxel, configuration) entries.
    pub fn entries(&self) -> usize {
        self.ids.len()
    }

    /// Sorted ids registered for flat voxel `flat`.
    pub fn voxel(&self, flat: usize) -> &[u32] {
        match self.keys.binary_search(&(flat as u32)) {
            Ok(k) => &self.ids[self.offsets[k]..self.offsets[k + 1]],
            Err(_) => &[],
        }
    }

    /// Configurations whose spheres touch the voxel containing `p`.
    pub fn risk_configs(&self, p: &[f64]) -> Result<&[u32]> {
        let idx = self.grid.hash(p)?;
        Ok(self.voxel(self.grid.flat(&idx)))
    }
}

/// Builds the voxel map in parallel over configurations. For each sphere the
/// bounding-box voxel range is scanned and a configuration is registered in a
/// voxel only if the sphere truly meets it.
pub fn build_voxel_map(model: &RobotModel, configs: Vec<Vec<f64>>, bounds: &WorkspaceBox, resolution: f64) -> Result<VoxelConfigMap> {
    if configs.is_empty() {
        return Err(Error::invalid("voxel map needs at least one configuration"));
    }
    if configs.len() > u32::MAX as usize {
        return Err(Error::invalid("too many configurations"));
    }
    Error::check_dim(model.point_dim(), bounds.dim())?;
    let grid = VoxelGrid::new(bounds, resolution)?;
    let per_config: Vec<Vec<u64>> = configs
        .par_iter()
        .enumerate()
        .map(|(id, q)| {
            let spheres = model.forward_spheres(q)?;
            let mut out = Vec::new();
            let mut idx = vec![0usize; grid.dim()];
            for s in &spheres {
                let ranges = grid.influence(s).ok_or_else(|| {
                    Error::OutOfBounds(format!("configuration {id} ({q:?}) has a sphere outside the workspace box"))
                })?;
                scan(&grid, s, &ranges, 0, &mut idx, &mut |flat| out.push(((flat as u64) << 32) | id as u64));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut all: Vec<u64> = per_config.into_iter().flatten().collect();
    all.par_sort_unstable();
    all.dedup();
    let mut keys = Vec::new();
    let mut offsets = Vec::new();
    let mut ids = Vec::with_capacity(all.len());
    for e in all {
        let key = (e >> 32) as u32;
        if keys.last() != Some(&key) {
            keys.push(key);
            offsets.push(ids.len());
        }
        ids.push(e as u32);
    }
    offsets.push(ids.len());
    Ok(VoxelConfigMap {
        grid,
        configs,
        keys,
        offsets,
        ids,
    })
}

fn scan(grid: &VoxelGrid, s: &Sphere, ranges: &[(usize, usize)], axis: usize, idx: &mut Vec<usize>, emit: &mut impl FnMut(usize)) {
    if axis == ranges.len() {
        if grid.sphere_touches(s, idx) {
            emit(grid.flat(idx));
        }
        return;
    }
    for i in ranges[axis].0..=ranges[axis].1 {
        idx[axis] = i;
        scan(grid, s, ranges, axis + 1, idx, emit);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arm() -> RobotModel {
        RobotModel::planar_benchmark()
    }

    fn configs(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)])
            .collect()
    }

    #[test]
    fn hash_arithmetic() {
        let b = WorkspaceBox {
            min: vec![-1.0, -1.0],
            max: vec![1.0, 1.0],
        };
        let g = VoxelGrid::new(&b, 0.1).unwrap();
        assert_eq!(g.counts, vec![20, 20]);
        assert_eq!(g.hash(&[-1.0, -1.0]).unwrap(), vec![0, 0]);
        assert_eq!(g.hash(&[-1.0 + 0.25, -1.0 + 0.01]).unwrap(), vec![2, 0]);
        assert_eq!(g.hash(&[1.0, 1.0]).unwrap(), vec![19, 19]);
        assert!(matches!(g.hash(&[1.5, 0.0]), Err(Error::OutOfBounds(_))));
        assert_eq!(g.unflat(g.flat(&[3, 7])), vec![3, 7]);
    }

    #[test]
    fn matches_brute_force() {
        let m = arm();
        let b = m.workspace_bounds(1.2).unwrap();
        let cs = configs(100, 1);
        let res = 2.0 * b.max[0] / 50.0;
        let map = build_voxel_map(&m, cs.clone(), &b, res).unwrap();
        assert_eq!(map.grid.counts, vec![50, 50]);
        for flat in 0..map.grid.len() {
            let idx = map.grid.unflat(flat);
            let expect: Vec<u32> = cs
                .iter()
                .enumerate()
                .filter(|(_, q)| m.forward_spheres(q).unwrap().iter().any(|s| map.grid.sphere_touches(s, &idx)))
                .map(|(i, _)| i as u32)
                .collect();
            assert_eq!(map.voxel(flat), &expect[..], "voxel {idx:?}");
        }
    }

    #[test]
    fn order_independent() {
        let m = arm();
        let b = m.workspace_bounds(1.5).unwrap();
        let cs = configs(200, 2);
        let mut perm: Vec<usize> = (0..cs.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| cs[i].clone()).collect();
        let a = build_voxel_map(&m, cs, &b, 0.2).unwrap();
        let s = build_voxel_map(&m, shuffled, &b, 0.2).unwrap();
        for flat in 0..a.grid.len() {
            let mut remapped: Vec<u32> = s.voxel(flat).iter().map(|&i| perm[i as usize] as u32).collect();
            remapped.sort_unstable();
            assert_eq!(remapped, a.voxel(flat));
        }
    }

    #[test]
    fn risk_query_properties() {
        let m = arm();
        let b = m.workspace_bounds(1.5).unwrap();
        let map = build_voxel_map(&m, configs(300, 4), &b, 0.2).unwrap();
        // a corner of the extended box is out of reach
        assert!(map.risk_configs(&[b.min[0] + 0.01, b.min[1] + 0.01]).unwrap().is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bound = 0.2 * 2f64.sqrt() + 0.2;
        for _ in 0..200 {
            let p = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
            let idx = map.grid.hash(&p).unwrap();
            for &id in map.risk_configs(&p).unwrap() {
                let sp = m.forward_spheres(map.config(id)).unwrap();
                assert!(sp.iter().any(|s| ((s.center[0] - p[0]).powi(2) + (s.center[1] - p[1]).powi(2)).sqrt() <= bound + 1e-12));
                assert!(sp.iter().any(|s| map.grid.sphere_touches(s, &idx)));
            }
        }
        assert!(matches!(map.risk_configs(&[100.0, 0.0]), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn sphere_outside_box_names_configuration() {
        let m = arm();
        let small = WorkspaceBox {
            min: vec![-1.0, -1.0],
            max: vec![1.0, 1.0],
        };
        match build_voxel_map(&m, vec![vec![0.0, 0.0]], &small, 0.1) {
            Err(Error::OutOfBounds(msg)) => assert!(msg.contains("configuration 0")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
