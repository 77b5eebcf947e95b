//! Training data: sampled configurations, boundary mining, spatial hashing
//! and the CSD1 dataset format.

pub mod mining;
pub mod pipeline;
pub mod sampling;
pub mod voxel;

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::robot::{RobotModel, WorkspaceBox};

pub use mining::{bisect, ground_truth, mine_boundary, BoundaryOracle, MinedBoundary};
pub use pipeline::{
    generate_external, generate_self_collision, mix_datasets, ExternalConfig, SelfCollisionConfig, SelfCollisionData,
    SelfVariant,
};
pub use sampling::{balance_classes, sample_base_configs, BalanceParams, LabeledConfig};
pub use voxel::{build_voxel_map, VoxelConfigMap, VoxelGrid};

pub const DATASET_MAGIC: &[u8; 4] = b"CSD1";
pub const DATASET_VERSION: u32 = 1;

/// Width of the band around the collision boundary used by BSR and FPR (rad).
pub const BOUNDARY_BAND: f64 = 0.05;

/// One training tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub value: f64,
    /// True when in collision.
    pub label: bool,
    /// Unit gradient of `value` with respect to q.
    pub grad: Vec<f64>,
}

impl FieldSample {
    /// Sign/label agreement and unit gradient.
    pub fn check(&self) -> Result<()> {
        if !self.value.is_finite() || self.value == 0.0 {
            return Err(Error::invalid("sample value must be finite and non-zero"));
        }
        if (self.value < 0.0) != self.label {
            return Err(Error::invalid(format!("sample value {} disagrees with label {}", self.value, self.label)));
        }
        let n = self.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("sample gradient norm {n} is not 1")));
        }
        Ok(())
    }
}

/// A dataset with its dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dof: usize,
    pub point_dim: usize,
    pub samples: Vec<FieldSample>,
}

impl Dataset {
    pub fn new(dof: usize, point_dim: usize, samples: Vec<FieldSample>) -> Result<Self> {
        for s in &samples {
            Error::check_dim(dof, s.q.len())?;
            Error::check_dim(point_dim, s.p.len())?;
            Error::check_dim(dof, s.grad.len())?;
        }
        Ok(Dataset { dof, point_dim, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.dof as u32).to_le_bytes())?;
        w.write_all(&(self.point_dim as u32).to_le_bytes())?;
        w.write_all(&(self.samples.len() as u64).to_le_bytes())?;
        for s in &self.samples {
            for v in s.q.iter().chain(&s.p).chain(std::iter::once(&s.value)) {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&[s.label as u8])?;
            for v in &s.grad {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let eof = |e: std::io::Error| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format("dataset is truncated".into())
            } else {
                Error::Io(e)
            }
        };
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4).map_err(eof)?;
        if &b4 != DATASET_MAGIC {
            return Err(Error::Format("not a CSD1 dataset".into()));
        }
        r.read_exact(&mut b4).map_err(eof)?;
        let version = u32::from_le_bytes(b4);
        if version != DATASET_VERSION {
            return Err(Error::Version {
                found: version,
                supported: DATASET_VERSION,
            });
        }
        r.read_exact(&mut b4).map_err(eof)?;
        let dof = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4).map_err(eof)?;
        let point_dim = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8).map_err(eof)?;
        let count = u64::from_le_bytes(b8) as usize;
        if dof == 0 || dof > 64 || !(2..=3).contains(&point_dim) {
            return Err(Error::Format("implausible dataset header".into()));
        }
        let rec = 8 * (2 * dof + point_dim + 1) + 1;
        let mut buf = vec![0u8; rec];
        let mut samples = Vec::with_capacity(count.min(1 << 24));
        for _ in 0..count {
            r.read_exact(&mut buf).map_err(eof)?;
            let f = |i: usize| f64::from_le_bytes(buf[8 * i..8 * i + 8].try_into().expect("8 bytes"));
            let q = (0..dof).map(f).collect();
            let p = (dof..dof + point_dim).map(f).collect();
            let value = f(dof + point_dim);
            let lb = buf[8 * (dof + point_dim + 1)];
            if lb > 1 {
                return Err(Error::Format(format!("invalid label byte {lb}")));
            }
            let off = 8 * (dof + point_dim + 1) + 1;
            let grad = (0..dof)
                .map(|i| f64::from_le_bytes(buf[off + 8 * i..off + 8 * i + 8].try_into().expect("8 bytes")))
                .collect();
            samples.push(FieldSample {
                q,
                p,
                value,
                label: lb == 1,
                grad,
            });
        }
        Ok(Dataset { dof, point_dim, samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// CSV mirror: q_*, p_*, value, label, g_*.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let mut cols: Vec<String> = (1..=self.dof).map(|i| format!("q{i}")).collect();
        cols.extend((1..=self.point_dim).map(|i| format!("p{i}")));
        cols.push("value".into());
        cols.push("label".into());
        cols.extend((1..=self.dof).map(|i| format!("g{i}")));
        s.push_str(&cols.join(","));
        s.push('\n');
        for smp in &self.samples {
            let mut row: Vec<String> = smp.q.iter().chain(&smp.p).map(|v| v.to_string()).collect();
            row.push(smp.value.to_string());
            row.push((smp.label as u8).to_string());
            row.extend(smp.grad.iter().map(|v| v.to_string()));
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats::of(&self.samples)
    }
}

/// Summary figures reported after generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub count: usize,
    pub colliding: usize,
    /// Share of the larger class (%).
    pub class_ratio: f64,
    /// Share of samples within the boundary band (%).
    pub bsr: f64,
    pub band: f64,
}

impl DatasetStats {
    pub fn of(samples: &[FieldSample]) -> Self {
        let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
        let values: Vec<f64> = samples.iter().map(|s| s.value).collect();
        DatasetStats {
            count: samples.len(),
            colliding: labels.iter().filter(|l| **l).count(),
            class_ratio: class_ratio(&labels),
            bsr: boundary_sample_ratio(&values, BOUNDARY_BAND),
            band: BOUNDARY_BAND,
        }
    }
}

/// Percentage of values with |value| <= band.
pub fn boundary_sample_ratio(values: &[f64], band: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    100.0 * values.iter().filter(|v| v.abs() <= band).count() as f64 / values.len() as f64
}

/// Share of the larger class, in percent.
pub fn class_ratio(labels: &[bool]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let c = labels.iter().filter(|l| **l).count();
    100.0 * c.max(labels.len() - c) as f64 / labels.len() as f64
}

/// Virtual obstacle points for self-collision samples: uniform in the
/// extended workspace box, with `outside_fraction` of them redrawn until they
/// fall outside the reachable ball.
pub fn make_self_collision_points(
    model: &RobotModel,
    bounds: &WorkspaceBox,
    count: usize,
    outside_fraction: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return Err(Error::invalid("need at least one point"));
    }
    if !(0.0..=1.0).contains(&outside_fraction) {
        return Err(Error::invalid("outside fraction must be in [0, 1]"));
    }
    let reach = model.reach();
    let base = model.base_position();
    let w = bounds.dim();
    let outside_ok = (0..w).any(|a| (bounds.max[a] - base[a]).max(base[a] - bounds.min[a]) > reach);
    if outside_fraction > 0.0 && !outside_ok {
        return Err(Error::invalid("workspace box lies inside the reachable ball"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let force = rng.gen::<f64>() < outside_fraction;
        loop {
            let p: Vec<f64> = (0..w).map(|a| rng.gen_range(bounds.min[a]..bounds.max[a])).collect();
            let r2: f64 = p.iter().enumerate().map(|(a, x)| (x - base[a]).powi(2)).sum();
            if !force || r2.sqrt() > reach {
                out.push(p);
                break;
            }
        }
    }
    Ok(out)
}
