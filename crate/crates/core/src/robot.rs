//! Serial-chain revolute robots with sphere-cluster collision geometry.
//!
//! Every kinematic quantity is computed in 3-D. Planar robots (`point_dim == 2`)
//! are restricted to z-axis joints and in-plane offsets, and their workspace
//! points simply drop the z coordinate.

use nalgebra::{Isometry3, Point3, Translation3, Unit, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ROBOT_SCHEMA_VERSION: u32 = 1;

/// Default number of spheres used when a link is described as a capsule.
pub const DEFAULT_SPHERES_PER_LINK: usize = 5;

/// Default scale of the extended workspace around the reachable set.
pub const DEFAULT_WORKSPACE_EXTENSION: f64 = 1.5;

/// A world- or link-frame collision sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
}

impl Sphere {
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        dist2(&self.center, p) <= self.radius * self.radius
    }

    /// Signed distance from `p` to the sphere surface.
    pub fn signed_distance(&self, p: &[f64; 3]) -> f64 {
        dist2(&self.center, p).sqrt() - self.radius
    }

    pub fn overlaps(&self, other: &Sphere) -> bool {
        let r = self.radius + other.radius;
        dist2(&self.center, &other.center) < r * r
    }
}

#[inline]
pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[derive(Debug, Clone)]
pub struct Joint {
    /// Fixed transform from the previous link frame to this joint's frame.
    pub origin: Isometry3<f64>,
    pub axis: Unit<Vector3<f64>>,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone)]
pub struct LinkGeometry {
    pub parent_joint: usize,
    pub local_spheres: Vec<Sphere>,
}

/// Axis-aligned workspace box.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkspaceBox {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl WorkspaceBox {
    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter()
            .zip(self.min.iter().zip(&self.max))
            .all(|(x, (lo, hi))| *x >= *lo && *x <= *hi)
    }

    pub fn half_widths(&self) -> Vec<f64> {
        self.min
            .iter()
            .zip(&self.max)
            .map(|(lo, hi)| 0.5 * (hi - lo))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct RobotModel {
    name: String,
    point_dim: usize,
    base: Isometry3<f64>,
    joints: Vec<Joint>,
    links: Vec<LinkGeometry>,
    /// Flattened (link, sphere) index pairs that are tested for self-collision.
    checked_pairs: Vec<(usize, usize)>,
    sphere_link: Vec<usize>,
}

impl RobotModel {
    pub fn new(
        name: impl Into<String>,
        point_dim: usize,
        base: Isometry3<f64>,
        joints: Vec<Joint>,
        links: Vec<LinkGeometry>,
    ) -> Result<Self> {
        if point_dim != 2 && point_dim != 3 {
            return Err(Error::invalid(format!("point_dim must be 2 or 3, got {point_dim}")));
        }
        if joints.is_empty() {
            return Err(Error::invalid("robot needs at least one joint"));
        }
        for (i, j) in joints.iter().enumerate() {
            if !(j.lower.is_finite() && j.upper.is_finite() && j.lower < j.upper) {
                return Err(Error::invalid(format!(
                    "joint {i}: limits must satisfy lower < upper, got [{}, {}]",
                    j.lower, j.upper
                )));
            }
            if point_dim == 2 {
                let z = j.axis.into_inner();
                let t = j.origin.translation.vector;
                let planar_rot = j.origin.rotation.axis().map_or(true, |a| {
                    a.x.abs() < 1e-12 && a.y.abs() < 1e-12
                });
                if z.x.abs() > 1e-12 || z.y.abs() > 1e-12 || t.z.abs() > 1e-12 || !planar_rot {
                    return Err(Error::invalid(format!(
                        "joint {i}: planar robots need z-axis joints and in-plane origins"
                    )));
                }
            }
        }
        if links.is_empty() {
            return Err(Error::invalid("robot needs at least one link"));
        }
        let mut sphere_link = Vec::new();
        for (li, link) in links.iter().enumerate() {
            if link.parent_joint >= joints.len() {
                return Err(Error::invalid(format!(
                    "link {li}: parent joint {} does not exist",
                    link.parent_joint
                )));
            }
            if link.local_spheres.is_empty() {
                return Err(Error::invalid(format!("link {li} has no collision spheres")));
            }
            for s in &link.local_spheres {
                if !(s.radius > 0.0 && s.radius.is_finite()) {
                    return Err(Error::invalid(format!("link {li}: sphere radius must be > 0")));
                }
                if s.center.iter().any(|c| !c.is_finite()) {
                    return Err(Error::invalid(format!("link {li}: sphere center not finite")));
                }
                if point_dim == 2 && s.center[2] != 0.0 {
                    return Err(Error::invalid(format!("link {li}: planar sphere with z != 0")));
                }
                sphere_link.push(li);
            }
        }
        let mut model = RobotModel {
            name: name.into(),
            point_dim,
            base,
            joints,
            links,
            checked_pairs: Vec::new(),
            sphere_link,
        };
        model.checked_pairs = model.compute_checked_pairs();
        Ok(model)
    }

    /// Planar arm with `lengths.len()` revolute z-joints, each link a capsule of
    /// `spheres_per_link` evenly spaced spheres from joint to link tip.
    pub fn planar(lengths: &[f64], radius: f64, spheres_per_link: usize, limit: f64) -> Result<Self> {
        if spheres_per_link == 0 {
            return Err(Error::invalid("spheres_per_link must be >= 1"));
        }
        let mut joints = Vec::new();
        let mut links = Vec::new();
        for (i, &len) in lengths.iter().enumerate() {
            let offset = if i == 0 { 0.0 } else { lengths[i - 1] };
            joints.push(Joint {
                origin: Isometry3::translation(offset, 0.0, 0.0),
                axis: Vector3::z_axis(),
                lower: -limit,
                upper: limit,
            });
            links.push(LinkGeometry {
                parent_joint: i,
                local_spheres: capsule_spheres([0.0; 3], [len, 0.0, 0.0], radius, spheres_per_link),
            });
        }
        RobotModel::new(
            format!("planar{}", lengths.len()),
            2,
            Isometry3::identity(),
            joints,
            links,
        )
    }

    /// The 2-DoF planar arm used by the desk-scale benchmarks: two 2 m links,
    /// 0.2 m spheres, joints over [-pi, pi].
    pub fn planar_benchmark() -> Self {
        RobotModel::planar(&[2.0, 2.0], 0.2, DEFAULT_SPHERES_PER_LINK, std::f64::consts::PI)
            .expect("builtin planar arm is valid")
    }

    /// A 7-DoF arm with Franka-Panda-like modified DH parameters and capsule links.
    pub fn panda_like() -> Self {
        use std::f64::consts::FRAC_PI_2;
        // (a, d, alpha) for joints 1..7, then the flange.
        let dh = [
            (0.0, 0.333, 0.0),
            (0.0, 0.0, -FRAC_PI_2),
            (0.0, 0.316, FRAC_PI_2),
            (0.0825, 0.0, FRAC_PI_2),
            (-0.0825, 0.384, -FRAC_PI_2),
            (0.0, 0.0, FRAC_PI_2),
            (0.088, 0.0, FRAC_PI_2),
        ];
        let limits = [
            (-2.8973, 2.8973),
            (-1.7628, 1.7628),
            (-2.8973, 2.8973),
            (-3.0718, -0.0698),
            (-2.8973, 2.8973),
            (-0.0175, 3.7525),
            (-2.8973, 2.8973),
        ];
        let radii = [0.08, 0.08, 0.07, 0.07, 0.06, 0.06, 0.05];
        let origin = |a: f64, d: f64, alpha: f64| {
            Isometry3::from_parts(
                Translation3::new(a, -d * alpha.sin(), d * alpha.cos()),
                UnitQuaternion::from_euler_angles(alpha, 0.0, 0.0),
            )
        };
        let joints: Vec<Joint> = dh
            .iter()
            .zip(limits)
            .map(|(&(a, d, alpha), (lo, hi))| Joint {
                origin: origin(a, d, alpha),
                axis: Vector3::z_axis(),
                lower: lo,
                upper: hi,
            })
            .collect();
        let flange = Vector3::new(0.0, 0.0, 0.107);
        let links = (0..7)
            .map(|i| {
                let tip = if i + 1 < 7 {
                    joints[i + 1].origin.translation.vector
                } else {
                    flange
                };
                LinkGeometry {
                    parent_joint: i,
                    local_spheres: capsule_spheres([0.0; 3], [tip.x, tip.y, tip.z], radii[i], 3),
                }
            })
            .collect();
        RobotModel::new("panda_like", 3, Isometry3::identity(), joints, links)
            .expect("builtin 7-dof arm is valid")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn point_dim(&self) -> usize {
        self.point_dim
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn links(&self) -> &[LinkGeometry] {
        &self.links
    }

    pub fn base(&self) -> &Isometry3<f64> {
        &self.base
    }

    pub fn sphere_count(&self) -> usize {
        self.sphere_link.len()
    }

    /// Link index owning each flattened sphere.
    pub fn sphere_links(&self) -> &[usize] {
        &self.sphere_link
    }

    pub fn lower_limits(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.lower).collect()
    }

    pub fn upper_limits(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.upper).collect()
    }

    /// Extended joint box `[min(-pi, q_min), max(pi, q_max)]` used for sampling
    /// and input normalization.
    pub fn extended_limits(&self) -> (Vec<f64>, Vec<f64>) {
        let pi = std::f64::consts::PI;
        (
            self.joints.iter().map(|j| j.lower.min(-pi)).collect(),
            self.joints.iter().map(|j| j.upper.max(pi)).collect(),
        )
    }

    pub fn within_limits(&self, q: &[f64]) -> bool {
        q.iter()
            .zip(&self.joints)
            .all(|(x, j)| *x >= j.lower && *x <= j.upper)
    }

    /// Signed distance of `q` to the boundary of the joint-limit box: positive
    /// inside, negative (minus the Euclidean distance to the box) outside.
    pub fn limit_distance(&self, q: &[f64]) -> f64 {
        if self.within_limits(q) {
            q.iter()
                .zip(&self.joints)
                .map(|(x, j)| (x - j.lower).min(j.upper - x))
                .fold(f64::INFINITY, f64::min)
        } else {
            -q.iter()
                .zip(&self.joints)
                .map(|(x, j)| {
                    let e = (j.lower - x).max(x - j.upper).max(0.0);
                    e * e
                })
                .sum::<f64>()
                .sqrt()
        }
    }

    /// World transform of every joint frame (after its rotation) for `q`.
    pub fn joint_frames(&self, q: &[f64]) -> Result<Vec<Isometry3<f64>>> {
        Error::check_dim(self.dof(), q.len())?;
        if q.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("configuration has non-finite entries"));
        }
        let mut frames = Vec::with_capacity(self.dof());
        let mut t = self.base;
        for (j, &angle) in self.joints.iter().zip(q) {
            t = t * j.origin * UnitQuaternion::from_axis_angle(&j.axis, angle);
            frames.push(t);
        }
        Ok(frames)
    }

    /// World-frame collision spheres for `q`, in flattened link order.
    pub fn forward_spheres(&self, q: &[f64]) -> Result<Vec<Sphere>> {
        let mut out = Vec::with_capacity(self.sphere_count());
        self.forward_spheres_into(q, &mut out)?;
        Ok(out)
    }

    pub fn forward_spheres_into(&self, q: &[f64], out: &mut Vec<Sphere>) -> Result<()> {
        let frames = self.joint_frames(q)?;
        out.clear();
        for link in &self.links {
            let f = &frames[link.parent_joint];
            for s in &link.local_spheres {
                let c = f * Point3::from(s.center);
                out.push(Sphere {
                    center: [c.x, c.y, c.z],
                    radius: s.radius,
                });
            }
        }
        Ok(())
    }

    /// Upper bound on the distance from the base origin to any point of the
    /// robot's sphere geometry.
    pub fn reach(&self) -> f64 {
        let mut chain = Vec::with_capacity(self.dof());
        let mut acc = 0.0;
        for j in &self.joints {
            acc += j.origin.translation.vector.norm();
            chain.push(acc);
        }
        self.links
            .iter()
            .flat_map(|l| {
                let base = chain[l.parent_joint];
                l.local_spheres
                    .iter()
                    .map(move |s| base + Vector3::from(s.center).norm() + s.radius)
            })
            .fold(0.0, f64::max)
    }

    /// Box of half-width `extension * reach` around the base (first `point_dim` axes).
    pub fn workspace_bounds(&self, extension: f64) -> Result<WorkspaceBox> {
        if !(extension >= 1.0) {
            return Err(Error::invalid(format!("workspace extension must be >= 1, got {extension}")));
        }
        let half = extension * self.reach();
        let c = self.base.translation.vector;
        Ok(WorkspaceBox {
            min: (0..self.point_dim).map(|a| c[a] - half).collect(),
            max: (0..self.point_dim).map(|a| c[a] + half).collect(),
        })
    }

    /// Base position as a 3-vector.
    pub fn base_position(&self) -> [f64; 3] {
        let c = self.base.translation.vector;
        [c.x, c.y, c.z]
    }

    /// Converts a `point_dim`-length workspace point to 3-D.
    pub fn lift_point(&self, p: &[f64]) -> Result<[f64; 3]> {
        Error::check_dim(self.point_dim, p.len())?;
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("workspace point has non-finite entries"));
        }
        Ok(lift(p))
    }

    /// Sphere index pairs tested for self-collision.
    pub fn checked_pairs(&self) -> &[(usize, usize)] {
        &self.checked_pairs
    }

    /// Pairs on different rigid bodies, minus the pairs that overlap in every
    /// configuration (spheres straddling a shared joint, or structurally
    /// interpenetrating capsules). Adjacent links are otherwise checked, so a
    /// planar arm folding back onto itself does collide.
    fn compute_checked_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.sphere_count();
        let mut flat_local = Vec::with_capacity(n);
        for link in &self.links {
            for s in &link.local_spheres {
                flat_local.push((link.parent_joint, *s));
            }
        }
        // Configurations used to detect pairs that always overlap. Joint
        // endpoints are always included so adjacent-link sweeps are covered.
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_c0de);
        let mut probes: Vec<Vec<f64>> = Vec::new();
        for j in 0..self.dof() {
            for k in 0..=64 {
                let mut q: Vec<f64> = self.joints.iter().map(|jt| 0.5 * (jt.lower + jt.upper)).collect();
                let jt = &self.joints[j];
                q[j] = jt.lower + (jt.upper - jt.lower) * k as f64 / 64.0;
                probes.push(q);
            }
        }
        for _ in 0..256 {
            probes.push(
                self.joints
                    .iter()
                    .map(|jt| rng.gen_range(jt.lower..=jt.upper))
                    .collect(),
            );
        }
        let posed: Vec<Vec<Sphere>> = probes
            .iter()
            .map(|q| self.forward_spheres(q).expect("probe within dof"))
            .collect();
        let mut pairs = Vec::new();
        for a in 0..n {
            for b in (a + 1)..n {
                if flat_local[a].0 == flat_local[b].0 {
                    continue;
                }
                let always = posed.iter().all(|s| s[a].overlaps(&s[b]));
                if !always {
                    pairs.push((a, b));
                }
            }
        }
        pairs
    }

    pub fn to_description(&self) -> RobotDescription {
        let v3 = |v: &Vector3<f64>| -> Vec<f64> { v.iter().take(self.point_dim_for_vec()).copied().collect() };
        let pose = |iso: &Isometry3<f64>| {
            let (r, p, y) = iso.rotation.euler_angles();
            PoseDesc {
                xyz: v3(&iso.translation.vector),
                rpy: [r, p, y],
            }
        };
        RobotDescription {
            version: ROBOT_SCHEMA_VERSION,
            name: self.name.clone(),
            point_dim: self.point_dim,
            base: Some(pose(&self.base)),
            joints: self
                .joints
                .iter()
                .map(|j| JointDesc {
                    origin: Some(pose(&j.origin)),
                    axis: j.axis.into_inner().iter().copied().collect(),
                    limits: [j.lower, j.upper],
                })
                .collect(),
            links: self
                .links
                .iter()
                .map(|l| LinkDesc {
                    parent_joint: l.parent_joint,
                    spheres: l
                        .local_spheres
                        .iter()
                        .map(|s| SphereDesc {
                            center: s.center[..self.point_dim].to_vec(),
                            radius: s.radius,
                        })
                        .collect(),
                    capsule: None,
                })
                .collect(),
        }
    }

    fn point_dim_for_vec(&self) -> usize {
        self.point_dim
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let desc: RobotDescription = serde_json::from_str(text)?;
        desc.build()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_description()).expect("robot description serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

pub(crate) fn lift(p: &[f64]) -> [f64; 3] {
    let mut out = [0.0; 3];
    out[..p.len()].copy_from_slice(p);
    out
}

/// `count` evenly spaced spheres from `from` to `to` (both ends included).
pub fn capsule_spheres(from: [f64; 3], to: [f64; 3], radius: f64, count: usize) -> Vec<Sphere> {
    (0..count)
        .map(|i| {
            let t = if count == 1 { 0.5 } else { i as f64 / (count - 1) as f64 };
            Sphere {
                center: [
                    from[0] + t * (to[0] - from[0]),
                    from[1] + t * (to[1] - from[1]),
                    from[2] + t * (to[2] - from[2]),
                ],
                radius,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// JSON description
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotDescription {
    pub version: u32,
    #[serde(default)]
    pub name: String,
    pub point_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<PoseDesc>,
    pub joints: Vec<JointDesc>,
    pub links: Vec<LinkDesc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseDesc {
    /// Translation, `point_dim` or 3 entries (m).
    pub xyz: Vec<f64>,
    /// Roll, pitch, yaw (rad).
    #[serde(default)]
    pub rpy: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointDesc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<PoseDesc>,
    pub axis: Vec<f64>,
    /// `[lower, upper]` in rad.
    pub limits: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SphereDesc {
    pub center: Vec<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapsuleDesc {
    pub from: Vec<f64>,
    pub to: Vec<f64>,
    pub radius: f64,
    #[serde(default = "default_count")]
    pub count: usize,
}

fn default_count() -> usize {
    DEFAULT_SPHERES_PER_LINK
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkDesc {
    pub parent_joint: usize,
    #[serde(default)]
    pub spheres: Vec<SphereDesc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capsule: Option<CapsuleDesc>,
}

impl RobotDescription {
    pub fn build(&self) -> Result<RobotModel> {
        if self.version != ROBOT_SCHEMA_VERSION {
            return Err(Error::Version {
                found: self.version,
                supported: ROBOT_SCHEMA_VERSION,
            });
        }
        let w = self.point_dim;
        let vec3 = |v: &[f64], what: &str| -> Result<[f64; 3]> {
            if v.len() != w && v.len() != 3 {
                return Err(Error::Schema(format!("{what}: expected {w} or 3 coordinates, got {}", v.len())));
            }
            Ok(lift(v))
        };
        let pose = |p: &Option<PoseDesc>, what: &str| -> Result<Isometry3<f64>> {
            match p {
                None => Ok(Isometry3::identity()),
                Some(p) => {
                    let t = vec3(&p.xyz, what)?;
                    Ok(Isometry3::from_parts(
                        Translation3::new(t[0], t[1], t[2]),
                        UnitQuaternion::from_euler_angles(p.rpy[0], p.rpy[1], p.rpy[2]),
                    ))
                }
            }
        };
        let base = pose(&self.base, "base")?;
        let mut joints = Vec::new();
        for (i, j) in self.joints.iter().enumerate() {
            if j.axis.len() != 3 {
                return Err(Error::Schema(format!("joint {i}: axis must have 3 entries")));
            }
            let axis = Vector3::new(j.axis[0], j.axis[1], j.axis[2]);
            if axis.norm() < 1e-12 {
                return Err(Error::Schema(format!("joint {i}: zero axis")));
            }
            joints.push(Joint {
                origin: pose(&j.origin, &format!("joint {i} origin"))?,
                axis: Unit::new_normalize(axis),
                lower: j.limits[0],
                upper: j.limits[1],
            });
        }
        let mut links = Vec::new();
        for (i, l) in self.links.iter().enumerate() {
            let mut spheres = Vec::new();
            for s in &l.spheres {
                spheres.push(Sphere {
                    center: vec3(&s.center, &format!("link {i} sphere"))?,
                    radius: s.radius,
                });
            }
            if let Some(c) = &l.capsule {
                if c.count == 0 {
                    return Err(Error::Schema(format!("link {i}: capsule count must be >= 1")));
                }
                spheres.extend(capsule_spheres(
                    vec3(&c.from, "capsule from")?,
                    vec3(&c.to, "capsule to")?,
                    c.radius,
                    c.count,
                ));
            }
            links.push(LinkGeometry {
                parent_joint: l.parent_joint,
                local_spheres: spheres,
            });
        }
        RobotModel::new(self.name.clone(), w, base, joints, links)
    }
}
