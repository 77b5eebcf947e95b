//! Obstacle scenes: analytic primitives with optional constant velocity, plus
//! explicit obstacle points.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::robot::{dist2, lift, RobotModel, Sphere};

pub const SCENE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    /// Circle (planar) or sphere (spatial).
    #[serde(alias = "circle")]
    Sphere {
        center: Vec<f64>,
        radius: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        velocity: Option<Vec<f64>>,
    },
    /// Axis-aligned box; `extents` are full side lengths.
    Box {
        center: Vec<f64>,
        extents: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        velocity: Option<Vec<f64>>,
    },
}

impl Primitive {
    pub fn circle(center: [f64; 2], radius: f64) -> Self {
        Primitive::Sphere {
            center: center.to_vec(),
            radius,
            velocity: None,
        }
    }

    pub fn rect(center: [f64; 2], extents: [f64; 2]) -> Self {
        Primitive::Box {
            center: center.to_vec(),
            extents: extents.to_vec(),
            velocity: None,
        }
    }

    pub fn with_velocity(mut self, v: &[f64]) -> Self {
        match &mut self {
            Primitive::Sphere { velocity, .. } | Primitive::Box { velocity, .. } => *velocity = Some(v.to_vec()),
        }
        self
    }

    fn center(&self) -> &[f64] {
        match self {
            Primitive::Sphere { center, .. } | Primitive::Box { center, .. } => center,
        }
    }

    pub fn velocity(&self) -> Option<&[f64]> {
        match self {
            Primitive::Sphere { velocity, .. } | Primitive::Box { velocity, .. } => velocity.as_deref(),
        }
    }

    /// Centre at time `t` (s), as a 3-vector.
    pub fn center_at(&self, t: f64) -> [f64; 3] {
        let mut c = lift(self.center());
        if let Some(v) = self.velocity() {
            for (ci, vi) in c.iter_mut().zip(v) {
                *ci += vi * t;
            }
        }
        c
    }

    fn validate(&self, w: usize) -> Result<()> {
        let c = self.center();
        if c.len() != w || c.iter().any(|x| !x.is_finite()) {
            return Err(Error::Schema(format!("primitive centre must have {w} finite coordinates")));
        }
        if let Some(v) = self.velocity() {
            if v.len() != w || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Schema(format!("primitive velocity must have {w} finite coordinates")));
            }
        }
        match self {
            Primitive::Sphere { radius, .. } if !(*radius > 0.0) => {
                Err(Error::Schema("primitive radius must be > 0".into()))
            }
            Primitive::Box { extents, .. } if extents.len() != w || extents.iter().any(|e| !(*e > 0.0)) => {
                Err(Error::Schema(format!("box extents must be {w} positive values")))
            }
            _ => Ok(()),
        }
    }

    /// Signed workspace distance from `p` to the primitive at time `t`.
    pub fn signed_distance(&self, p: &[f64; 3], t: f64) -> f64 {
        let c = self.center_at(t);
        match self {
            Primitive::Sphere { radius, .. } => dist2(&c, p).sqrt() - radius,
            Primitive::Box { extents, .. } => {
                let mut outside = 0.0;
                let mut inside = f64::NEG_INFINITY;
                for a in 0..extents.len() {
                    let d = (p[a] - c[a]).abs() - 0.5 * extents[a];
                    outside += d.max(0.0).powi(2);
                    inside = inside.max(d);
                }
                if outside > 0.0 {
                    outside.sqrt()
                } else {
                    inside
                }
            }
        }
    }

    pub fn intersects_sphere(&self, s: &Sphere, t: f64) -> bool {
        self.signed_distance(&s.center, t) < s.radius
    }

    /// Boundary samples spaced roughly `spacing` apart (planar perimeter or
    /// spatial surface).
    pub fn surface_points(&self, t: f64, spacing: f64, w: usize) -> Vec<Vec<f64>> {
        let c = self.center_at(t);
        let mut out = Vec::new();
        match self {
            Primitive::Sphere { radius, .. } => {
                if w == 2 {
                    let n = ((2.0 * std::f64::consts::PI * radius / spacing).ceil() as usize).max(8);
                    for k in 0..n {
                        let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                        out.push(vec![c[0] + radius * a.cos(), c[1] + radius * a.sin()]);
                    }
                } else {
                    // Fibonacci sphere
                    let n = ((4.0 * std::f64::consts::PI * radius * radius / (spacing * spacing)).ceil() as usize).max(12);
                    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
                    for k in 0..n {
                        let z = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
                        let r = (1.0 - z * z).sqrt();
                        let th = golden * k as f64;
                        out.push(vec![c[0] + radius * r * th.cos(), c[1] + radius * r * th.sin(), c[2] + radius * z]);
                    }
                }
            }
            Primitive::Box { extents, .. } => {
                let steps: Vec<usize> = extents.iter().map(|e| ((e / spacing).ceil() as usize).max(1)).collect();
                // enumerate a lattice over the box and keep points on the boundary
                let total: usize = steps.iter().map(|s| s + 1).product();
                for flat in 0..total {
                    let mut rem = flat;
                    let mut p = Vec::with_capacity(w);
                    let mut on_face = false;
                    for a in 0..w {
                        let k = rem % (steps[a] + 1);
                        rem /= steps[a] + 1;
                        if k == 0 || k == steps[a] {
                            on_face = true;
                        }
                        p.push(c[a] - 0.5 * extents[a] + extents[a] * k as f64 / steps[a] as f64);
                    }
                    if on_face {
                        out.push(p);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default)]
    pub obstacles: Vec<Primitive>,
    /// Explicit obstacle points (each of length `point_dim`).
    #[serde(default)]
    pub points: Vec<Vec<f64>>,
}

fn default_version() -> u32 {
    SCENE_SCHEMA_VERSION
}

impl Default for Scene {
    fn default() -> Self {
        Scene::new(Vec::new())
    }
}

impl Scene {
    pub fn new(obstacles: Vec<Primitive>) -> Self {
        Scene {
            version: SCENE_SCHEMA_VERSION,
            obstacles,
            points: Vec::new(),
        }
    }

    pub fn from_points(points: Vec<Vec<f64>>) -> Self {
        Scene {
            version: SCENE_SCHEMA_VERSION,
            obstacles: Vec::new(),
            points,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.obstacles.is_empty() && self.points.is_empty()
    }

    pub fn validate(&self, point_dim: usize) -> Result<()> {
        if self.version != SCENE_SCHEMA_VERSION {
            return Err(Error::Version {
                found: self.version,
                supported: SCENE_SCHEMA_VERSION,
            });
        }
        for o in &self.obstacles {
            o.validate(point_dim)?;
        }
        for p in &self.points {
            if p.len() != point_dim || p.iter().any(|x| !x.is_finite()) {
                return Err(Error::Schema(format!("scene point must have {point_dim} finite coordinates")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str, point_dim: usize) -> Result<Self> {
        let s: Scene = serde_json::from_str(text)?;
        s.validate(point_dim)?;
        Ok(s)
    }

    pub fn load(path: &std::path::Path, point_dim: usize) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, point_dim)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    /// Whether the robot's spheres hit any obstacle (primitives or explicit
    /// points) at time `t`. Self-collision is not included.
    pub fn robot_collides(&self, spheres: &[Sphere], t: f64) -> bool {
        spheres.iter().any(|s| {
            self.obstacles.iter().any(|o| o.intersects_sphere(s, t))
                || self.points.iter().any(|p| s.contains(&lift(p)))
        })
    }

    /// Smallest workspace clearance between robot spheres and obstacles.
    pub fn clearance(&self, spheres: &[Sphere], t: f64) -> f64 {
        let mut best = f64::INFINITY;
        for s in spheres {
            for o in &self.obstacles {
                best = best.min(o.signed_distance(&s.center, t) - s.radius);
            }
            for p in &self.points {
                best = best.min(s.signed_distance(&lift(p)));
            }
        }
        best
    }

    /// Obstacle point cloud at time `t`: primitive surface samples plus the
    /// explicit points.
    pub fn point_cloud(&self, t: f64, spacing: f64, point_dim: usize) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self
            .obstacles
            .iter()
            .flat_map(|o| o.surface_points(t, spacing, point_dim))
            .collect();
        out.extend(self.points.iter().cloned());
        out
    }
}

/// Full collision oracle: self-collision (limits included) or scene contact.
pub fn in_collision(model: &RobotModel, scene: &Scene, q: &[f64], t: f64) -> Result<bool> {
    if !model.within_limits(q) {
        Error::check_dim(model.dof(), q.len())?;
        return Ok(true);
    }
    let spheres = model.forward_spheres(q)?;
    Ok(super::spheres_self_collide(model, &spheres) || scene.robot_collides(&spheres, t))
}
