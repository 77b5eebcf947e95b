//! Distance-field backends used by planning and control: the grid oracle and
//! the learned model queried against a scene point cloud.

use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::field::FieldModel;
use crate::geometry::grid::{oracle_scene_distance, CSpaceGrid, GridSpec};
use crate::geometry::{aggregate_index, Scene};
use crate::robot::RobotModel;

/// One distance candidate: signed value and gradient with respect to q.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

pub trait DistanceField: Sync {
    fn dof(&self) -> usize;

    /// Per-source candidates at time `t` (one per obstacle point, or a single
    /// combined value). Never empty.
    fn candidates(&self, q: &[f64], t: f64) -> Result<Vec<FieldValue>>;

    /// Aggregated signed distance over all candidates.
    fn distance(&self, q: &[f64], t: f64) -> Result<FieldValue> {
        let c = self.candidates(q, t)?;
        let values: Vec<f64> = c.iter().map(|v| v.value).collect();
        let i = aggregate_index(&values)?;
        Ok(c.into_iter().nth(i).expect("index in range"))
    }
}

/// Multilinear interpolation of the exact grid oracle for a scene. Grids of
/// moving scenes are rebuilt per queried time (last two cached).
pub struct OracleField {
    model: RobotModel,
    scene: Scene,
    spec: GridSpec,
    moving: bool,
    cache: Mutex<Vec<(f64, Arc<CSpaceGrid>)>>,
}

impl OracleField {
    pub fn new(model: RobotModel, scene: Scene, cells: usize) -> Result<Self> {
        scene.validate(model.point_dim())?;
        let spec = GridSpec::over_limits(&model, cells);
        let moving = scene.obstacles.iter().any(|o| o.velocity().is_some_and(|v| v.iter().any(|x| *x != 0.0)));
        Ok(OracleField {
            model,
            scene,
            spec,
            moving,
            cache: Mutex::new(Vec::new()),
        })
    }

    pub fn model(&self) -> &RobotModel {
        &self.model
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    /// Grid at time `t` (time is ignored for static scenes).
    pub fn grid(&self, t: f64) -> Result<Arc<CSpaceGrid>> {
        let key = if self.moving { t } else { 0.0 };
        let mut cache = self.cache.lock().expect("grid cache poisoned");
        if let Some((_, g)) = cache.iter().find(|(kt, _)| (kt - key).abs() <= 1e-9) {
            return Ok(g.clone());
        }
        let g = Arc::new(oracle_scene_distance(&self.model, &self.spec, &self.scene, key)?);
        if cache.len() == 2 {
            cache.remove(0);
        }
        cache.push((key, g.clone()));
        Ok(g)
    }
}

impl DistanceField for OracleField {
    fn dof(&self) -> usize {
        self.model.dof()
    }

    fn candidates(&self, q: &[f64], t: f64) -> Result<Vec<FieldValue>> {
        Error::check_dim(self.model.dof(), q.len())?;
        let (value, grad) = self.grid(t)?.interpolate(q);
        Ok(vec![FieldValue { value, grad }])
    }
}

/// Learned field evaluated against the scene's point cloud. With no obstacle
/// points a virtual point outside the reachable region yields the
/// self-collision distance alone.
pub struct LearnedField {
    model: FieldModel,
    scene: Scene,
    spacing: f64,
    virtual_point: Vec<f64>,
    static_cloud: Option<Vec<Vec<f64>>>,
}

impl LearnedField {
    pub fn new(model: FieldModel, scene: Scene, spacing: f64) -> Result<Self> {
        let w = model.point_dim();
        scene.validate(w)?;
        if !(spacing > 0.0) {
            return Err(Error::invalid("point-cloud spacing must be positive"));
        }
        // corner of the normalization box: farthest from the robot base
        let virtual_point = model.spec().p_upper.clone();
        let moving = scene.obstacles.iter().any(|o| o.velocity().is_some_and(|v| v.iter().any(|x| *x != 0.0)));
        let static_cloud = (!moving).then(|| scene.point_cloud(0.0, spacing, w));
        Ok(LearnedField {
            model,
            scene,
            spacing,
            virtual_point,
            static_cloud,
        })
    }

    pub fn model(&self) -> &FieldModel {
        &self.model
    }

    pub fn points(&self, t: f64) -> Vec<Vec<f64>> {
        let pts = match &self.static_cloud {
            Some(c) => c.clone(),
            None => self.scene.point_cloud(t, self.spacing, self.model.point_dim()),
        };
        if pts.is_empty() {
            vec![self.virtual_point.clone()]
        } else {
            pts
        }
    }
}

impl DistanceField for LearnedField {
    fn dof(&self) -> usize {
        self.model.dof()
    }

    fn candidates(&self, q: &[f64], t: f64) -> Result<Vec<FieldValue>> {
        let pts = self.points(t);
        let n = self.model.dof();
        let (v, g) = self.model.predict_points_with_grad(q, &pts)?;
        if v.iter().chain(&g).any(|x| !x.is_finite()) {
            return Err(Error::Optimization("field returned non-finite values".into()));
        }
        Ok(v
            .iter()
            .enumerate()
            .map(|(i, value)| FieldValue {
                value: *value,
                grad: g[i * n..(i + 1) * n].to_vec(),
            })
            .collect())
    }
}
