use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cssdf::bench::{AblationConfig, PlanningBenchConfig};
use cssdf::dataset::{ExternalConfig, SelfCollisionConfig};
use cssdf::field::{TrainConfig, DEFAULT_HIDDEN};
use cssdf::mpc::{EpisodeConfig, MpcParams};
use cssdf::robot::RobotModel;
use cssdf::traj::{PlanParams, TrajParams};
use cssdf::{Error, Result};

/// Everything a run needs; read from TOML, then overridden by flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `planar`, `panda`, or a robot description file.
    pub robot: String,
    pub seed: u64,
    pub inputs: Inputs,
    pub gen_self: SelfCollisionConfig,
    pub gen_external: ExternalConfig,
    pub train: TrainSection,
    pub plan: PlanSection,
    pub mpc: MpcSection,
    pub ablate: AblationConfig,
    pub latency: LatencySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            robot: "planar".into(),
            seed: 0,
            inputs: Inputs::default(),
            gen_self: SelfCollisionConfig::default(),
            gen_external: ExternalConfig::default(),
            train: TrainSection::default(),
            plan: PlanSection::default(),
            mpc: MpcSection::default(),
            ablate: AblationConfig::default(),
            latency: LatencySection::default(),
        }
    }
}

/// Input files; each is checked to exist before any work starts.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub scene: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

impl Inputs {
    pub fn check(&self) -> Result<()> {
        for p in [&self.scene, &self.data, &self.model].into_iter().flatten() {
            if !p.is_file() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("{}: no such file", p.display()),
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub hidden: Vec<usize>,
    pub workspace_extension: f64,
    pub optimizer: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            hidden: DEFAULT_HIDDEN.to_vec(),
            workspace_extension: cssdf::robot::DEFAULT_WORKSPACE_EXTENSION,
            optimizer: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSection {
    /// Oracle grid cells per joint when no checkpoint is given.
    pub cells: usize,
    /// Point-cloud spacing for a learned field (m).
    pub spacing: f64,
    pub start: Vec<f64>,
    pub goal: Vec<f64>,
    pub sampler: PlanParams,
    pub optimizer: TrajParams,
    pub table: PlanningBenchConfig,
}

impl Default for PlanSection {
    fn default() -> Self {
        PlanSection {
            cells: 101,
            spacing: 0.05,
            start: Vec::new(),
            goal: Vec::new(),
            sampler: PlanParams::default(),
            optimizer: TrajParams::default(),
            table: PlanningBenchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcSection {
    pub cells: usize,
    pub spacing: f64,
    pub episode: EpisodeConfig,
    pub controller: MpcParams,
}

impl Default for MpcSection {
    fn default() -> Self {
        MpcSection {
            cells: 101,
            spacing: 0.05,
            episode: EpisodeConfig {
                duration: 12.0,
                ..EpisodeConfig::default()
            },
            controller: MpcParams::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencySection {
    pub scales: Vec<usize>,
    pub repeats: usize,
    pub threads: usize,
}

impl Default for LatencySection {
    fn default() -> Self {
        LatencySection {
            scales: (0..=5).map(|e| 10usize.pow(e)).collect(),
            repeats: 3,
            threads: 1,
        }
    }
}

/// Numeric overrides shared by all subcommands.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Dataset size.
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Voxel edge for external generation (m).
    #[arg(long, global = true)]
    pub dx: Option<f64>,
    /// Class-balance ratio bound.
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// MPC horizon.
    #[arg(long, global = true)]
    pub h: Option<usize>,
    /// MPC time step (s).
    #[arg(long, global = true)]
    pub dt: Option<f64>,
    /// MPC safety margin (rad).
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    /// Trajectory smoothness weight.
    #[arg(long = "lambda-s", global = true)]
    pub lambda_s: Option<f64>,
    /// Trajectory safety weight.
    #[arg(long = "lambda-phi", global = true)]
    pub lambda_phi: Option<f64>,
    /// Safety penalty activation distance (rad).
    #[arg(long, global = true)]
    pub d0: Option<f64>,
    /// Safety penalty sharpness (1/rad).
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Training epochs.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))))?;
                toml::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        let s = self.seed;
        self.gen_self.seed = s;
        self.gen_external.seed = s;
        self.gen_external.self_collision.seed = s;
        self.train.optimizer.seed = s;
        self.plan.sampler.rrt.seed = s;
        self.plan.table.seed = s;
        self.ablate.seed = s;
        if let Some(n) = o.n {
            self.gen_self.samples = n;
            self.ablate.samples = n;
            self.gen_external.points = n.div_ceil(self.gen_external.samples_per_point.max(1));
        }
        if let Some(dx) = o.dx {
            self.gen_external.resolution = Some(dx);
        }
        if let Some(t) = o.tau {
            self.gen_self.balance.tau = t;
            self.gen_external.self_collision.balance.tau = t;
        }
        if let Some(h) = o.h {
            self.mpc.controller.horizon = h;
        }
        if let Some(dt) = o.dt {
            self.mpc.controller.dt = dt;
        }
        if let Some(g) = o.gamma {
            self.mpc.controller.gamma = g;
        }
        for t in [&mut self.plan.optimizer, &mut self.plan.table.traj] {
            if let Some(v) = o.lambda_s {
                t.weights.smooth = v;
            }
            if let Some(v) = o.lambda_phi {
                t.weights.safety = v;
            }
            if let Some(v) = o.d0 {
                t.penalty.d0 = v;
            }
            if let Some(v) = o.alpha {
                t.penalty.alpha = v;
            }
        }
        if let Some(e) = o.epochs {
            self.train.optimizer.epochs = e;
            self.ablate.epochs = e;
        }
    }

    pub fn robot(&self) -> Result<RobotModel> {
        match self.robot.as_str() {
            "planar" => Ok(RobotModel::planar_benchmark()),
            "panda" => Ok(RobotModel::panda_like()),
            path => RobotModel::load(Path::new(path)),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }
}
