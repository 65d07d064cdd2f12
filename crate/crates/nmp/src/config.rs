//! Run configuration, read from JSON with namespaced sections.

use std::path::{Path, PathBuf};

use nmp_core::diff::SvdGradient;
use nmp_core::fem::SimConfig;
use nmp_core::train::{Stage, TrainConfig};
use nmp_core::{make_cube_mesh, MaterialModel, MaterialParams, TetMesh, Tessellation, Vec3};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialSection {
    pub young: f64,
    pub poisson: f64,
    pub model: String,
}

impl Default for MaterialSection {
    fn default() -> Self {
        MaterialSection { young: 5e5, poisson: 0.45, model: "neo_hookean".into() }
    }
}

impl MaterialSection {
    pub fn params(&self) -> Result<MaterialParams> {
        let model = MaterialModel::from_name(&self.model)
            .ok_or_else(|| CliError::Config(format!("material.model: unknown model {:?}", self.model)))?;
        MaterialParams::from_young_poisson(model, self.young, self.poisson)
            .map_err(|e| CliError::Config(format!("material: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub dt_frame: f64,
    pub substeps: usize,
    pub gravity: Vec3,
}

impl Default for SimSection {
    fn default() -> Self {
        let s = SimConfig::default();
        SimSection { dt_frame: s.dt_frame, substeps: s.substeps, gravity: s.gravity }
    }
}

impl SimSection {
    pub fn sim_config(&self) -> Result<SimConfig> {
        let s = SimConfig { dt_frame: self.dt_frame, substeps: self.substeps, gravity: self.gravity };
        s.validate().map_err(|e| CliError::Config(format!("sim: {e}")))?;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub base_lr: f64,
    /// Overrides `base_lr` for the two pretraining stages when set.
    pub pretrain_lr: Option<f64>,
    pub reset_min: usize,
    pub reset_max: usize,
    pub volume_weight: f64,
    pub epsilon_volume: f64,
    pub seed: u64,
    pub horizon_cap: usize,
    pub grad_clip: f64,
    pub constitutive_hidden: Vec<usize>,
    pub stress_scale: f64,
    /// `"full"` or `"detached"`.
    pub svd_gradient: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs_pretrain: 100,
            epochs_finetune: 100,
            base_lr: t.base_lr,
            pretrain_lr: None,
            reset_min: t.reset_min,
            reset_max: t.reset_max,
            volume_weight: t.volume_weight,
            epsilon_volume: t.epsilon_volume,
            seed: t.seed,
            horizon_cap: t.horizon_cap,
            grad_clip: t.grad_clip,
            constitutive_hidden: t.constitutive_hidden,
            stress_scale: t.stress_scale,
            svd_gradient: "full".into(),
        }
    }
}

impl TrainSection {
    /// Core training settings for `stage`. Joint training from scratch gets
    /// the pretraining and finetuning epochs combined, matching the
    /// two-stage budget.
    pub fn train_config(&self, stage: Stage, gravity: Vec3) -> Result<TrainConfig> {
        let svd_gradient = match self.svd_gradient.as_str() {
            "full" => SvdGradient::Full,
            "detached" => SvdGradient::Detached,
            other => return Err(CliError::Config(format!("train.svd_gradient: unknown mode {other:?}"))),
        };
        let (epochs, base_lr) = match stage {
            Stage::Constitutive | Stage::Integration => (self.epochs_pretrain, self.pretrain_lr.unwrap_or(self.base_lr)),
            Stage::Finetune | Stage::PositionsOnly => (self.epochs_finetune, self.base_lr),
            Stage::JointScratch => (self.epochs_pretrain + self.epochs_finetune, self.base_lr),
        };
        let c = TrainConfig {
            epochs,
            base_lr,
            reset_min: self.reset_min,
            reset_max: self.reset_max,
            volume_weight: self.volume_weight,
            epsilon_volume: self.epsilon_volume,
            seed: self.seed,
            horizon_cap: self.horizon_cap,
            grad_clip: self.grad_clip,
            gravity,
            svd_gradient,
            constitutive_hidden: self.constitutive_hidden.clone(),
            stress_scale: self.stress_scale,
        };
        c.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub mesh: Option<PathBuf>,
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
}

/// Procedural cube used when no mesh file is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CubeSection {
    pub n_per_axis: usize,
    pub edge_length: f64,
    pub density: f64,
    /// `"six"` or `"five"` tetrahedra per cell.
    pub tessellation: String,
    pub ground_height: Option<f64>,
}

impl Default for CubeSection {
    fn default() -> Self {
        CubeSection {
            n_per_axis: 5,
            edge_length: 1.0,
            density: 1000.0,
            tessellation: "six".into(),
            ground_height: Some(0.0),
        }
    }
}

impl CubeSection {
    pub fn mesh(&self) -> Result<TetMesh> {
        let tess = match self.tessellation.as_str() {
            "six" => Tessellation::SixTet,
            "five" => Tessellation::FiveTet,
            other => return Err(CliError::Config(format!("cube.tessellation: unknown {other:?}"))),
        };
        let m = make_cube_mesh(self.n_per_axis, self.edge_length, self.density, tess)
            .map_err(|e| CliError::Config(format!("cube: {e}")))?;
        Ok(m.with_ground(self.ground_height))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    pub n_train: usize,
    pub n_val: usize,
    pub n_frames: usize,
    /// Per-component bounds of the uniform initial-velocity box, m/s.
    pub velocity_min: Vec3,
    pub velocity_max: Vec3,
    pub random_orientation: bool,
    /// Gap between the lowest vertex and the ground at frame 0.
    pub clearance: f64,
    pub seed: u64,
}

impl Default for GenSection {
    fn default() -> Self {
        GenSection {
            n_train: 32,
            n_val: 8,
            n_frames: 1000,
            velocity_min: [-2.0; 3],
            velocity_max: [2.0; 3],
            random_orientation: false,
            clearance: 0.02,
            seed: 0,
        }
    }
}

impl GenSection {
    pub fn validate(&self) -> Result<()> {
        if self.n_train + self.n_val == 0 {
            return Err(CliError::Config("gen: nothing to generate (n_train + n_val = 0)".into()));
        }
        if self.n_frames == 0 {
            return Err(CliError::Config("gen.n_frames must be positive".into()));
        }
        for a in 0..3 {
            let (lo, hi) = (self.velocity_min[a], self.velocity_max[a]);
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(CliError::Config(format!("gen: velocity box axis {a} is [{lo}, {hi}]")));
            }
        }
        if !(self.clearance >= 0.0) {
            return Err(CliError::Config("gen.clearance must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub material: MaterialSection,
    pub sim: SimSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub cube: CubeSection,
    pub gen: GenSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
