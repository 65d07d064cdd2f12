//! The work behind each subcommand, usable without the argument parser.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use nmp_core::diff::ParamStore;
use nmp_core::eval::{self, ConstitutiveChoice, EvalReport, IntegratorChoice, ModuleConfig};
use nmp_core::fem::Trajectory;
use nmp_core::train::{self, Dataset, Stage, TrainReport};
use nmp_core::{MaterialParams, TetMesh};
use rayon::prelude::*;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::generate::generate_dataset;
use crate::manifest::RunManifest;
use crate::mesh_file::{load_mesh, save_mesh};
use crate::report::{write_epoch_csv, write_obj_sequence, write_report};
use crate::timing::time_rollout;
use crate::trajectory_file::{list_trajectories, load_trajectory, save_trajectory};

/// Either slot of a module configuration as given on the command line.
#[derive(Clone, Debug, PartialEq)]
pub enum ModuleSpec {
    Neural(PathBuf),
    Analytic,
    /// Explicit `(dt_sub, substeps)`, or the config's simulation settings.
    SemiImplicit(Option<(f64, usize)>),
}

impl FromStr for ModuleSpec {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || CliError::Usage(format!("bad module spec {s:?}; expected neural:CKPT, analytic, or semi-implicit[:DT:SUBSTEPS]"));
        if let Some(path) = s.strip_prefix("neural:") {
            if path.is_empty() {
                return Err(bad());
            }
            return Ok(ModuleSpec::Neural(path.into()));
        }
        if s == "analytic" {
            return Ok(ModuleSpec::Analytic);
        }
        if s == "semi-implicit" {
            return Ok(ModuleSpec::SemiImplicit(None));
        }
        let rest = s.strip_prefix("semi-implicit:").ok_or_else(bad)?;
        let (dt, n) = rest.split_once(':').ok_or_else(bad)?;
        let dt: f64 = dt.parse().map_err(|_| bad())?;
        let n: usize = n.parse().map_err(|_| bad())?;
        if !(dt > 0.0) || n == 0 {
            return Err(bad());
        }
        Ok(ModuleSpec::SemiImplicit(Some((dt, n))))
    }
}

enum Slot {
    Neural(ParamStore),
    Analytic(MaterialParams),
    SemiImplicit(usize),
}

/// Modules resolved from specs: checkpoints loaded, material and substeps
/// taken from the config where the spec defers to it.
pub struct Modules {
    constitutive: Slot,
    integration: Slot,
    inputs: Vec<PathBuf>,
}

impl Modules {
    pub fn resolve(cfg: &RunConfig, constitutive: &ModuleSpec, integration: &ModuleSpec) -> Result<Self> {
        let mut inputs = Vec::new();
        let mut neural = |p: &PathBuf, prefix: &str, slot: &str| -> Result<Slot> {
            let store = load_checkpoint(p)?;
            if !store.has_prefix(prefix) {
                return Err(CliError::data(format!("{}: no {prefix} parameters for the {slot} slot", p.display())));
            }
            inputs.push(p.clone());
            Ok(Slot::Neural(store))
        };
        let c = match constitutive {
            ModuleSpec::Neural(p) => neural(p, "constitutive/", "constitutive")?,
            ModuleSpec::Analytic => Slot::Analytic(cfg.material.params()?),
            ModuleSpec::SemiImplicit(_) => {
                return Err(CliError::Usage("--constitutive takes neural:CKPT or analytic".into()));
            }
        };
        let i = match integration {
            ModuleSpec::Neural(p) => neural(p, "integration/", "integration")?,
            ModuleSpec::SemiImplicit(None) => Slot::SemiImplicit(cfg.sim.sim_config()?.substeps),
            ModuleSpec::SemiImplicit(Some((dt, n))) => {
                let dt_frame = cfg.sim.sim_config()?.dt_frame;
                let IntegratorChoice::SemiImplicit { substeps } = IntegratorChoice::semi_implicit_at(dt_frame, *dt)? else {
                    unreachable!()
                };
                if substeps != *n {
                    return Err(CliError::Usage(format!(
                        "semi-implicit:{dt}:{n} disagrees with dt_frame {dt_frame} ({substeps} substeps)"
                    )));
                }
                Slot::SemiImplicit(*n)
            }
            ModuleSpec::Analytic => {
                return Err(CliError::Usage("--integration takes neural:CKPT or semi-implicit[:DT:SUBSTEPS]".into()));
            }
        };
        Ok(Modules { constitutive: c, integration: i, inputs })
    }

    pub fn config(&self) -> ModuleConfig<'_> {
        ModuleConfig {
            constitutive: match &self.constitutive {
                Slot::Neural(s) => ConstitutiveChoice::Neural(s),
                Slot::Analytic(m) => ConstitutiveChoice::Analytic(*m),
                Slot::SemiImplicit(_) => unreachable!(),
            },
            integration: match &self.integration {
                Slot::Neural(s) => IntegratorChoice::Neural(s),
                Slot::SemiImplicit(n) => IntegratorChoice::SemiImplicit { substeps: *n },
                Slot::Analytic(_) => unreachable!(),
            },
        }
    }

    pub fn checkpoint_paths(&self) -> &[PathBuf] {
        &self.inputs
    }
}

/// Mesh named on the command line, in the config, or in the dataset
/// directory; otherwise the config's procedural cube.
pub fn resolve_mesh(cfg: &RunConfig, explicit: Option<&Path>, data_dir: Option<&Path>) -> Result<(TetMesh, Option<PathBuf>)> {
    let from_data = data_dir.map(|d| d.join("mesh.json")).filter(|p| p.exists());
    match explicit.map(Path::to_path_buf).or_else(|| cfg.data.mesh.clone()).or(from_data) {
        Some(p) => Ok((load_mesh(&p, cfg.cube.density)?, Some(p))),
        None => Ok((cfg.cube.mesh()?, None)),
    }
}

fn mesh_label(path: &Option<PathBuf>) -> String {
    path.as_ref().map_or_else(|| "cube".to_string(), |p| p.display().to_string())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

#[derive(Debug)]
pub struct GenSummary {
    pub train: Vec<PathBuf>,
    pub val: Vec<PathBuf>,
    pub skipped: Vec<(u64, String)>,
    pub manifest: PathBuf,
}

/// Writes `out/mesh.json`, `out/train/*.nmpt`, `out/val/*.nmpt` and a manifest.
pub fn gen_data(cfg: &RunConfig, mesh: Option<&Path>, out: &Path) -> Result<GenSummary> {
    cfg.gen.validate()?;
    let material = cfg.material.params()?;
    let sim = cfg.sim.sim_config()?;
    let (mesh, mesh_path) = resolve_mesh(cfg, mesh, None)?;
    let mut manifest = RunManifest::start("gen-data", cfg.to_json(), cfg.gen.seed);
    if let Some(p) = &mesh_path {
        manifest.add_input(p)?;
    }
    let generated = generate_dataset(&mesh, &material, &sim, &cfg.gen, &mesh_label(&mesh_path))?;
    create_dir(out)?;
    let mesh_out = out.join("mesh.json");
    save_mesh(&mesh_out, &mesh)?;
    manifest.add_output(&mesh_out);
    let mut write_split = |name: &str, items: &[(u64, Trajectory)]| -> Result<Vec<PathBuf>> {
        let dir = out.join(name);
        create_dir(&dir)?;
        let mut paths = Vec::new();
        for (i, (_, t)) in items.iter().enumerate() {
            let p = dir.join(format!("traj_{i:04}.nmpt"));
            save_trajectory(&p, t)?;
            manifest.add_output(&p);
            paths.push(p);
        }
        Ok(paths)
    };
    let train = write_split("train", &generated.train)?;
    let val = write_split("val", &generated.val)?;
    for (seed, why) in &generated.skipped {
        eprintln!("gen-data: skipped sample with seed {seed}: {why}");
    }
    let manifest = manifest.finish_at(&out.join("gen-data.manifest.json"))?;
    Ok(GenSummary { train, val, skipped: generated.skipped, manifest })
}

fn load_split(dir: &Path, manifest: &mut RunManifest) -> Result<Vec<Trajectory>> {
    let paths = list_trajectories(dir)?;
    let mut out = Vec::with_capacity(paths.len());
    for p in &paths {
        out.push(load_trajectory(p)?);
        manifest.add_input(p)?;
    }
    Ok(out)
}

fn split_dir(cfg_dir: &Option<PathBuf>, data: Option<&Path>, name: &str) -> Option<PathBuf> {
    data.map(|d| d.join(name)).or_else(|| cfg_dir.clone())
}

#[derive(Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub manifest: PathBuf,
    pub report: TrainReport,
}

/// Runs one training stage and writes `out/<stage>.nmpc`,
/// `out/<stage>_metrics.csv` and a manifest.
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    stage: Stage,
    cfg: &RunConfig,
    data: Option<&Path>,
    mesh: Option<&Path>,
    constitutive: Option<&ModuleSpec>,
    integration: Option<&ModuleSpec>,
    out: &Path,
) -> Result<TrainSummary> {
    let sim = cfg.sim.sim_config()?;
    let tc = cfg.train.train_config(stage, sim.gravity)?;
    let mut manifest = RunManifest::start(&format!("train {}", stage.name()), cfg.to_json(), tc.seed);
    let prerequisite = |spec: Option<&ModuleSpec>, what: &str| -> Result<PathBuf> {
        match spec {
            Some(ModuleSpec::Neural(p)) => Ok(p.clone()),
            _ => Err(CliError::Usage(format!(
                "train {} needs a pretrained {what} checkpoint (--{what} neural:CKPT)",
                stage.name()
            ))),
        }
    };
    let pretrained = match stage {
        Stage::Finetune | Stage::PositionsOnly => {
            let c = prerequisite(constitutive, "constitutive")?;
            let i = prerequisite(integration, "integration")?;
            for p in [&c, &i] {
                if !p.exists() {
                    return Err(CliError::Usage(format!("pretrained checkpoint {} does not exist", p.display())));
                }
            }
            let cs = load_checkpoint(&c)?;
            manifest.add_input(&c)?;
            let is = if i == c { cs.clone() } else { load_checkpoint(&i)? };
            if i != c {
                manifest.add_input(&i)?;
            }
            Some((cs, is))
        }
        _ => None,
    };
    let train_dir = split_dir(&cfg.data.train_dir, data, "train")
        .ok_or_else(|| CliError::Usage("no training data: pass --data DIR or set data.train_dir".into()))?;
    let val_dir = split_dir(&cfg.data.val_dir, data, "val").filter(|d| d.exists());
    let (mesh, mesh_path) = resolve_mesh(cfg, mesh, data)?;
    if let Some(p) = &mesh_path {
        manifest.add_input(p)?;
    }
    let train_set = load_split(&train_dir, &mut manifest)?;
    let val_set = match &val_dir {
        Some(d) => load_split(d, &mut manifest)?,
        None => Vec::new(),
    };
    let dataset = Dataset::new(mesh, train_set, val_set)?;
    let report = match stage {
        Stage::Constitutive => {
            if !dataset.has_forces() {
                return Err(CliError::data("constitutive training needs trajectories with recorded forces"));
            }
            train::train_constitutive(&dataset, &tc)?
        }
        Stage::Integration => train::train_integration(&dataset, &cfg.material.params()?, &tc)?,
        Stage::Finetune => {
            let (c, i) = pretrained.as_ref().expect("checked above");
            train::joint_finetune(&dataset, c, i, &tc)?
        }
        Stage::PositionsOnly => {
            let (c, i) = pretrained.as_ref().expect("checked above");
            let mut merged = c.clone();
            merged.merge(i);
            train::finetune_positions_only(&dataset, &merged, &tc)?
        }
        Stage::JointScratch => train::joint_from_scratch(&dataset, &tc)?,
    };
    create_dir(out)?;
    let checkpoint = out.join(format!("{}.nmpc", stage.name()));
    save_checkpoint(&checkpoint, &report.store)?;
    let metrics = out.join(format!("{}_metrics.csv", stage.name()));
    write_epoch_csv(&metrics, &report.log)?;
    manifest.add_output(&checkpoint);
    manifest.add_output(&metrics);
    let manifest = manifest.finish_at(&out.join(format!("{}.manifest.json", stage.name())))?;
    Ok(TrainSummary { checkpoint, metrics, manifest, report })
}

#[derive(Debug)]
pub struct RolloutSummary {
    pub trajectory: PathBuf,
    pub divergence: Option<usize>,
    pub obj_files: usize,
}

/// Rolls out from frame 0 of `initial` (or the rest state) and writes the
/// result as NMPT, plus an optional OBJ surface sequence.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    cfg: &RunConfig,
    constitutive: &ModuleSpec,
    integration: &ModuleSpec,
    mesh: Option<&Path>,
    initial: Option<&Path>,
    n_frames: usize,
    out: &Path,
    obj_stride: Option<usize>,
) -> Result<RolloutSummary> {
    let sim = cfg.sim.sim_config()?;
    let modules = Modules::resolve(cfg, constitutive, integration)?;
    let mut manifest = RunManifest::start("rollout", cfg.to_json(), cfg.train.seed);
    for p in modules.checkpoint_paths() {
        manifest.add_input(p)?;
    }
    let (mesh, mesh_path) = resolve_mesh(cfg, mesh, None)?;
    if let Some(p) = &mesh_path {
        manifest.add_input(p)?;
    }
    let state = match initial {
        Some(p) => {
            manifest.add_input(p)?;
            load_trajectory(p)?.frames[0].state.clone()
        }
        None => nmp_core::fem::SimState::at_rest(&mesh),
    };
    if state.n_vertices() != mesh.n_vertices() {
        return Err(CliError::data(format!(
            "initial state has {} vertices, mesh has {}",
            state.n_vertices(),
            mesh.n_vertices()
        )));
    }
    let r = eval::rollout(&modules.config(), &mesh, &state, n_frames, sim.dt_frame, sim.gravity)?;
    let mut traj = r.trajectory;
    traj.meta.mesh = mesh_label(&mesh_path);
    save_trajectory(out, &traj)?;
    manifest.add_output(out);
    let obj_files = match obj_stride {
        Some(stride) => {
            let dir = out.with_extension("obj");
            let n = write_obj_sequence(&dir, &mesh, &traj, stride)?;
            manifest.add_output(&dir);
            n
        }
        None => 0,
    };
    manifest.finish_at(&out.with_extension("manifest.json"))?;
    Ok(RolloutSummary { trajectory: out.to_path_buf(), divergence: r.divergence, obj_files })
}

/// Evaluates every trajectory in `data` (or `data/val`) from its frame 0.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub horizons: Vec<usize>,
    pub violation_threshold: f64,
    /// Timed 1000-frame rollouts from the first trajectory's initial state.
    pub timing_repeats: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { horizons: vec![100, 500, 1000], violation_threshold: 0.05, timing_repeats: None }
    }
}

pub fn evaluate(
    cfg: &RunConfig,
    constitutive: &ModuleSpec,
    integration: &ModuleSpec,
    mesh: Option<&Path>,
    data: &Path,
    options: &EvalOptions,
    out: &Path,
) -> Result<EvalReport> {
    if options.horizons.is_empty() || options.horizons.contains(&0) {
        return Err(CliError::Usage("horizons must be positive frame counts".into()));
    }
    let sim = cfg.sim.sim_config()?;
    let modules = Modules::resolve(cfg, constitutive, integration)?;
    let mut manifest = RunManifest::start("eval", cfg.to_json(), cfg.train.seed);
    for p in modules.checkpoint_paths() {
        manifest.add_input(p)?;
    }
    let dir = if data.join("val").is_dir() { data.join("val") } else { data.to_path_buf() };
    let root = if dir != data { Some(data) } else { None };
    let (mesh, mesh_path) = resolve_mesh(cfg, mesh, root)?;
    if let Some(p) = &mesh_path {
        manifest.add_input(p)?;
    }
    let paths = list_trajectories(&dir)?;
    if paths.is_empty() {
        return Err(CliError::data(format!("no .nmpt files in {}", dir.display())));
    }
    let mut refs = Vec::with_capacity(paths.len());
    for p in &paths {
        let t = load_trajectory(p)?;
        if t.n_vertices() != mesh.n_vertices() {
            return Err(CliError::data(format!(
                "{} has {} vertices, mesh has {}",
                p.display(),
                t.n_vertices(),
                mesh.n_vertices()
            )));
        }
        manifest.add_input(p)?;
        refs.push(t);
    }
    let max_h = *options.horizons.iter().max().unwrap();
    let config = modules.config();
    let rows = paths
        .par_iter()
        .zip(refs.par_iter())
        .map(|(p, reference)| {
            let frames = max_h.min(reference.len() - 1);
            let r = eval::rollout(&config, &mesh, &reference.frames[0].state, frames, sim.dt_frame, sim.gravity)?;
            let name = p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
            Ok(eval::trajectory_report(&name, &r, reference, &mesh, &options.horizons, options.violation_threshold)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = EvalReport::new(config.label(), rows, &options.horizons);
    if let Some(repeats) = options.timing_repeats {
        let t = time_rollout(&config, &mesh, &refs[0].frames[0].state, 1000, sim.dt_frame, sim.gravity, repeats)?;
        report.ms_per_1000_frames = Some(t.median_ms);
    }
    write_report(out, &report)?;
    manifest.add_output(out);
    manifest.finish_at(&out.with_extension("manifest.json"))?;
    Ok(report)
}

/// Writes the config's procedural cube as a mesh file.
pub fn make_mesh(cfg: &RunConfig, n_per_axis: Option<usize>, out: &Path) -> Result<TetMesh> {
    let mut cube = cfg.cube.clone();
    if let Some(n) = n_per_axis {
        cube.n_per_axis = n;
    }
    let mesh = cube.mesh()?;
    save_mesh(out, &mesh)?;
    let mut manifest = RunManifest::start("make-mesh", cfg.to_json(), 0);
    manifest.add_output(out);
    manifest.finish_at(&out.with_extension("manifest.json"))?;
    Ok(mesh)
}

/// Caps the global thread pool from `NMP_THREADS`; all cores by default.
pub fn init_threads() -> Result<()> {
    let n = match std::env::var("NMP_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("NMP_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => 0,
    };
    // A second initialization (tests, embedding) keeps the existing pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
