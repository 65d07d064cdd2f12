use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nmp::commands::{self, EvalOptions, ModuleSpec};
use nmp::config::RunConfig;
use nmp::{CliError, Result};
use nmp_core::train::Stage;

#[derive(Parser, Debug)]
#[command(name = "nmp", version, about = "Modular neural elastic simulation: data, training, rollout, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's training seed (and generation seed for gen-data).
    #[arg(long)]
    seed: Option<u64>,
    /// Mesh file; otherwise data.mesh, the dataset's mesh.json, or the config cube.
    #[arg(long)]
    mesh: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Constitutive,
    Integration,
    Finetune,
    PositionsOnly,
    JointScratch,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Stage {
        match s {
            StageArg::Constitutive => Stage::Constitutive,
            StageArg::Integration => Stage::Integration,
            StageArg::Finetune => Stage::Finetune,
            StageArg::PositionsOnly => Stage::PositionsOnly,
            StageArg::JointScratch => Stage::JointScratch,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate ground-truth training and validation trajectories.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage.
    Train {
        #[arg(value_enum)]
        stage: StageArg,
        #[command(flatten)]
        common: Common,
        /// Dataset directory with train/ and val/ subdirectories.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pretrained constitutive checkpoint, as neural:CKPT.
        #[arg(long)]
        constitutive: Option<String>,
        /// Pretrained integration checkpoint, as neural:CKPT.
        #[arg(long)]
        integration: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out a module configuration and write the trajectory.
    Rollout {
        #[command(flatten)]
        common: Common,
        /// neural:CKPT or analytic.
        #[arg(long)]
        constitutive: String,
        /// neural:CKPT, semi-implicit, or semi-implicit:DT:SUBSTEPS.
        #[arg(long)]
        integration: String,
        /// Trajectory whose frame 0 is the initial state; rest state otherwise.
        #[arg(long)]
        initial: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        frames: usize,
        /// Also dump every n-th frame's surface as OBJ next to the output.
        #[arg(long)]
        obj_every: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a module configuration against reference trajectories.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        constitutive: String,
        #[arg(long)]
        integration: String,
        /// Directory of .nmpt files, or a dataset root with val/.
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated rollout horizons in frames.
        #[arg(long, default_value = "100,500,1000", value_delimiter = ',')]
        horizons: Vec<usize>,
        /// Elements with |det F - 1| above this count as violations.
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
        /// Time 1000-frame rollouts, median of this many runs (at least 3).
        #[arg(long)]
        timing: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the config's cube as a mesh file.
    MakeMesh {
        #[command(flatten)]
        common: Common,
        /// Vertices per cube axis, overriding the config.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.gen.seed = s;
    }
    Ok(cfg)
}

fn optional_spec(s: &Option<String>) -> Result<Option<ModuleSpec>> {
    s.as_deref().map(str::parse).transpose()
}

fn run(cli: Cli) -> Result<()> {
    commands::init_threads()?;
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = load_config(&common)?;
            let s = commands::gen_data(&cfg, common.mesh.as_deref(), &out)?;
            println!("wrote {} train and {} val trajectories to {}", s.train.len(), s.val.len(), out.display());
            if !s.skipped.is_empty() {
                println!("skipped {} diverged samples", s.skipped.len());
            }
        }
        Command::Train { stage, common, data, constitutive, integration, out } => {
            let cfg = load_config(&common)?;
            let c = optional_spec(&constitutive)?;
            let i = optional_spec(&integration)?;
            let s = commands::train_stage(stage.into(), &cfg, data.as_deref(), common.mesh.as_deref(), c.as_ref(), i.as_ref(), &out)?;
            if let Some(last) = s.report.log.last() {
                println!("epoch {} loss {:.6e}", last.epoch, last.total);
            }
            println!("wrote {}", s.checkpoint.display());
        }
        Command::Rollout { common, constitutive, integration, initial, frames, obj_every, out } => {
            let cfg = load_config(&common)?;
            let s = commands::rollout(
                &cfg,
                &constitutive.parse()?,
                &integration.parse()?,
                common.mesh.as_deref(),
                initial.as_deref(),
                frames,
                &out,
                obj_every,
            )?;
            println!("wrote {}", s.trajectory.display());
            if let Some(frame) = s.divergence {
                return Err(nmp_core::Error::Divergence { frame }.into());
            }
        }
        Command::Eval { common, constitutive, integration, data, horizons, threshold, timing, out } => {
            let cfg = load_config(&common)?;
            let options = EvalOptions { horizons, violation_threshold: threshold, timing_repeats: timing };
            let r = commands::evaluate(&cfg, &constitutive.parse()?, &integration.parse()?, common.mesh.as_deref(), &data, &options, &out)?;
            for a in &r.aggregate {
                println!("horizon {:>5}: rmse {:.6e} ± {:.6e}", a.horizon, a.mean, a.std);
            }
            println!("volume violations: {}", r.total_violations);
            if let Some(frame) = r.trajectories.iter().filter_map(|t| t.divergence).min() {
                return Err(nmp_core::Error::Divergence { frame }.into());
            }
        }
        Command::MakeMesh { common, n, out } => {
            let cfg = load_config(&common)?;
            let m = commands::make_mesh(&cfg, n, &out)?;
            println!("wrote {} ({} vertices, {} tets)", out.display(), m.n_vertices(), m.n_elements());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(CliError::exit_code(&e) as u8)
        }
    }
}
