//! Staged training of the neural modules against FEM supervision.
//!
//! Every stage runs the same loop: each training trajectory is cut into
//! consecutive teacher-forced segments starting at frame 0; a segment starts
//! from the ground-truth state, rolls out with the stage's force source and
//! integrator, accumulates the stage's loss terms, and triggers one Adam
//! update after backpropagating through the whole segment.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::constitutive::{self, ConstitutiveNet, DEFAULT_HIDDEN, DEFAULT_STRESS_SCALE};
use crate::diff::{clip_global_norm, cosine_lr, teacher_forcing_interval, Adam, Binding, ParamStore, SvdGradient, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fem::{self, FemOps, Trajectory, GRAVITY};
use crate::integration::{self, ChannelMoments, IntegrationNet, IntegrationStats};
use crate::linalg::{self, Mat3, Vec3};
use crate::materials::MaterialParams;
use crate::mesh::TetMesh;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Constitutive,
    Integration,
    Finetune,
    PositionsOnly,
    JointScratch,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Constitutive => "constitutive",
            Stage::Integration => "integration",
            Stage::Finetune => "finetune",
            Stage::PositionsOnly => "positions-only",
            Stage::JointScratch => "joint-scratch",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "constitutive" => Stage::Constitutive,
            "integration" => Stage::Integration,
            "finetune" => Stage::Finetune,
            "positions-only" | "positions_only" => Stage::PositionsOnly,
            "joint-scratch" | "joint_scratch" => Stage::JointScratch,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub reset_min: usize,
    pub reset_max: usize,
    pub volume_weight: f64,
    pub epsilon_volume: f64,
    pub seed: u64,
    /// Only frames `0..=horizon_cap` of each trajectory are used.
    pub horizon_cap: usize,
    pub grad_clip: f64,
    pub gravity: Vec3,
    pub svd_gradient: SvdGradient,
    pub constitutive_hidden: Vec<usize>,
    pub stress_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            base_lr: 1e-3,
            reset_min: 60,
            reset_max: 200,
            volume_weight: 0.1,
            epsilon_volume: 0.05,
            seed: 0,
            horizon_cap: 200,
            grad_clip: 1.0,
            gravity: GRAVITY,
            svd_gradient: SvdGradient::Full,
            constitutive_hidden: DEFAULT_HIDDEN.to_vec(),
            stress_scale: DEFAULT_STRESS_SCALE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(String::from(m)));
        if self.reset_min == 0 || self.reset_min > self.reset_max {
            return bad("need 1 <= reset_min <= reset_max");
        }
        if !(self.volume_weight >= 0.0) {
            return bad("volume_weight must be non-negative");
        }
        if !(self.epsilon_volume > 0.0 && self.epsilon_volume < 1.0) {
            return bad("epsilon_volume must lie in (0, 1)");
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be non-negative");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if self.horizon_cap == 0 {
            return bad("horizon_cap must be positive");
        }
        Ok(())
    }
}

/// Training and validation trajectories on one mesh.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub mesh: TetMesh,
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(mesh: TetMesh, train: Vec<Trajectory>, val: Vec<Trajectory>) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for t in train.iter().chain(&val) {
            t.validate()?;
            if t.n_vertices() != mesh.n_vertices() || t.len() < 2 {
                return Err(Error::ShapeMismatch(alloc::format!(
                    "trajectory with {} vertices and {} frames does not fit a mesh of {} vertices",
                    t.n_vertices(),
                    t.len(),
                    mesh.n_vertices()
                )));
            }
        }
        Ok(Dataset { mesh, train, val })
    }

    pub fn has_forces(&self) -> bool {
        self.train.iter().all(Trajectory::has_forces)
    }
}

/// Data-derived magnitudes that make the loss terms dimensionless.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossScales {
    /// Mean squared nodal force norm.
    pub force: f64,
    /// Mean squared per-frame velocity change.
    pub velocity: f64,
    /// Mean squared per-frame displacement.
    pub position: f64,
}

impl LossScales {
    pub fn from_trajectories(trajs: &[Trajectory], horizon_cap: usize) -> Self {
        let (mut f, mut nf) = (0.0, 0usize);
        let (mut dv, mut dx, mut nd) = (0.0, 0.0, 0usize);
        for t in trajs {
            let last = horizon_cap.min(t.len() - 1);
            for k in 0..=last {
                if let Some(fs) = &t.frames[k].forces {
                    f += fs.iter().map(|v| linalg::dot(*v, *v)).sum::<f64>();
                    nf += fs.len();
                }
                if k < last {
                    let (a, b) = (&t.frames[k].state, &t.frames[k + 1].state);
                    for i in 0..a.n_vertices() {
                        let d = linalg::sub(b.velocities[i], a.velocities[i]);
                        dv += linalg::dot(d, d);
                        let d = linalg::sub(b.positions[i], a.positions[i]);
                        dx += linalg::dot(d, d);
                    }
                    nd += a.n_vertices();
                }
            }
        }
        let avg = |s: f64, n: usize| if n > 0 && s > 0.0 { s / n as f64 } else { 1.0 };
        LossScales {
            force: avg(f, nf),
            velocity: avg(dv, nd),
            position: avg(dx, nd),
        }
    }
}

impl LossScales {
    /// Scales of the training split, floored by physical magnitudes so that
    /// near-static data cannot shrink them to round-off: the mean squared
    /// vertex weight, and one frame of free fall for velocity and position.
    pub fn for_dataset(dataset: &Dataset, config: &TrainConfig) -> Self {
        let raw = Self::from_trajectories(&dataset.train, config.horizon_cap);
        let g2 = linalg::dot(config.gravity, config.gravity);
        let dt = dataset.train[0].dt_frame;
        let m = &dataset.mesh.vertex_masses;
        let weight = g2 * m.iter().map(|w| w * w).sum::<f64>() / m.len() as f64;
        let floor = |v: f64, f: f64| if f > 0.0 { v.max(f) } else { v };
        LossScales {
            force: floor(raw.force, weight),
            velocity: floor(raw.velocity, g2 * dt * dt),
            position: floor(raw.position, g2 * dt * dt * dt * dt),
        }
    }
}

/// Per-epoch (or per-evaluation) averages of the weighted loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossComponents {
    pub force: f64,
    pub velocity: f64,
    pub position: f64,
    pub volume: f64,
}

impl LossComponents {
    pub fn total(&self) -> f64 {
        self.force + self.velocity + self.position + self.volume
    }

    fn add_scaled(&mut self, o: &LossComponents, s: f64) {
        self.force += s * o.force;
        self.velocity += s * o.velocity;
        self.position += s * o.position;
        self.volume += s * o.volume;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    pub total: f64,
    pub components: LossComponents,
    pub lr: f64,
    pub reset_interval: usize,
    pub segments: usize,
    pub clipped: usize,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub store: ParamStore,
    pub log: Vec<EpochLog>,
    pub scales: LossScales,
}

#[derive(Clone, Debug)]
enum ForceSource {
    Neural(ConstitutiveNet),
    Analytic(MaterialParams),
}

#[derive(Clone, Debug)]
enum Integrator {
    Neural(IntegrationNet, Box<IntegrationStats>),
    SemiImplicit,
}

/// What a stage rolls out with and what it penalizes.
#[derive(Clone, Debug)]
struct Plan {
    stage: Stage,
    forces: ForceSource,
    integrator: Integrator,
    w_force: f64,
    w_velocity: f64,
    w_position: f64,
    w_volume: f64,
}

impl Plan {
    fn trainable(&self, name: &str) -> bool {
        match self.stage {
            Stage::Constitutive => name.starts_with("constitutive/"),
            Stage::Integration => name.starts_with("integration/") || name.starts_with("alignment/"),
            _ => true,
        }
    }

    fn build(stage: Stage, store: &ParamStore, material: Option<&MaterialParams>, config: &TrainConfig) -> Result<Self> {
        let neural_forces = || -> Result<ForceSource> {
            let mut net = ConstitutiveNet::from_store(store)?;
            net.svd_gradient = config.svd_gradient;
            Ok(ForceSource::Neural(net))
        };
        let neural_step = || -> Result<Integrator> { Ok(Integrator::Neural(IntegrationNet::new(), Box::new(IntegrationStats::load(store)?))) };
        let vw = config.volume_weight;
        let plan = match stage {
            Stage::Constitutive => Plan {
                stage,
                forces: neural_forces()?,
                integrator: Integrator::SemiImplicit,
                w_force: 1.0,
                w_velocity: 0.0,
                w_position: 1.0,
                w_volume: 0.0,
            },
            Stage::Integration => Plan {
                stage,
                forces: ForceSource::Analytic(*material.ok_or_else(|| {
                    Error::InvalidParameter(String::from("integration pretraining needs the analytic material"))
                })?),
                integrator: neural_step()?,
                w_force: 0.0,
                w_velocity: 1.0,
                w_position: 1.0,
                w_volume: 0.0,
            },
            Stage::Finetune => Plan {
                stage,
                forces: neural_forces()?,
                integrator: neural_step()?,
                w_force: 1.0,
                w_velocity: 1.0,
                w_position: 1.0,
                w_volume: vw,
            },
            Stage::PositionsOnly => Plan {
                stage,
                forces: neural_forces()?,
                integrator: neural_step()?,
                w_force: 0.0,
                w_velocity: 0.0,
                w_position: 1.0,
                w_volume: vw,
            },
            Stage::JointScratch => Plan {
                stage,
                forces: neural_forces()?,
                integrator: neural_step()?,
                w_force: 0.0,
                w_velocity: 0.0,
                w_position: 1.0,
                w_volume: 0.0,
            },
        };
        Ok(plan)
    }
}

struct Segment<'t> {
    traj: &'t Trajectory,
    index: usize,
    start: usize,
    len: usize,
}

struct Runner<'a> {
    plan: Plan,
    ops: FemOps,
    scales: LossScales,
    config: &'a TrainConfig,
}

fn flat(v: &[Vec3]) -> &[f64] {
    v.as_flattened()
}

impl Runner<'_> {
    /// Records one teacher-forced segment; returns the loss node and its
    /// weighted components.
    fn segment_loss(&self, tape: &mut Tape, params: &Binding, store: &ParamStore, seg: &Segment<'_>, epoch: usize) -> Result<(Var, LossComponents)> {
        let frames = &seg.traj.frames;
        let dt = seg.traj.dt_frame;
        let p = &self.plan;
        let per_step = 1.0 / seg.len as f64;
        let first = &frames[seg.start].state;
        let mut x = tape.constant(Tensor::from_vec3s(&first.positions));
        let mut v = tape.constant(Tensor::from_vec3s(&first.velocities));
        let mut terms: Vec<Var> = Vec::with_capacity(4 * seg.len);
        let mut comps = LossComponents::default();
        let context = |e: Error, frame: usize| match e {
            Error::NonFinite(_) | Error::Divergence { .. } => Error::NonFiniteLoss {
                epoch,
                trajectory: seg.index,
                frame,
            },
            other => other,
        };
        for k in seg.start..seg.start + seg.len {
            let f = match &p.forces {
                ForceSource::Neural(net) => net.forces(tape, params, store, &self.ops, x).map_err(|e| context(e, k))?,
                ForceSource::Analytic(m) => self.ops.analytic_forces(tape, x, m).map_err(|e| context(e, k))?,
            };
            if p.w_force > 0.0 {
                let target = frames[k].forces.as_ref().ok_or(Error::MissingForces(k))?;
                let l = tape.sq_err_mean(f, flat(target));
                let l = tape.scale(l, p.w_force * per_step / self.scales.force);
                comps.force += tape.value(l).item();
                terms.push(l);
            }
            let (x1, v1) = match &p.integrator {
                Integrator::SemiImplicit => {
                    let v1 = self.ops.semi_implicit_velocity(tape, v, f, dt, self.config.gravity);
                    self.ops.advance_and_constrain(tape, x, v1, dt)
                }
                Integrator::Neural(net, stats) => net
                    .step(tape, params, stats, &self.ops, x, v, f, dt)
                    .map_err(|e| context(e, k))?,
            };
            let next = &frames[k + 1].state;
            if p.w_velocity > 0.0 {
                let l = tape.sq_err_mean(v1, flat(&next.velocities));
                let l = tape.scale(l, p.w_velocity * per_step / self.scales.velocity);
                comps.velocity += tape.value(l).item();
                terms.push(l);
            }
            if p.w_position > 0.0 {
                let l = tape.sq_err_mean(x1, flat(&next.positions));
                let l = tape.scale(l, p.w_position * per_step / self.scales.position);
                comps.position += tape.value(l).item();
                terms.push(l);
            }
            if p.w_volume > 0.0 {
                let fs = self.ops.deformation_gradients(tape, x1);
                let l = self.ops.volume_loss(tape, fs, self.config.epsilon_volume);
                let l = tape.scale(l, p.w_volume * per_step);
                comps.volume += tape.value(l).item();
                terms.push(l);
            }
            x = x1;
            v = v1;
        }
        let mut total = terms[0];
        for t in &terms[1..] {
            total = tape.add(total, *t);
        }
        if !tape.value(total).item().is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                trajectory: seg.index,
                frame: seg.start,
            });
        }
        Ok((total, comps))
    }

    fn segments<'t>(&self, trajs: &'t [Trajectory], interval: usize) -> Vec<Segment<'t>> {
        let mut out = Vec::new();
        for (index, traj) in trajs.iter().enumerate() {
            let horizon = self.config.horizon_cap.min(traj.len() - 1);
            let mut start = 0;
            while start < horizon {
                let len = interval.min(horizon - start);
                out.push(Segment { traj, index, start, len });
                start += len;
            }
        }
        out
    }

    /// Average loss over all segments without updating parameters.
    fn evaluate(&self, store: &ParamStore, trajs: &[Trajectory], interval: usize) -> Result<LossComponents> {
        let segs = self.segments(trajs, interval);
        let mut acc = LossComponents::default();
        for seg in &segs {
            let mut tape = Tape::new();
            let params = store.bind(&mut tape, |_| false);
            let (_, c) = self.segment_loss(&mut tape, &params, store, seg, 0)?;
            acc.add_scaled(&c, 1.0 / segs.len() as f64);
        }
        Ok(acc)
    }

    fn train(&self, store: &mut ParamStore, trajs: &[Trajectory]) -> Result<Vec<EpochLog>> {
        let cfg = self.config;
        let mut adam = Adam::new(cfg.base_lr);
        let mut log = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let lr = cosine_lr(cfg.base_lr, epoch, cfg.epochs);
            let interval = teacher_forcing_interval(epoch, cfg.epochs, cfg.reset_min, cfg.reset_max);
            let segs = self.segments(trajs, interval);
            let mut acc = LossComponents::default();
            let mut clipped = 0;
            for seg in &segs {
                let mut tape = Tape::new();
                let params = store.bind(&mut tape, |n| self.plan.trainable(n));
                let (loss, comps) = self.segment_loss(&mut tape, &params, store, seg, epoch)?;
                let grads = tape.backward(loss)?;
                let mut grads: BTreeMap<String, Vec<f64>> = params.collect(&tape, &grads);
                drop(tape);
                let (norm, was_clipped) = clip_global_norm(&mut grads, cfg.grad_clip);
                if !norm.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        trajectory: seg.index,
                        frame: seg.start,
                    });
                }
                clipped += usize::from(was_clipped);
                adam.step(store, &grads, lr);
                acc.add_scaled(&comps, 1.0 / segs.len() as f64);
            }
            log.push(EpochLog {
                epoch,
                stage: self.plan.stage,
                total: acc.total(),
                components: acc,
                lr,
                reset_interval: interval,
                segments: segs.len(),
                clipped,
            });
        }
        Ok(log)
    }
}

fn deformation_sample(dataset: &Dataset, horizon_cap: usize) -> Vec<Mat3> {
    let mut fs = Vec::new();
    for t in &dataset.train {
        for f in &t.frames[..=horizon_cap.min(t.len() - 1)] {
            fs.extend(fem::deformation_gradients(&f.state.positions, &dataset.mesh));
        }
    }
    fs
}

/// Fits input statistics of the integration module from the training data.
/// Spreads are floored so that near-static data cannot blow up the
/// normalized inputs: forces by the mean vertex weight, velocity changes by
/// one frame of free fall, velocities by a tenth of their overall RMS.
pub fn fit_integration_stats(dataset: &Dataset, config: &TrainConfig) -> IntegrationStats {
    let horizon_cap = config.horizon_cap;
    let (mut x, mut v, mut f, mut dv) = (
        ChannelMoments::default(),
        ChannelMoments::default(),
        ChannelMoments::default(),
        ChannelMoments::default(),
    );
    let mut have_forces = true;
    for t in &dataset.train {
        let last = horizon_cap.min(t.len() - 1);
        for k in 0..=last {
            let s = &t.frames[k].state;
            s.positions.iter().for_each(|p| x.push(p));
            s.velocities.iter().for_each(|p| v.push(p));
            match &t.frames[k].forces {
                Some(fs) => fs.iter().for_each(|p| f.push(p)),
                None => have_forces = false,
            }
            if k < last {
                let n = &t.frames[k + 1].state;
                for i in 0..s.n_vertices() {
                    dv.push(&linalg::sub(n.velocities[i], s.velocities[i]));
                }
            }
        }
    }
    let floor = 1e-6;
    let g = linalg::norm(config.gravity);
    let dt = dataset.train[0].dt_frame;
    let m = &dataset.mesh.vertex_masses;
    let weight = g * m.iter().sum::<f64>() / m.len() as f64;
    let at_least = |s: Vec3, lo: f64| s.map(|c| c.max(lo));
    let v_rms = v.rms(floor);
    let v_overall = libm::sqrt(linalg::dot(v_rms, v_rms) / 3.0);
    let mut stats = IntegrationStats {
        x_mean: x.mean(),
        x_std: x.std(floor),
        v_mean: v.mean(),
        v_std: at_least(v.std(floor), (0.1 * v_overall).max(g * dt)),
        dv_scale: at_least(dv.rms(floor), g * dt),
        ..Default::default()
    };
    if have_forces {
        stats.f_mean = f.mean();
        stats.f_std = at_least(f.std(floor), weight);
    } else {
        stats.f_std = [weight.max(floor); 3];
    }
    stats
}

fn check_prefix(store: &ParamStore, prefix: &str, what: &str) -> Result<()> {
    if store.has_prefix(prefix) {
        Ok(())
    } else {
        Err(Error::MissingParameter(alloc::format!("{what} checkpoint lacks {prefix} parameters")))
    }
}

fn run(stage: Stage, dataset: &Dataset, mut store: ParamStore, material: Option<&MaterialParams>, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    let plan = Plan::build(stage, &store, material, config)?;
    if plan.w_force > 0.0 && !dataset.has_forces() {
        return Err(Error::MissingForces(0));
    }
    let runner = Runner {
        plan,
        ops: FemOps::new(&dataset.mesh),
        scales: LossScales::for_dataset(dataset, config),
        config,
    };
    let log = runner.train(&mut store, &dataset.train)?;
    store.stage = String::from(stage.name());
    Ok(TrainReport {
        store,
        log,
        scales: runner.scales,
    })
}

fn fresh_constitutive(dataset: &Dataset, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    let net = ConstitutiveNet::new(&config.constitutive_hidden, config.stress_scale)?;
    let mut store = ParamStore::new(config.seed);
    net.init(&mut store, rng)?;
    net.fit_normalization(&mut store, &deformation_sample(dataset, config.horizon_cap))?;
    Ok(store)
}

fn fresh_integration(dataset: &Dataset, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    let mut store = ParamStore::new(config.seed);
    IntegrationNet::new().init(&mut store, rng, &fit_integration_stats(dataset, config))?;
    Ok(store)
}

/// Fresh constitutive parameters with statistics fitted to `dataset`.
pub fn init_constitutive(dataset: &Dataset, config: &TrainConfig) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    fresh_constitutive(dataset, config, &mut rng)
}

/// Fresh integration parameters with statistics fitted to `dataset`.
pub fn init_integration(dataset: &Dataset, config: &TrainConfig) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    fresh_integration(dataset, config, &mut rng)
}

/// Stage-1 constitutive pretraining with the analytic integrator in the loop.
pub fn train_constitutive(dataset: &Dataset, config: &TrainConfig) -> Result<TrainReport> {
    if !dataset.has_forces() {
        return Err(Error::MissingForces(0));
    }
    let store = init_constitutive(dataset, config)?;
    run(Stage::Constitutive, dataset, store, None, config)
}

/// Stage-1 integration pretraining with the analytic material in the loop.
pub fn train_integration(dataset: &Dataset, material: &MaterialParams, config: &TrainConfig) -> Result<TrainReport> {
    let store = init_integration(dataset, config)?;
    run(Stage::Integration, dataset, store, Some(material), config)
}

/// Stage-2 joint finetuning of both pretrained modules.
pub fn joint_finetune(dataset: &Dataset, constitutive: &ParamStore, integration: &ParamStore, config: &TrainConfig) -> Result<TrainReport> {
    check_prefix(constitutive, "constitutive/", "constitutive")?;
    check_prefix(integration, "integration/", "integration")?;
    let mut store = ParamStore::new(config.seed);
    store.merge(constitutive);
    store.merge(integration);
    run(Stage::Finetune, dataset, store, None, config)
}

/// Finetuning from positions alone, for data without recorded forces.
pub fn finetune_positions_only(dataset: &Dataset, pretrained: &ParamStore, config: &TrainConfig) -> Result<TrainReport> {
    check_prefix(pretrained, "constitutive/", "pretrained")?;
    check_prefix(pretrained, "integration/", "pretrained")?;
    let mut store = pretrained.clone();
    store.seed = config.seed;
    run(Stage::PositionsOnly, dataset, store, None, config)
}

/// Both modules trained together from scratch on positions only.
pub fn joint_from_scratch(dataset: &Dataset, config: &TrainConfig) -> Result<TrainReport> {
    let mut store = init_constitutive(dataset, config)?;
    store.merge(&init_integration(dataset, config)?);
    run(Stage::JointScratch, dataset, store, None, config)
}

/// Average weighted loss terms of `stage` for `store` on `trajs` at a fixed
/// reset interval, without training. Pass the training set's `scales` to
/// make losses comparable across splits.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_stage(
    stage: Stage,
    store: &ParamStore,
    mesh: &TetMesh,
    trajs: &[Trajectory],
    material: Option<&MaterialParams>,
    config: &TrainConfig,
    scales: &LossScales,
    interval: usize,
) -> Result<LossComponents> {
    let plan = Plan::build(stage, store, material, config)?;
    let runner = Runner {
        plan,
        ops: FemOps::new(mesh),
        scales: *scales,
        config,
    };
    runner.evaluate(store, trajs, interval.max(1))
}

/// Loss of the segment covering frames `0..=steps` of `traj` under `stage`,
/// with gradients for the parameters that stage trains.
#[allow(clippy::too_many_arguments)]
pub fn segment_gradients(
    stage: Stage,
    store: &ParamStore,
    mesh: &TetMesh,
    traj: &Trajectory,
    material: Option<&MaterialParams>,
    config: &TrainConfig,
    scales: &LossScales,
    steps: usize,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    if steps == 0 || steps >= traj.len() {
        return Err(Error::InvalidParameter(alloc::format!("segment of {steps} steps on {} frames", traj.len())));
    }
    let plan = Plan::build(stage, store, material, config)?;
    let runner = Runner {
        plan,
        ops: FemOps::new(mesh),
        scales: *scales,
        config,
    };
    let seg = Segment { traj, index: 0, start: 0, len: steps };
    let mut tape = Tape::new();
    let params = store.bind(&mut tape, |n| runner.plan.trainable(n));
    let (loss, _) = runner.segment_loss(&mut tape, &params, store, &seg, 0)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item(), params.collect(&tape, &grads)))
}

/// Names of parameters whose values differ between two stores.
pub fn changed_parameters(a: &ParamStore, b: &ParamStore) -> Vec<String> {
    a.iter()
        .filter(|(k, v)| b.get(k).is_none_or(|w| w != *v))
        .map(|(k, _)| k.clone())
        .collect()
}

pub use constitutive::PREFIX as CONSTITUTIVE_PREFIX;
pub use integration::PREFIX as INTEGRATION_PREFIX;
