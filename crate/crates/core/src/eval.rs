//! Rollouts under any mix of neural and analytic modules, and the accuracy
//! and physical-soundness metrics computed on them.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::constitutive::ConstitutiveModel;
use crate::diff::ParamStore;
use crate::error::{Error, Result};
use crate::fem::{self, FemOps, Frame, SimState, Trajectory, TrajectoryMeta};
use crate::integration::IntegrationModel;
use crate::linalg::{self, Vec3};
use crate::materials::MaterialParams;
use crate::mesh::TetMesh;

#[derive(Clone, Copy, Debug)]
pub enum ConstitutiveChoice<'a> {
    Neural(&'a ParamStore),
    Analytic(MaterialParams),
}

#[derive(Clone, Copy, Debug)]
pub enum IntegratorChoice<'a> {
    Neural(&'a ParamStore),
    /// `substeps` analytic steps per frame.
    SemiImplicit { substeps: usize },
}

impl IntegratorChoice<'_> {
    /// Semi-implicit integration at internal step `dt_sub`.
    pub fn semi_implicit_at(dt_frame: f64, dt_sub: f64) -> Result<Self> {
        let n = libm::round(dt_frame / dt_sub);
        if !(n >= 1.0) || (n * dt_sub - dt_frame).abs() > 1e-9 * dt_frame {
            return Err(Error::InvalidParameter(format!(
                "substep {dt_sub} does not divide frame step {dt_frame}"
            )));
        }
        Ok(IntegratorChoice::SemiImplicit { substeps: n as usize })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModuleConfig<'a> {
    pub constitutive: ConstitutiveChoice<'a>,
    pub integration: IntegratorChoice<'a>,
}

impl ModuleConfig<'_> {
    pub fn label(&self) -> String {
        let c = match self.constitutive {
            ConstitutiveChoice::Neural(_) => String::from("neural"),
            ConstitutiveChoice::Analytic(m) => String::from(m.model.name()),
        };
        let i = match self.integration {
            IntegratorChoice::Neural(_) => String::from("neural"),
            IntegratorChoice::SemiImplicit { substeps } => format!("semi-implicit/{substeps}"),
        };
        format!("{c}+{i}")
    }
}

/// Completed frames of a rollout and where it stopped, if it diverged.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub divergence: Option<usize>,
}

impl Rollout {
    pub fn completed(&self) -> bool {
        self.divergence.is_none()
    }
}

enum Forces<'a> {
    Neural(ConstitutiveModel<'a>),
    Analytic(MaterialParams),
}

impl Forces<'_> {
    fn eval(&mut self, ops: &FemOps, x: &[Vec3]) -> Result<Vec<Vec3>> {
        match self {
            Forces::Neural(m) => m.internal_forces(ops, x),
            Forces::Analytic(mat) => fem::internal_forces(mat, x, &ops.mesh),
        }
    }
}

/// Runs `n_frames` frames from `initial`. Divergence (non-finite values or
/// an inverted analytic element) ends the rollout early and is reported.
pub fn rollout(config: &ModuleConfig<'_>, mesh: &TetMesh, initial: &SimState, n_frames: usize, dt_frame: f64, gravity: Vec3) -> Result<Rollout> {
    if initial.n_vertices() != mesh.n_vertices() || initial.velocities.len() != mesh.n_vertices() {
        return Err(Error::ShapeMismatch(format!(
            "initial state has {} vertices, mesh has {}",
            initial.n_vertices(),
            mesh.n_vertices()
        )));
    }
    if !(dt_frame > 0.0) {
        return Err(Error::InvalidParameter(String::from("dt_frame must be positive")));
    }
    let ops = FemOps::new(mesh);
    let mut forces = match config.constitutive {
        ConstitutiveChoice::Neural(s) => Forces::Neural(ConstitutiveModel::new(s)?),
        ConstitutiveChoice::Analytic(m) => Forces::Analytic(m),
    };
    let mut integrator = match config.integration {
        IntegratorChoice::Neural(s) => Some(IntegrationModel::new(s)?),
        IntegratorChoice::SemiImplicit { substeps } => {
            if substeps == 0 {
                return Err(Error::InvalidParameter(String::from("substeps must be at least 1")));
            }
            None
        }
    };
    let meta = TrajectoryMeta {
        generator: format!("rollout:{}", config.label()),
        ..Default::default()
    };
    let mut frames = Vec::with_capacity(n_frames + 1);
    let mut state = initial.clone();
    let finish = |frames: Vec<Frame>, divergence| Rollout {
        trajectory: Trajectory { frames, dt_frame, meta: meta.clone() },
        divergence,
    };
    let mut f = match forces.eval(&ops, &state.positions) {
        Ok(f) => f,
        Err(Error::InvertedElement { .. } | Error::NonFinite(_)) => return Ok(finish(frames, Some(0))),
        Err(e) => return Err(e),
    };
    frames.push(Frame { state: state.clone(), forces: Some(f.clone()) });
    for frame in 1..=n_frames {
        let advanced: Result<()> = (|| {
            match (&mut integrator, config.integration) {
                (Some(model), _) => {
                    state = model.step(&ops, &state, &f, dt_frame)?;
                }
                (None, IntegratorChoice::SemiImplicit { substeps }) => {
                    let dt = dt_frame / substeps as f64;
                    for sub in 0..substeps {
                        if sub > 0 {
                            f = forces.eval(&ops, &state.positions)?;
                        }
                        fem::semi_implicit_step_in_place(&mut state, &f, mesh, dt, gravity);
                        fem::apply_constraints_in_place(&mut state, mesh);
                    }
                }
                (None, IntegratorChoice::Neural(_)) => unreachable!(),
            }
            if !state.is_finite() {
                return Err(Error::Divergence { frame });
            }
            f = forces.eval(&ops, &state.positions)?;
            if f.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { frame });
            }
            Ok(())
        })();
        match advanced {
            Ok(()) => frames.push(Frame { state: state.clone(), forces: Some(f.clone()) }),
            Err(Error::InvertedElement { .. } | Error::NonFinite(_) | Error::Divergence { .. }) => {
                return Ok(finish(frames, Some(frame)));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(finish(frames, None))
}

fn squared_error(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| {
            let d = linalg::sub(*p, *q);
            linalg::dot(d, d)
        })
        .sum()
}

fn check_pair(pred: &Trajectory, reference: &Trajectory, horizon: usize) -> Result<()> {
    if pred.n_vertices() != reference.n_vertices() {
        return Err(Error::ShapeMismatch(format!(
            "{} vs {} vertices",
            pred.n_vertices(),
            reference.n_vertices()
        )));
    }
    if horizon == 0 || horizon >= pred.len() || horizon >= reference.len() {
        return Err(Error::ShapeMismatch(format!(
            "horizon {horizon} outside trajectories of {} and {} frames",
            pred.len(),
            reference.len()
        )));
    }
    Ok(())
}

/// Position RMSE over frames `1..=horizon`, all vertices and coordinates.
pub fn rollout_rmse(pred: &Trajectory, reference: &Trajectory, horizon: usize) -> Result<f64> {
    check_pair(pred, reference, horizon)?;
    let n = pred.n_vertices() as f64;
    let sq: f64 = (1..=horizon)
        .map(|k| squared_error(&pred.frames[k].state.positions, &reference.frames[k].state.positions))
        .sum();
    Ok(libm::sqrt(sq / (horizon as f64 * n * 3.0)))
}

/// Position RMSE of frame `horizon` alone.
pub fn endpoint_rmse(pred: &Trajectory, reference: &Trajectory, horizon: usize) -> Result<f64> {
    check_pair(pred, reference, horizon)?;
    let sq = squared_error(&pred.frames[horizon].state.positions, &reference.frames[horizon].state.positions);
    Ok(libm::sqrt(sq / (pred.n_vertices() as f64 * 3.0)))
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct VolumeViolations {
    pub per_frame: Vec<usize>,
    pub total: usize,
}

/// Elements with `|det F − 1| > threshold`, per frame.
pub fn volume_violations(traj: &Trajectory, mesh: &TetMesh, threshold: f64) -> VolumeViolations {
    let per_frame: Vec<usize> = traj
        .frames
        .iter()
        .map(|f| {
            fem::deformation_gradients(&f.state.positions, mesh)
                .iter()
                .filter(|m| (m.determinant() - 1.0).abs() > threshold)
                .count()
        })
        .collect();
    let total = per_frame.iter().sum();
    VolumeViolations { per_frame, total }
}

/// Relative RMS error of neural internal forces at the reference states:
/// squared error and squared reference magnitude are each accumulated over
/// all frames before taking the ratio, so near-zero frames cannot dominate.
pub fn fint_fidelity(store: &ParamStore, reference: &Trajectory, mesh: &TetMesh) -> Result<f64> {
    let ops = FemOps::new(mesh);
    let mut model = ConstitutiveModel::new(store)?;
    let (mut err, mut norm) = (0.0, 0.0);
    for (k, frame) in reference.frames.iter().enumerate() {
        let target = frame.forces.as_ref().ok_or(Error::MissingForces(k))?;
        let pred = model.internal_forces(&ops, &frame.state.positions)?;
        err += squared_error(&pred, target);
        norm += target.iter().map(|v| linalg::dot(*v, *v)).sum::<f64>();
    }
    if norm == 0.0 {
        return Err(Error::MissingForces(0));
    }
    Ok(libm::sqrt(err / norm))
}

/// Largest vertex displacement relative to the centroid, measured against
/// the first frame; rigid translation does not count.
pub fn max_deformation_displacement(traj: &Trajectory) -> f64 {
    let Some(first) = traj.frames.first() else {
        return 0.0;
    };
    let c0 = fem::centroid(&first.state.positions);
    let mut best: f64 = 0.0;
    for f in &traj.frames {
        let c = fem::centroid(&f.state.positions);
        for (p, p0) in f.state.positions.iter().zip(&first.state.positions) {
            let d = linalg::sub(linalg::sub(*p, c), linalg::sub(*p0, c0));
            best = best.max(linalg::norm(d));
        }
    }
    best
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HorizonError {
    pub horizon: usize,
    /// Frame-averaged RMSE.
    pub rmse: f64,
    pub endpoint_rmse: f64,
}

/// Metrics of one rollout against its reference.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryReport {
    pub name: String,
    pub horizons: Vec<HorizonError>,
    pub violations: VolumeViolations,
    pub divergence: Option<usize>,
    /// Horizons were cut to the completed frames.
    pub partial: bool,
}

/// Compares `pred` with `reference` at each requested horizon, clipping
/// horizons to what both trajectories cover.
pub fn trajectory_report(
    name: &str,
    rollout: &Rollout,
    reference: &Trajectory,
    mesh: &TetMesh,
    horizons: &[usize],
    violation_threshold: f64,
) -> Result<TrajectoryReport> {
    let pred = &rollout.trajectory;
    let available = pred.len().min(reference.len()).saturating_sub(1);
    let mut partial = false;
    let mut rows = Vec::new();
    for &h in horizons {
        let used = h.min(available);
        if used < h {
            partial = true;
        }
        if used == 0 {
            continue;
        }
        rows.push(HorizonError {
            horizon: used,
            rmse: rollout_rmse(pred, reference, used)?,
            endpoint_rmse: endpoint_rmse(pred, reference, used)?,
        });
    }
    Ok(TrajectoryReport {
        name: String::from(name),
        horizons: rows,
        violations: volume_violations(pred, mesh, violation_threshold),
        divergence: rollout.divergence,
        partial: partial || rollout.divergence.is_some(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HorizonAggregate {
    pub horizon: usize,
    pub mean: f64,
    pub std: f64,
    pub endpoint_mean: f64,
    pub endpoint_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub config: String,
    pub trajectories: Vec<TrajectoryReport>,
    pub aggregate: Vec<HorizonAggregate>,
    pub total_violations: usize,
    /// Wall-clock per 1000-frame rollout, when measured.
    pub ms_per_1000_frames: Option<f64>,
}

impl EvalReport {
    pub fn new(config: String, trajectories: Vec<TrajectoryReport>, horizons: &[usize]) -> Self {
        let aggregate = horizons
            .iter()
            .filter_map(|&h| {
                let rows: Vec<&HorizonError> = trajectories
                    .iter()
                    .filter_map(|t| t.horizons.iter().find(|r| r.horizon == h))
                    .collect();
                if rows.is_empty() {
                    return None;
                }
                let (mean, std) = mean_std(&rows.iter().map(|r| r.rmse).collect::<Vec<_>>());
                let (endpoint_mean, endpoint_std) = mean_std(&rows.iter().map(|r| r.endpoint_rmse).collect::<Vec<_>>());
                Some(HorizonAggregate { horizon: h, mean, std, endpoint_mean, endpoint_std })
            })
            .collect();
        let total_violations = trajectories.iter().map(|t| t.violations.total).sum();
        EvalReport {
            config,
            trajectories,
            aggregate,
            total_violations,
            ms_per_1000_frames: None,
        }
    }
}
