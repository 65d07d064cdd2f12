//! Metric exports: per-epoch CSV logs, JSON evaluation reports and OBJ
//! surface sequences.

use std::fmt::Write as _;
use std::path::Path;

use nmp_core::eval::EvalReport;
use nmp_core::fem::Trajectory;
use nmp_core::train::EpochLog;
use nmp_core::TetMesh;
use serde_json::{json, Value};

use crate::atomic::write_atomic;
use crate::error::{CliError, Result};

pub const EPOCH_CSV_HEADER: [&str; 11] = [
    "epoch", "stage", "total", "force", "velocity", "position", "volume", "lr", "reset_interval", "segments", "clipped",
];

pub fn epoch_csv(log: &[EpochLog]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::data(format!("metrics csv: {e}"));
    w.write_record(EPOCH_CSV_HEADER).map_err(err)?;
    for l in log {
        let c = &l.components;
        w.write_record([
            l.epoch.to_string(),
            l.stage.name().to_string(),
            l.total.to_string(),
            c.force.to_string(),
            c.velocity.to_string(),
            c.position.to_string(),
            c.volume.to_string(),
            l.lr.to_string(),
            l.reset_interval.to_string(),
            l.segments.to_string(),
            l.clipped.to_string(),
        ])
        .map_err(err)?;
    }
    w.into_inner().map_err(|e| CliError::data(format!("metrics csv: {e}")))
}

pub fn write_epoch_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    write_atomic(path, &epoch_csv(log)?)
}

pub fn report_json(report: &EvalReport) -> Value {
    let trajectories: Vec<Value> = report
        .trajectories
        .iter()
        .map(|t| {
            json!({
                "name": t.name,
                "rmse": t.horizons.iter().map(|h| json!({
                    "horizon": h.horizon,
                    "rmse": h.rmse,
                    "endpoint_rmse": h.endpoint_rmse,
                })).collect::<Vec<_>>(),
                "violations_per_frame": t.violations.per_frame,
                "violations_total": t.violations.total,
                "divergence_frame": t.divergence,
                "partial": t.partial,
            })
        })
        .collect();
    let aggregate: Vec<Value> = report
        .aggregate
        .iter()
        .map(|a| {
            json!({
                "horizon": a.horizon,
                "rmse_mean": a.mean,
                "rmse_std": a.std,
                "endpoint_rmse_mean": a.endpoint_mean,
                "endpoint_rmse_std": a.endpoint_std,
            })
        })
        .collect();
    json!({
        "config": report.config,
        "trajectories": trajectories,
        "aggregate": aggregate,
        "violations_total": report.total_violations,
        "ms_per_1000_frames": report.ms_per_1000_frames,
    })
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&report_json(report)).expect("report serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Boundary surface of one frame as Wavefront OBJ, vertices renumbered to
/// the surface only.
pub fn surface_obj(mesh: &TetMesh, positions: &[[f64; 3]], faces: &[[usize; 3]]) -> String {
    let mut index = vec![usize::MAX; mesh.n_vertices()];
    let mut order = Vec::new();
    for &i in faces.iter().flatten() {
        if index[i] == usize::MAX {
            index[i] = order.len();
            order.push(i);
        }
    }
    let mut s = String::new();
    for &i in &order {
        let p = positions[i];
        let _ = writeln!(s, "v {} {} {}", p[0], p[1], p[2]);
    }
    for f in faces {
        let _ = writeln!(s, "f {} {} {}", index[f[0]] + 1, index[f[1]] + 1, index[f[2]] + 1);
    }
    s
}

/// Writes `frame_00000.obj`, ... for every `stride`-th frame; returns the
/// number of files.
pub fn write_obj_sequence(dir: &Path, mesh: &TetMesh, traj: &Trajectory, stride: usize) -> Result<usize> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let faces = mesh.boundary_faces();
    let mut n = 0;
    for (k, f) in traj.frames.iter().enumerate().step_by(stride.max(1)) {
        let path = dir.join(format!("frame_{k:05}.obj"));
        write_atomic(&path, surface_obj(mesh, &f.state.positions, &faces).as_bytes())?;
        n += 1;
    }
    Ok(n)
}
