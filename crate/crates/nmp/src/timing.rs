use std::time::Instant;

use nmp_core::eval::{rollout, ModuleConfig};
use nmp_core::fem::SimState;
use nmp_core::{TetMesh, Vec3};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    /// Wall-clock of each measured rollout.
    pub samples_ms: Vec<f64>,
    pub median_ms: f64,
}

impl Timing {
    /// Largest deviation from the median, relative to it.
    pub fn spread(&self) -> f64 {
        if self.median_ms == 0.0 {
            return 0.0;
        }
        self.samples_ms.iter().map(|s| (s - self.median_ms).abs()).fold(0.0, f64::max) / self.median_ms
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => 0.0,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Median wall-clock of `repeats` (at least 3) rollouts after one warm-up.
pub fn time_rollout(
    config: &ModuleConfig<'_>,
    mesh: &TetMesh,
    initial: &SimState,
    n_frames: usize,
    dt_frame: f64,
    gravity: Vec3,
    repeats: usize,
) -> Result<Timing> {
    rollout(config, mesh, initial, n_frames, dt_frame, gravity)?;
    let samples_ms = (0..repeats.max(3))
        .map(|_| {
            let t = Instant::now();
            rollout(config, mesh, initial, n_frames, dt_frame, gravity)?;
            Ok(t.elapsed().as_secs_f64() * 1e3)
        })
        .collect::<Result<Vec<f64>>>()?;
    let median_ms = median(&samples_ms);
    Ok(Timing { samples_ms, median_ms })
}
