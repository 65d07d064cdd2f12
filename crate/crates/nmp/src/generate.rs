//! Ground-truth dataset generation with sampled initial conditions.

use nmp_core::fem::{apply_constraints, centroid, simulate_trajectory, SimConfig, SimState, Trajectory};
use nmp_core::linalg::{self, uniform_rotation};
use nmp_core::{MaterialParams, TetMesh};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::GenSection;
use crate::error::{CliError, Result};

/// Initial state for sample `seed`: optionally a uniformly random rotation
/// about the centroid, lifted `clearance` above the ground, moving with one
/// velocity drawn from the configured box. Fixed vertices stay at rest.
pub fn sample_initial_state(mesh: &TetMesh, gen: &GenSection, seed: u64) -> Result<SimState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = SimState::at_rest(mesh);
    if gen.random_orientation {
        if !mesh.fixed_vertices.is_empty() {
            return Err(CliError::Config("gen.random_orientation needs a mesh without fixed vertices".into()));
        }
        let r = uniform_rotation([rng.random(), rng.random(), rng.random()]);
        let c = centroid(&state.positions);
        for p in &mut state.positions {
            *p = linalg::add(c, r.mul_vec(linalg::sub(*p, c)));
        }
    }
    if let (Some(ground), true) = (mesh.ground_height, mesh.fixed_vertices.is_empty()) {
        let low = state.positions.iter().map(|p| p[2]).fold(f64::INFINITY, f64::min);
        let lift = ground + gen.clearance - low;
        for p in &mut state.positions {
            p[2] += lift;
        }
    }
    let mut v = [0.0; 3];
    for (a, c) in v.iter_mut().enumerate() {
        let (lo, hi) = (gen.velocity_min[a], gen.velocity_max[a]);
        *c = if lo < hi { rng.random_range(lo..hi) } else { lo };
    }
    for (i, u) in state.velocities.iter_mut().enumerate() {
        if !mesh.is_fixed(i) {
            *u = v;
        }
    }
    Ok(apply_constraints(&state, mesh))
}

#[derive(Debug)]
pub struct Generated {
    /// `(sample seed, trajectory)`.
    pub train: Vec<(u64, Trajectory)>,
    pub val: Vec<(u64, Trajectory)>,
    /// Samples dropped because the simulation diverged, with the reason.
    pub skipped: Vec<(u64, String)>,
}

/// Sample `i` uses seed `gen.seed + i`; the first `n_train` samples form the
/// training split. Samples run in parallel and are independent, so output
/// does not depend on the thread count.
pub fn generate_dataset(mesh: &TetMesh, material: &MaterialParams, sim: &SimConfig, gen: &GenSection, mesh_name: &str) -> Result<Generated> {
    gen.validate()?;
    let total = gen.n_train + gen.n_val;
    let results: Vec<(u64, Result<Trajectory>)> = (0..total as u64)
        .into_par_iter()
        .map(|i| {
            let seed = gen.seed.wrapping_add(i);
            let run = || -> Result<Trajectory> {
                let init = sample_initial_state(mesh, gen, seed)?;
                let mut t = simulate_trajectory(mesh, material, &init, gen.n_frames, sim)?;
                t.meta.seed = seed;
                t.meta.mesh = mesh_name.into();
                Ok(t)
            };
            (seed, run())
        })
        .collect();
    let mut out = Generated { train: Vec::new(), val: Vec::new(), skipped: Vec::new() };
    for (i, (seed, r)) in results.into_iter().enumerate() {
        match r {
            Ok(t) if i < gen.n_train => out.train.push((seed, t)),
            Ok(t) => out.val.push((seed, t)),
            Err(CliError::Core(e @ (nmp_core::Error::Divergence { .. } | nmp_core::Error::InvertedElement { .. }))) => {
                out.skipped.push((seed, e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}
