//! Core of a modular neural elastic simulator.
//!
//! A tetrahedral finite element pipeline (deformation gradients, stresses,
//! force assembly, semi-implicit integration, constraints) in which the
//! material law and the time integrator can each be replaced by a neural
//! network with the same interface. The crate also carries the reverse-mode
//! differentiation used to train those networks through simulated rollouts,
//! the staged training loops and the evaluation metrics.
//!
//! Everything here needs only `alloc`; file formats and the command line
//! live in the companion `nmp` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;
#[cfg(all(feature = "std", not(test)))]
extern crate std;

pub mod constitutive;
pub mod diff;
pub mod error;
pub mod eval;
pub mod fem;
pub mod integration;
pub mod linalg;
pub mod materials;
pub mod mesh;
pub mod train;

pub use error::{Error, Result};
pub use fem::{SimConfig, SimState, Trajectory};
pub use linalg::{Mat3, Vec3};
pub use materials::{MaterialModel, MaterialParams};
pub use mesh::{make_cube_mesh, TetMesh, Tessellation};
