//! Finite element dynamics: deformation gradients, force assembly,
//! semi-implicit Euler and constraint projection, in plain and
//! differentiable (tape) form.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::diff::{BackwardCtx, BackwardOp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat3, Vec3};
use crate::materials::{self, MaterialParams};
use crate::mesh::{shape_matrix, TetMesh};

pub const GRAVITY: Vec3 = [0.0, 0.0, -9.8];

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SimState {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
}

impl SimState {
    pub fn at_rest(mesh: &TetMesh) -> Self {
        SimState {
            positions: mesh.vertices_rest.clone(),
            velocities: vec![[0.0; 3]; mesh.n_vertices()],
        }
    }

    pub fn n_vertices(&self) -> usize {
        self.positions.len()
    }

    pub fn is_finite(&self) -> bool {
        self.positions
            .iter()
            .chain(&self.velocities)
            .flatten()
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimConfig {
    pub dt_frame: f64,
    pub substeps: usize,
    pub gravity: Vec3,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt_frame: 5e-4,
            substeps: 50,
            gravity: GRAVITY,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.substeps == 0 || !(self.dt_frame > 0.0) || !self.dt_frame.is_finite() {
            return Err(Error::InvalidParameter(alloc::format!(
                "need dt_frame > 0 and substeps >= 1, got {} and {}",
                self.dt_frame,
                self.substeps
            )));
        }
        if self.gravity.iter().any(|g| !g.is_finite()) {
            return Err(Error::InvalidParameter("non-finite gravity".into()));
        }
        Ok(())
    }

    pub fn dt_substep(&self) -> f64 {
        self.dt_frame / self.substeps as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub state: SimState,
    /// Internal forces at `state.positions`, when recorded.
    pub forces: Option<Vec<Vec3>>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrajectoryMeta {
    pub generator: String,
    pub seed: u64,
    pub material: Option<MaterialParams>,
    pub mesh: String,
}

/// Frame 0 is the initial state; frame `k` is the state after `k` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<Frame>,
    pub dt_frame: f64,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn n_vertices(&self) -> usize {
        self.frames.first().map_or(0, |f| f.state.n_vertices())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn has_forces(&self) -> bool {
        !self.frames.is_empty() && self.frames.iter().all(|f| f.forces.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_vertices();
        if !(self.dt_frame > 0.0) {
            return Err(Error::InvalidParameter("trajectory dt_frame must be positive".into()));
        }
        let any_forces = self.frames.iter().any(|f| f.forces.is_some());
        for (k, f) in self.frames.iter().enumerate() {
            let bad_forces = match &f.forces {
                Some(fs) => fs.len() != n,
                None => any_forces,
            };
            if f.state.positions.len() != n || f.state.velocities.len() != n || bad_forces {
                return Err(Error::ShapeMismatch(alloc::format!("trajectory frame {k}")));
            }
        }
        Ok(())
    }

    /// Drops stored forces, as for externally observed data.
    pub fn without_forces(mut self) -> Self {
        for f in &mut self.frames {
            f.forces = None;
        }
        self
    }

    /// First `n + 1` frames.
    pub fn truncated(&self, n: usize) -> Self {
        Trajectory {
            frames: self.frames[..(n + 1).min(self.frames.len())].to_vec(),
            dt_frame: self.dt_frame,
            meta: self.meta.clone(),
        }
    }
}

/// `F_e = Ds_e · Dm_e⁻¹` for every element.
pub fn deformation_gradients(positions: &[Vec3], mesh: &TetMesh) -> Vec<Mat3> {
    assert_eq!(positions.len(), mesh.n_vertices(), "positions/mesh size mismatch");
    mesh.tets
        .iter()
        .zip(&mesh.dm_inv)
        .map(|(t, dm_inv)| shape_matrix(positions, t) * *dm_inv)
        .collect()
}

#[inline]
fn scatter_element(forces: &mut [Vec3], tet: &[usize; 4], h: &Mat3) {
    for k in 0..3 {
        for i in 0..3 {
            forces[tet[k + 1]][i] += h[(i, k)];
            forces[tet[0]][i] -= h[(i, k)];
        }
    }
}

/// Nodal internal forces from per-element stresses, accumulated in element
/// order: `H_e = −V_e P_e Dm_e⁻ᵀ`, column `k` to vertex `k + 1`, minus the
/// column sum to vertex 0.
pub fn assemble_forces(stresses: &[Mat3], mesh: &TetMesh) -> Vec<Vec3> {
    assert_eq!(stresses.len(), mesh.n_elements(), "one stress per element");
    let mut forces = vec![[0.0; 3]; mesh.n_vertices()];
    for (e, p) in stresses.iter().enumerate() {
        let h = *p * mesh.dm_inv[e].transpose() * (-mesh.rest_volumes[e]);
        scatter_element(&mut forces, &mesh.tets[e], &h);
    }
    forces
}

pub fn element_stresses(material: &MaterialParams, fs: &[Mat3]) -> Result<Vec<Mat3>> {
    fs.iter()
        .enumerate()
        .map(|(e, f)| {
            materials::pk1_stress(material, f).map_err(|err| match err {
                Error::InvertedElement { det, .. } => Error::InvertedElement {
                    element: Some(e),
                    det,
                },
                other => other,
            })
        })
        .collect()
}

/// Analytic internal forces at `positions`.
pub fn internal_forces(material: &MaterialParams, positions: &[Vec3], mesh: &TetMesh) -> Result<Vec<Vec3>> {
    let fs = deformation_gradients(positions, mesh);
    Ok(assemble_forces(&element_stresses(material, &fs)?, mesh))
}

/// Total elastic energy `Σ_e V_e W(F_e)`.
pub fn total_energy(material: &MaterialParams, positions: &[Vec3], mesh: &TetMesh) -> Result<f64> {
    let fs = deformation_gradients(positions, mesh);
    let mut e = 0.0;
    for (f, v) in fs.iter().zip(&mesh.rest_volumes) {
        e += v * materials::energy_density(material, f)?;
    }
    Ok(e)
}

/// `v' = v + dt (M⁻¹ f + g)`, `x' = x + dt v'`.
pub fn semi_implicit_step(state: &SimState, f_int: &[Vec3], mesh: &TetMesh, dt: f64, gravity: Vec3) -> SimState {
    let mut next = state.clone();
    semi_implicit_step_in_place(&mut next, f_int, mesh, dt, gravity);
    next
}

pub fn semi_implicit_step_in_place(state: &mut SimState, f_int: &[Vec3], mesh: &TetMesh, dt: f64, gravity: Vec3) {
    debug_assert!(dt > 0.0);
    for i in 0..state.positions.len() {
        let inv_m = 1.0 / mesh.vertex_masses[i];
        for c in 0..3 {
            state.velocities[i][c] += dt * (f_int[i][c] * inv_m + gravity[c]);
            state.positions[i][c] += dt * state.velocities[i][c];
        }
    }
}

/// Resets fixed vertices to rest and projects vertices below the floor
/// onto it, zeroing only their vertical velocity.
pub fn apply_constraints(state: &SimState, mesh: &TetMesh) -> SimState {
    let mut next = state.clone();
    apply_constraints_in_place(&mut next, mesh);
    next
}

pub fn apply_constraints_in_place(state: &mut SimState, mesh: &TetMesh) {
    for &i in &mesh.fixed_vertices {
        state.positions[i] = mesh.vertices_rest[i];
        state.velocities[i] = [0.0; 3];
    }
    if let Some(h) = mesh.ground_height {
        for (x, v) in state.positions.iter_mut().zip(state.velocities.iter_mut()) {
            if x[2] < h {
                x[2] = h;
                v[2] = 0.0;
            }
        }
    }
}

/// Ground-truth rollout with `sim.substeps` analytic substeps per frame.
pub fn simulate_trajectory(
    mesh: &TetMesh,
    material: &MaterialParams,
    initial: &SimState,
    n_frames: usize,
    sim: &SimConfig,
) -> Result<Trajectory> {
    sim.validate()?;
    if initial.n_vertices() != mesh.n_vertices() || initial.velocities.len() != mesh.n_vertices() {
        return Err(Error::ShapeMismatch("initial state does not match mesh".into()));
    }
    let dt = sim.dt_substep();
    let mut state = initial.clone();
    let mut forces = internal_forces(material, &state.positions, mesh)?;
    let mut frames = Vec::with_capacity(n_frames + 1);
    frames.push(Frame {
        state: state.clone(),
        forces: Some(forces.clone()),
    });
    for frame in 1..=n_frames {
        for sub in 0..sim.substeps {
            if sub > 0 {
                forces = internal_forces(material, &state.positions, mesh).map_err(|e| annotate(e, frame))?;
            }
            semi_implicit_step_in_place(&mut state, &forces, mesh, dt, sim.gravity);
            apply_constraints_in_place(&mut state, mesh);
        }
        if !state.is_finite() {
            return Err(Error::Divergence { frame });
        }
        forces = internal_forces(material, &state.positions, mesh).map_err(|e| annotate(e, frame))?;
        frames.push(Frame {
            state: state.clone(),
            forces: Some(forces.clone()),
        });
    }
    Ok(Trajectory {
        frames,
        dt_frame: sim.dt_frame,
        meta: TrajectoryMeta {
            generator: String::from("fem-semi-implicit"),
            seed: 0,
            material: Some(*material),
            mesh: String::new(),
        },
    })
}

fn annotate(err: Error, frame: usize) -> Error {
    match err {
        Error::NonFinite(_) => Error::Divergence { frame },
        other => other,
    }
}

/// `Σ_e [max(|det F_e − 1| − ε, 0)]²`.
pub fn volume_loss(fs: &[Mat3], epsilon: f64) -> f64 {
    fs.iter()
        .map(|f| {
            let h = ((f.determinant() - 1.0).abs() - epsilon).max(0.0);
            h * h
        })
        .sum()
}

pub fn centroid(positions: &[Vec3]) -> Vec3 {
    let mut c = [0.0; 3];
    for p in positions {
        c = linalg::add(c, *p);
    }
    linalg::scale(c, 1.0 / positions.len().max(1) as f64)
}

#[inline]
fn mat3_at(data: &[f64], e: usize) -> Mat3 {
    Mat3::from_row_slice(&data[9 * e..9 * e + 9])
}

struct DeformationGradientsOp {
    x: Var,
    mesh: Arc<TetMesh>,
}

impl BackwardOp for DeformationGradientsOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, _out: &Tensor, g: &[f64]) {
        let Some(gx) = ctx.grad_mut(self.x) else {
            return;
        };
        for (e, tet) in self.mesh.tets.iter().enumerate() {
            let g_ds = mat3_at(g, e) * self.mesh.dm_inv[e].transpose();
            for k in 0..3 {
                for i in 0..3 {
                    gx[3 * tet[k + 1] + i] += g_ds[(i, k)];
                    gx[3 * tet[0] + i] -= g_ds[(i, k)];
                }
            }
        }
    }
}

struct AssembleForcesOp {
    stresses: Var,
    mesh: Arc<TetMesh>,
}

impl BackwardOp for AssembleForcesOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, _out: &Tensor, g: &[f64]) {
        let Some(gp) = ctx.grad_mut(self.stresses) else {
            return;
        };
        for (e, tet) in self.mesh.tets.iter().enumerate() {
            let mut g_h = Mat3::ZERO;
            for k in 0..3 {
                for i in 0..3 {
                    g_h[(i, k)] = g[3 * tet[k + 1] + i] - g[3 * tet[0] + i];
                }
            }
            let contrib = g_h * self.mesh.dm_inv[e] * (-self.mesh.rest_volumes[e]);
            for (d, c) in gp[9 * e..9 * e + 9].iter_mut().zip(contrib.to_array()) {
                *d += c;
            }
        }
    }
}

struct AnalyticStressOp {
    fs: Var,
    material: MaterialParams,
}

impl BackwardOp for AnalyticStressOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, _out: &Tensor, g: &[f64]) {
        let fs = ctx.value(self.fs);
        let Some(gf) = ctx.grad_mut(self.fs) else {
            return;
        };
        for e in 0..fs.rows {
            // forward already rejected inverted elements
            let Ok(v) = materials::pk1_stress_vjp(&self.material, &mat3_at(&fs.data, e), &mat3_at(g, e)) else {
                continue;
            };
            for (d, c) in gf[9 * e..9 * e + 9].iter_mut().zip(v.to_array()) {
                *d += c;
            }
        }
    }
}

struct VolumeHingeOp {
    fs: Var,
    /// `2 h sign(J − 1)` per element, zero inside the band.
    coeff: Vec<f64>,
}

impl BackwardOp for VolumeHingeOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, _out: &Tensor, g: &[f64]) {
        let fs = ctx.value(self.fs);
        let Some(gf) = ctx.grad_mut(self.fs) else {
            return;
        };
        for (e, &c) in self.coeff.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let cof = mat3_at(&fs.data, e).cofactor();
            for (d, v) in gf[9 * e..9 * e + 9].iter_mut().zip(cof.to_array()) {
                *d += g[0] * c * v;
            }
        }
    }
}

/// Differentiable FEM operations over `N × 3` position and `M × 9`
/// (row-major 3×3 per element) tensors.
#[derive(Clone, Debug)]
pub struct FemOps {
    pub mesh: Arc<TetMesh>,
}

impl FemOps {
    pub fn new(mesh: &TetMesh) -> Self {
        FemOps {
            mesh: Arc::new(mesh.clone()),
        }
    }

    pub fn deformation_gradients(&self, tape: &mut Tape, x: Var) -> Var {
        let xs = tape.value(x);
        assert_eq!(xs.shape(), (self.mesh.n_vertices(), 3), "positions tensor shape");
        let mut out = Vec::with_capacity(self.mesh.n_elements() * 9);
        for (tet, dm_inv) in self.mesh.tets.iter().zip(&self.mesh.dm_inv) {
            let x0 = xs.row_slice(tet[0]);
            let mut ds = Mat3::ZERO;
            for k in 0..3 {
                let xk = xs.row_slice(tet[k + 1]);
                for i in 0..3 {
                    ds[(i, k)] = xk[i] - x0[i];
                }
            }
            out.extend_from_slice(&(ds * *dm_inv).to_array());
        }
        let value = Tensor::from_vec(self.mesh.n_elements(), 9, out);
        let mesh = self.mesh.clone();
        tape.push_op(value, &[x], || DeformationGradientsOp { x, mesh })
    }

    pub fn assemble_forces(&self, tape: &mut Tape, stresses: Var) -> Var {
        let ps = tape.value(stresses);
        assert_eq!(ps.shape(), (self.mesh.n_elements(), 9), "stress tensor shape");
        let mut forces = vec![[0.0; 3]; self.mesh.n_vertices()];
        for e in 0..self.mesh.n_elements() {
            let h = mat3_at(&ps.data, e) * self.mesh.dm_inv[e].transpose() * (-self.mesh.rest_volumes[e]);
            scatter_element(&mut forces, &self.mesh.tets[e], &h);
        }
        let value = Tensor::from_vec3s(&forces);
        let mesh = self.mesh.clone();
        tape.push_op(value, &[stresses], || AssembleForcesOp { stresses, mesh })
    }

    pub fn analytic_stresses(&self, tape: &mut Tape, fs: Var, material: &MaterialParams) -> Result<Var> {
        let fv = tape.value(fs);
        let mats: Vec<Mat3> = (0..fv.rows).map(|e| mat3_at(&fv.data, e)).collect();
        let ps = element_stresses(material, &mats)?;
        let mut out = Vec::with_capacity(9 * ps.len());
        for p in &ps {
            out.extend_from_slice(&p.to_array());
        }
        let value = Tensor::from_vec(fv.rows, 9, out);
        let material = *material;
        Ok(tape.push_op(value, &[fs], || AnalyticStressOp { fs, material }))
    }

    pub fn analytic_forces(&self, tape: &mut Tape, x: Var, material: &MaterialParams) -> Result<Var> {
        let fs = self.deformation_gradients(tape, x);
        let ps = self.analytic_stresses(tape, fs, material)?;
        Ok(self.assemble_forces(tape, ps))
    }

    /// Velocity update with the analytic integrator: `v + dt (M⁻¹ f + g)`.
    pub fn semi_implicit_velocity(&self, tape: &mut Tape, v: Var, f: Var, dt: f64, gravity: Vec3) -> Var {
        let factors: Vec<f64> = self.mesh.vertex_masses.iter().map(|m| dt / m).collect();
        let a = tape.scale_rows(f, &factors);
        let v1 = tape.add(v, a);
        tape.add_row_const(v1, &linalg::scale(gravity, dt))
    }

    /// `x + dt v`, followed by constraint projection of both tensors.
    pub fn advance_and_constrain(&self, tape: &mut Tape, x: Var, v_next: Var, dt: f64) -> (Var, Var) {
        let x1 = tape.add_scaled(x, v_next, dt);
        self.constrain(tape, x1, v_next)
    }

    /// Constraint projection; which entries are overwritten is decided from
    /// the current values and receives no gradient.
    pub fn constrain(&self, tape: &mut Tape, x: Var, v: Var) -> (Var, Var) {
        let n = self.mesh.n_vertices();
        let xs = tape.value(x);
        let mut x_mask = vec![false; 3 * n];
        let mut v_mask = vec![false; 3 * n];
        let mut x_vals = vec![0.0; 3 * n];
        let v_vals = vec![0.0; 3 * n];
        if let Some(h) = self.mesh.ground_height {
            for i in 0..n {
                if xs.data[3 * i + 2] < h {
                    x_mask[3 * i + 2] = true;
                    x_vals[3 * i + 2] = h;
                    v_mask[3 * i + 2] = true;
                }
            }
        }
        for &i in &self.mesh.fixed_vertices {
            for c in 0..3 {
                x_mask[3 * i + c] = true;
                x_vals[3 * i + c] = self.mesh.vertices_rest[i][c];
                v_mask[3 * i + c] = true;
            }
        }
        if !x_mask.iter().any(|m| *m) {
            return (x, v);
        }
        let x1 = tape.masked_assign(x, x_mask, &x_vals);
        let v1 = tape.masked_assign(v, v_mask, &v_vals);
        (x1, v1)
    }

    /// Volume hinge loss over the `M × 9` deformation gradients.
    pub fn volume_loss(&self, tape: &mut Tape, fs: Var, epsilon: f64) -> Var {
        let fv = tape.value(fs);
        let mut total = 0.0;
        let mut coeff = vec![0.0; fv.rows];
        for (e, c) in coeff.iter_mut().enumerate() {
            let d = mat3_at(&fv.data, e).determinant() - 1.0;
            let h = (d.abs() - epsilon).max(0.0);
            total += h * h;
            if h > 0.0 {
                *c = 2.0 * h * d.signum();
            }
        }
        tape.push_op(Tensor::scalar(total), &[fs], || VolumeHingeOp { fs, coeff })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::materials::MaterialModel;
    use crate::mesh::{make_cube_mesh, Tessellation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_tet() -> TetMesh {
        TetMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            vec![[0, 1, 2, 3]],
            1000.0,
            vec![],
            None,
        )
        .unwrap()
    }

    fn nh() -> MaterialParams {
        MaterialParams::from_young_poisson(MaterialModel::NeoHookean, 5e5, 0.45).unwrap()
    }

    fn perturbed(mesh: &TetMesh, amp: f64, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        mesh.vertices_rest
            .iter()
            .map(|p| [0, 1, 2].map(|c| p[c] + rng.random_range(-amp..amp)))
            .collect()
    }

    #[test]
    fn deformation_gradient_cases() {
        let mesh = unit_tet();
        for f in deformation_gradients(&mesh.vertices_rest, &mesh) {
            assert!((f - Mat3::IDENTITY).max_abs() < 1e-15);
        }
        let shifted: Vec<Vec3> = mesh.vertices_rest.iter().map(|p| linalg::add(*p, [3.0, -1.0, 2.0])).collect();
        assert!((deformation_gradients(&shifted, &mesh)[0] - Mat3::IDENTITY).max_abs() < 1e-15);
        let a = Mat3([[1.2, 0.1, -0.3], [0.0, 0.9, 0.2], [0.4, 0.0, 1.1]]);
        let mapped: Vec<Vec3> = mesh.vertices_rest.iter().map(|p| a.mul_vec(*p)).collect();
        assert!((deformation_gradients(&mapped, &mesh)[0] - a).max_abs() < 1e-14);
    }

    #[test]
    fn element_forces_balance() {
        let mesh = unit_tet();
        assert!(assemble_forces(&[Mat3::ZERO], &mesh).iter().flatten().all(|v| *v == 0.0));
        let p = Mat3([[3.0, -1.0, 2.0], [0.5, 4.0, -2.0], [1.0, 1.0, 1.0]]);
        let f = assemble_forces(&[p], &mesh);
        let total = f.iter().fold([0.0; 3], |a, b| linalg::add(a, *b));
        assert!(linalg::norm(total) < 1e-14);
    }

    #[test]
    fn forces_are_negative_energy_gradient() {
        let mesh = make_cube_mesh(2, 1.0, 1000.0, Tessellation::SixTet).unwrap();
        let mat = nh();
        let x = perturbed(&mesh, 0.05, 11);
        let f = internal_forces(&mat, &x, &mesh).unwrap();
        let scale = f.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
        let h = 1e-7;
        for i in 0..mesh.n_vertices() {
            for c in 0..3 {
                let mut xp = x.clone();
                xp[i][c] += h;
                let mut xm = x.clone();
                xm[i][c] -= h;
                let fd = -(total_energy(&mat, &xp, &mesh).unwrap() - total_energy(&mat, &xm, &mesh).unwrap()) / (2.0 * h);
                assert!((fd - f[i][c]).abs() <= 1e-4 * scale, "vertex {i} comp {c}: {fd} vs {}", f[i][c]);
            }
        }
    }

    #[test]
    fn free_fall_closed_form() {
        let mesh = unit_tet();
        let mut state = SimState::at_rest(&mesh);
        for p in &mut state.positions {
            p[2] = 1.0;
        }
        let zero = vec![[0.0; 3]; 4];
        let next = semi_implicit_step(&state, &zero, &mesh, 5e-4, GRAVITY);
        for i in 0..4 {
            assert_eq!(next.velocities[i][2], -9.8 * 5e-4);
            assert_eq!(next.positions[i][2], 1.0 + 5e-4 * (-9.8 * 5e-4));
            assert!((next.velocities[i][2] + 0.0049).abs() < 1e-15);
            assert!((next.positions[i][2] - (1.0 - 2.45e-6)).abs() < 1e-15);
        }
    }

    #[test]
    fn advection_without_forces() {
        let mesh = unit_tet();
        let mut state = SimState::at_rest(&mesh);
        state.velocities = vec![[1.0, -2.0, 0.5]; 4];
        let next = semi_implicit_step(&state, &[[0.0; 3]; 4], &mesh, 0.01, [0.0; 3]);
        for i in 0..4 {
            for c in 0..3 {
                assert_eq!(next.positions[i][c], state.positions[i][c] + 0.01 * state.velocities[i][c]);
            }
        }
    }

    #[test]
    fn floor_projection_keeps_tangential_velocity() {
        let mesh = unit_tet().with_ground(Some(0.0));
        let mut state = SimState::at_rest(&mesh);
        state.positions[1][2] = -0.1;
        state.velocities[1] = [1.0, 0.0, -3.0];
        let out = apply_constraints(&state, &mesh);
        assert_eq!(out.positions[1][2], 0.0);
        assert_eq!(out.velocities[1], [1.0, 0.0, 0.0]);
        assert_eq!(apply_constraints(&out, &mesh), out);
    }

    #[test]
    fn fixed_vertex_reset() {
        let mesh = unit_tet().with_fixed_vertices(vec![2]).unwrap();
        let mut state = SimState::at_rest(&mesh);
        state.positions[2] = [5.0, 5.0, 5.0];
        state.velocities[2] = [1.0, 2.0, 3.0];
        let out = apply_constraints(&state, &mesh);
        assert_eq!(out.positions[2], mesh.vertices_rest[2]);
        assert_eq!(out.velocities[2], [0.0; 3]);
    }

    #[test]
    fn equilibrium_without_gravity() {
        let mesh = make_cube_mesh(3, 1.0, 1000.0, Tessellation::SixTet).unwrap();
        let sim = SimConfig {
            gravity: [0.0; 3],
            substeps: 5,
            ..Default::default()
        };
        let traj = simulate_trajectory(&mesh, &nh(), &SimState::at_rest(&mesh), 10, &sim).unwrap();
        assert_eq!(traj.len(), 11);
        for f in &traj.frames {
            for (p, r) in f.state.positions.iter().zip(&mesh.vertices_rest) {
                assert!(linalg::norm(linalg::sub(*p, *r)) < 1e-12);
            }
        }
    }

    #[test]
    fn stored_forces_match_recomputation() {
        let mesh = make_cube_mesh(3, 1.0, 1000.0, Tessellation::SixTet).unwrap().with_ground(Some(0.0));
        let mut init = SimState::at_rest(&mesh);
        init.velocities = vec![[0.5, 0.0, -1.0]; mesh.n_vertices()];
        for p in &mut init.positions {
            p[2] += 0.01;
        }
        let sim = SimConfig { substeps: 10, ..Default::default() };
        let traj = simulate_trajectory(&mesh, &nh(), &init, 20, &sim).unwrap();
        assert!(traj.has_forces());
        for f in &traj.frames {
            let again = internal_forces(&nh(), &f.state.positions, &mesh).unwrap();
            assert_eq!(&again, f.forces.as_ref().unwrap());
            assert!(f.state.positions.iter().all(|p| p[2] >= 0.0));
        }
    }

    #[test]
    fn inverted_element_reports_index() {
        let mesh = unit_tet();
        let mut x = mesh.vertices_rest.clone();
        x[3][2] = -1.0;
        match internal_forces(&nh(), &x, &mesh) {
            Err(Error::InvertedElement { element: Some(0), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn volume_loss_values() {
        let ok = [Mat3::from_scaled_identity(1.0), Mat3::from_diagonal([1.04, 1.0, 1.0]), Mat3::from_diagonal([0.96, 1.0, 1.0])];
        assert_eq!(volume_loss(&ok, 0.05), 0.0);
        let one = [Mat3::from_diagonal([1.1, 1.0, 1.0])];
        assert!((volume_loss(&one, 0.05) - 0.0025).abs() < 1e-15);
        let two = [Mat3::from_diagonal([1.1, 1.0, 1.0]), Mat3::from_diagonal([0.9, 1.0, 1.0])];
        assert!((volume_loss(&two, 0.05) - 0.005).abs() < 1e-15);
    }

    #[test]
    fn tape_ops_match_plain_functions() {
        let mesh = make_cube_mesh(3, 1.0, 1000.0, Tessellation::FiveTet).unwrap();
        let ops = FemOps::new(&mesh);
        let x = perturbed(&mesh, 0.03, 5);
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::from_vec3s(&x));
        let f = ops.analytic_forces(&mut tape, xv, &nh()).unwrap();
        let plain = internal_forces(&nh(), &x, &mesh).unwrap();
        assert_eq!(tape.value(f).to_vec3s(), plain);
    }

    #[test]
    fn tape_force_chain_gradient() {
        let mesh = make_cube_mesh(2, 1.0, 1000.0, Tessellation::SixTet).unwrap();
        let ops = FemOps::new(&mesh);
        let mats = [nh(), MaterialParams::new(MaterialModel::StVK, 3e4, 2e4).unwrap()];
        for mat in mats {
            let x0 = perturbed(&mesh, 0.04, 9);
            let w: Vec<f64> = (0..mesh.n_vertices() * 3).map(|i| ((i * 13 % 7) as f64) - 3.0).collect();
            let eval = |x: &[Vec3], tape: &mut Tape, leaf: bool| {
                let t = Tensor::from_vec3s(x);
                let xv = if leaf { tape.leaf(t) } else { tape.constant(t) };
                let f = ops.analytic_forces(tape, xv, &mat).unwrap();
                let fs = ops.deformation_gradients(tape, xv);
                let vol = ops.volume_loss(tape, fs, 0.01);
                let l = tape.sq_err_mean(f, &w);
                let out = tape.add_scaled(l, vol, 1e6);
                (xv, out)
            };
            let mut tape = Tape::new();
            let (xv, out) = eval(&x0, &mut tape, true);
            let g = tape.backward(out).unwrap().get_or_zeros(xv, 3 * mesh.n_vertices());
            let gmax = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
            let h = 1e-7;
            for i in 0..mesh.n_vertices() {
                for c in 0..3 {
                    let mut xp = x0.clone();
                    xp[i][c] += h;
                    let mut xm = x0.clone();
                    xm[i][c] -= h;
                    let mut t1 = Tape::new();
                    let op = eval(&xp, &mut t1, false).1;
                    let lp = t1.value(op).item();
                    let mut t2 = Tape::new();
                    let om = eval(&xm, &mut t2, false).1;
                    let lm = t2.value(om).item();
                    let fd = (lp - lm) / (2.0 * h);
                    assert!((fd - g[3 * i + c]).abs() <= 1e-5 * gmax, "{fd} vs {}", g[3 * i + c]);
                }
            }
        }
    }

    #[test]
    fn tape_step_matches_plain_step() {
        let mesh = make_cube_mesh(3, 1.0, 1000.0, Tessellation::SixTet).unwrap().with_ground(Some(0.0));
        let ops = FemOps::new(&mesh);
        let mut state = SimState::at_rest(&mesh);
        state.velocities = vec![[0.3, 0.1, -4.0]; mesh.n_vertices()];
        let mat = nh();
        let dt = 5e-4;
        let plain_f = internal_forces(&mat, &state.positions, &mesh).unwrap();
        let plain = apply_constraints(&semi_implicit_step(&state, &plain_f, &mesh, dt, GRAVITY), &mesh);

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec3s(&state.positions));
        let v = tape.constant(Tensor::from_vec3s(&state.velocities));
        let f = ops.analytic_forces(&mut tape, x, &mat).unwrap();
        let v1 = ops.semi_implicit_velocity(&mut tape, v, f, dt, GRAVITY);
        let (x1, v1) = ops.advance_and_constrain(&mut tape, x, v1, dt);
        let xs = tape.value(x1).to_vec3s();
        let vs = tape.value(v1).to_vec3s();
        for i in 0..mesh.n_vertices() {
            for c in 0..3 {
                assert!((xs[i][c] - plain.positions[i][c]).abs() < 1e-15);
                assert!((vs[i][c] - plain.velocities[i][c]).abs() < 1e-12);
            }
        }
    }
}
