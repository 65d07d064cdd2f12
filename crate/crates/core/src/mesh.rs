//! Tetrahedral meshes and their reference-configuration quantities.
//!
//! For every element `e` with vertices `(x0, x1, x2, x3)` the reference shape
//! matrix `Dm` has columns `(X1 − X0, X2 − X0, X3 − X0)`. The mesh stores
//! `Dm⁻¹`, the rest volume `det(Dm) / 6`, and a lumped (diagonal) mass that
//! gives each vertex a quarter of the mass of every incident element.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat3, Vec3};

pub const DEFAULT_DENSITY: f64 = 1000.0;

/// Relative determinant tolerance below which an element counts as degenerate.
const DEGENERATE_REL_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct TetMesh {
    pub vertices_rest: Vec<Vec3>,
    pub tets: Vec<[usize; 4]>,
    pub dm_inv: Vec<Mat3>,
    pub rest_volumes: Vec<f64>,
    pub vertex_masses: Vec<f64>,
    /// Sorted, deduplicated Dirichlet vertices.
    pub fixed_vertices: Vec<usize>,
    pub ground_height: Option<f64>,
    pub density: f64,
    fixed_mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceData {
    pub dm_inv: Vec<Mat3>,
    pub rest_volumes: Vec<f64>,
    pub vertex_masses: Vec<f64>,
}

/// Shape matrix with columns `(p1 − p0, p2 − p0, p3 − p0)`.
#[inline]
pub fn shape_matrix(p: &[Vec3], tet: &[usize; 4]) -> Mat3 {
    let x0 = p[tet[0]];
    Mat3::from_columns(
        linalg::sub(p[tet[1]], x0),
        linalg::sub(p[tet[2]], x0),
        linalg::sub(p[tet[3]], x0),
    )
}

fn longest_edge(p: &[Vec3], tet: &[usize; 4]) -> f64 {
    let mut l = 0.0f64;
    for a in 0..4 {
        for b in (a + 1)..4 {
            l = l.max(linalg::norm(linalg::sub(p[tet[a]], p[tet[b]])));
        }
    }
    l
}

fn validate_topology(n_vertices: usize, tets: &[[usize; 4]]) -> Result<()> {
    for (e, t) in tets.iter().enumerate() {
        if let Some(&bad) = t.iter().find(|&&i| i >= n_vertices) {
            return Err(Error::InvalidMesh(format!(
                "element {e} references vertex {bad} but the mesh has {n_vertices} vertices"
            )));
        }
        for a in 0..4 {
            for b in (a + 1)..4 {
                if t[a] == t[b] {
                    return Err(Error::InvalidMesh(format!(
                        "element {e} repeats vertex {}",
                        t[a]
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Computes `Dm⁻¹`, rest volumes and lumped vertex masses.
///
/// Masses are accumulated in element order so the result does not depend on
/// how the caller parallelizes anything upstream.
pub fn precompute_reference(
    vertices_rest: &[Vec3],
    tets: &[[usize; 4]],
    density: f64,
) -> Result<ReferenceData> {
    if !(density > 0.0 && density.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "density must be positive, got {density}"
        )));
    }
    validate_topology(vertices_rest.len(), tets)?;
    let mut dm_inv = Vec::with_capacity(tets.len());
    let mut rest_volumes = Vec::with_capacity(tets.len());
    for (e, t) in tets.iter().enumerate() {
        let dm = shape_matrix(vertices_rest, t);
        let det = dm.determinant();
        let l = longest_edge(vertices_rest, t);
        let volume = det / 6.0;
        if !det.is_finite() || det.abs() < DEGENERATE_REL_TOL * l * l * l || l == 0.0 {
            return Err(Error::DegenerateElement { element: e, volume });
        }
        if det < 0.0 {
            return Err(Error::NegativeOrientation { element: e, volume });
        }
        // `inverse` only fails for det == 0, excluded above.
        dm_inv.push(dm.inverse().expect("non-degenerate element"));
        rest_volumes.push(volume);
    }
    let mut vertex_masses = vec![0.0; vertices_rest.len()];
    for (t, &v) in tets.iter().zip(&rest_volumes) {
        let quarter = density * v / 4.0;
        for &i in t {
            vertex_masses[i] += quarter;
        }
    }
    if let Some(i) = vertex_masses.iter().position(|&m| m <= 0.0) {
        return Err(Error::InvalidMesh(format!(
            "vertex {i} belongs to no element and would have zero mass"
        )));
    }
    Ok(ReferenceData {
        dm_inv,
        rest_volumes,
        vertex_masses,
    })
}

impl TetMesh {
    pub fn new(
        vertices_rest: Vec<Vec3>,
        tets: Vec<[usize; 4]>,
        density: f64,
        fixed_vertices: Vec<usize>,
        ground_height: Option<f64>,
    ) -> Result<Self> {
        if vertices_rest.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMesh("non-finite vertex coordinate".into()));
        }
        if let Some(h) = ground_height {
            if !h.is_finite() {
                return Err(Error::InvalidMesh("non-finite ground height".into()));
            }
        }
        let reference = precompute_reference(&vertices_rest, &tets, density)?;
        let mut fixed = fixed_vertices;
        fixed.sort_unstable();
        fixed.dedup();
        if let Some(&bad) = fixed.iter().find(|&&i| i >= vertices_rest.len()) {
            return Err(Error::InvalidMesh(format!(
                "fixed vertex {bad} out of range"
            )));
        }
        let mut fixed_mask = vec![false; vertices_rest.len()];
        for &i in &fixed {
            fixed_mask[i] = true;
        }
        Ok(TetMesh {
            vertices_rest,
            tets,
            dm_inv: reference.dm_inv,
            rest_volumes: reference.rest_volumes,
            vertex_masses: reference.vertex_masses,
            fixed_vertices: fixed,
            ground_height,
            density,
            fixed_mask,
        })
    }

    pub fn with_ground(mut self, ground_height: Option<f64>) -> Self {
        self.ground_height = ground_height;
        self
    }

    pub fn with_fixed_vertices(self, fixed: Vec<usize>) -> Result<Self> {
        TetMesh::new(
            self.vertices_rest,
            self.tets,
            self.density,
            fixed,
            self.ground_height,
        )
    }

    #[inline]
    pub fn n_vertices(&self) -> usize {
        self.vertices_rest.len()
    }

    #[inline]
    pub fn n_elements(&self) -> usize {
        self.tets.len()
    }

    #[inline]
    pub fn is_fixed(&self, vertex: usize) -> bool {
        self.fixed_mask[vertex]
    }

    pub fn total_volume(&self) -> f64 {
        self.rest_volumes.iter().sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.vertex_masses.iter().sum()
    }

    /// Lowest rest z-coordinate.
    pub fn min_rest_z(&self) -> f64 {
        self.vertices_rest
            .iter()
            .map(|v| v[2])
            .fold(f64::INFINITY, f64::min)
    }

    /// Boundary triangles, wound counter-clockwise when seen from outside.
    pub fn boundary_faces(&self) -> Vec<[usize; 3]> {
        let mut faces: BTreeMap<[usize; 3], ([usize; 3], usize)> = BTreeMap::new();
        for t in &self.tets {
            let [a, b, c, d] = *t;
            for f in [[a, c, b], [a, b, d], [a, d, c], [b, c, d]] {
                let mut key = f;
                key.sort_unstable();
                faces.entry(key).or_insert((f, 0)).1 += 1;
            }
        }
        faces
            .into_values()
            .filter(|(_, count)| *count == 1)
            .map(|(f, _)| f)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Tessellation {
    /// Six tetrahedra per cell along the cell's main diagonal.
    #[default]
    SixTet,
    /// Five tetrahedra per cell, alternating between neighbouring cells.
    FiveTet,
}

/// Axis-aligned cube grid with `n_per_axis³` vertices, minimum corner at the
/// origin and no fixed vertices or floor.
pub fn make_cube_mesh(
    n_per_axis: usize,
    edge_length: f64,
    density: f64,
    tessellation: Tessellation,
) -> Result<TetMesh> {
    if n_per_axis < 2 {
        return Err(Error::InvalidParameter(format!(
            "cube needs at least 2 vertices per axis, got {n_per_axis}"
        )));
    }
    if !(edge_length > 0.0 && edge_length.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "edge length must be positive, got {edge_length}"
        )));
    }
    let n = n_per_axis;
    let h = edge_length / (n - 1) as f64;
    let index = |i: usize, j: usize, k: usize| i + n * (j + n * k);
    let mut vertices = Vec::with_capacity(n * n * n);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                vertices.push([i as f64 * h, j as f64 * h, k as f64 * h]);
            }
        }
    }
    let cells = n - 1;
    let per_cell = match tessellation {
        Tessellation::SixTet => 6,
        Tessellation::FiveTet => 5,
    };
    let mut tets = Vec::with_capacity(cells * cells * cells * per_cell);
    for k in 0..cells {
        for j in 0..cells {
            for i in 0..cells {
                // corner(bits) with bit 0 = +x, bit 1 = +y, bit 2 = +z
                let corner = |b: usize| index(i + (b & 1), j + ((b >> 1) & 1), k + ((b >> 2) & 1));
                match tessellation {
                    Tessellation::SixTet => {
                        const PERMS: [[usize; 3]; 6] =
                            [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
                        for p in PERMS {
                            let b1 = 1 << p[0];
                            let b2 = b1 | (1 << p[1]);
                            tets.push([corner(0), corner(b1), corner(b2), corner(7)]);
                        }
                    }
                    Tessellation::FiveTet => {
                        // Corners of one parity form the central tet; each corner of
                        // the other parity cuts off a tet with its three neighbours.
                        let flip = (i + j + k) % 2 == 1;
                        let (central, cut): ([usize; 4], [usize; 4]) = if flip {
                            ([1, 2, 4, 7], [0, 3, 5, 6])
                        } else {
                            ([0, 3, 5, 6], [1, 2, 4, 7])
                        };
                        tets.push(central.map(corner));
                        for c in cut {
                            tets.push([corner(c), corner(c ^ 1), corner(c ^ 2), corner(c ^ 4)]);
                        }
                    }
                }
            }
        }
    }
    for t in tets.iter_mut() {
        if shape_matrix(&vertices, t).determinant() < 0.0 {
            t.swap(1, 2);
        }
    }
    TetMesh::new(vertices, tets, density, Vec::new(), None)
}
