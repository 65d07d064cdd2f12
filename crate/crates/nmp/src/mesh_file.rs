//! JSON mesh files.

use std::path::Path;

use nmp_core::TetMesh;
use serde::{Deserialize, Serialize};

use crate::atomic::write_atomic;
use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshFile {
    pub vertices: Vec<[f64; 3]>,
    pub tets: Vec<[usize; 4]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fixed_vertices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_height: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<f64>,
}

impl MeshFile {
    pub fn from_mesh(mesh: &TetMesh) -> Self {
        MeshFile {
            vertices: mesh.vertices_rest.clone(),
            tets: mesh.tets.clone(),
            fixed_vertices: mesh.fixed_vertices.clone(),
            ground_height: mesh.ground_height,
            density: Some(mesh.density),
        }
    }

    /// The file's density wins over `default_density`.
    pub fn into_mesh(self, default_density: f64) -> Result<TetMesh> {
        let n = self.vertices.len();
        if let Some(t) = self.tets.iter().position(|t| t.iter().any(|&i| i >= n)) {
            return Err(CliError::data(format!("tet {t} references a vertex outside 0..{n}")));
        }
        let density = self.density.unwrap_or(default_density);
        Ok(TetMesh::new(self.vertices, self.tets, density, self.fixed_vertices, self.ground_height)?)
    }
}

pub fn parse_mesh(text: &str, default_density: f64) -> Result<TetMesh> {
    let file: MeshFile = serde_json::from_str(text).map_err(|e| CliError::data(format!("mesh file: {e}")))?;
    file.into_mesh(default_density)
}

pub fn load_mesh(path: &Path, default_density: f64) -> Result<TetMesh> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_mesh(&text, default_density).map_err(|e| match e {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save_mesh(path: &Path, mesh: &TetMesh) -> Result<()> {
    let mut text = serde_json::to_string(&MeshFile::from_mesh(mesh)).expect("mesh serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}
