//! Binary trajectory files with a JSON metadata sidecar.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "NMPT" | version u32 | flags u32 (bit 0: forces) | N u32 | frames u32 | dt f64
//! per frame: positions N×3 f64, velocities N×3 f64, [forces N×3 f64]
//! ```
//!
//! The frame count is the number of stored frames, initial state included.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nmp_core::fem::{Frame, SimState, Trajectory, TrajectoryMeta};
use nmp_core::{MaterialModel, MaterialParams, Vec3};
use serde::{Deserialize, Serialize};

use crate::atomic::write_atomic;
use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"NMPT";
pub const VERSION: u32 = 1;
const FLAG_FORCES: u32 = 1;

fn corrupt(msg: impl Into<String>) -> CliError {
    CliError::data(format!("trajectory file: {}", msg.into()))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_vec3s(out: &mut Vec<u8>, vs: &[Vec3]) {
    for v in vs.iter().flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_trajectory(traj: &Trajectory) -> Result<Vec<u8>> {
    traj.validate()?;
    let n = traj.n_vertices();
    let forces = traj.has_forces();
    let to_u32 = |v: usize, what: &str| u32::try_from(v).map_err(|_| corrupt(format!("{what} {v} exceeds u32")));
    let per_frame = n * 3 * 8 * if forces { 3 } else { 2 };
    let mut out = Vec::with_capacity(28 + per_frame * traj.len());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, if forces { FLAG_FORCES } else { 0 });
    put_u32(&mut out, to_u32(n, "vertex count")?);
    put_u32(&mut out, to_u32(traj.len(), "frame count")?);
    out.extend_from_slice(&traj.dt_frame.to_le_bytes());
    for f in &traj.frames {
        put_vec3s(&mut out, &f.state.positions);
        put_vec3s(&mut out, &f.state.velocities);
        if let (true, Some(fs)) = (forces, &f.forces) {
            put_vec3s(&mut out, fs);
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            corrupt(format!("truncated at byte {} (need {n} more)", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn vec3s(&mut self, n: usize) -> Result<Vec<Vec3>> {
        let raw = self.take(n * 24)?;
        Ok(raw
            .chunks_exact(24)
            .map(|c| {
                let g = |i: usize| f64::from_le_bytes(c[i * 8..i * 8 + 8].try_into().unwrap());
                [g(0), g(1), g(2)]
            })
            .collect())
    }
}

pub fn decode_trajectory(bytes: &[u8]) -> Result<Trajectory> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let flags = c.u32()?;
    if flags & !FLAG_FORCES != 0 {
        return Err(corrupt(format!("unknown flags {flags:#x}")));
    }
    let n = c.u32()? as usize;
    let n_frames = c.u32()? as usize;
    let dt_frame = c.f64()?;
    let forces = flags & FLAG_FORCES != 0;
    let expected = (n as u128) * 24 * if forces { 3 } else { 2 } * n_frames as u128;
    if expected != (bytes.len() - c.at) as u128 {
        return Err(corrupt(format!(
            "payload is {} bytes, header implies {expected}",
            bytes.len() - c.at
        )));
    }
    let mut frames = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        let positions = c.vec3s(n)?;
        let velocities = c.vec3s(n)?;
        let forces = if forces { Some(c.vec3s(n)?) } else { None };
        frames.push(Frame { state: SimState { positions, velocities }, forces });
    }
    let traj = Trajectory { frames, dt_frame, meta: TrajectoryMeta::default() };
    traj.validate().map_err(|e| corrupt(e.to_string()))?;
    Ok(traj)
}

pub fn write_trajectory<W: Write>(mut w: W, traj: &Trajectory) -> Result<()> {
    let bytes = encode_trajectory(traj)?;
    w.write_all(&bytes).map_err(|e| CliError::io(Path::new("<stream>"), e))
}

pub fn read_trajectory<R: Read>(mut r: R) -> Result<Trajectory> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| CliError::io(Path::new("<stream>"), e))?;
    decode_trajectory(&bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialRecord {
    pub model: String,
    pub young: f64,
    pub poisson: f64,
    pub mu: f64,
    pub lambda: f64,
}

impl MaterialRecord {
    pub fn from_params(m: &MaterialParams) -> Self {
        let (young, poisson) = m.young_poisson();
        MaterialRecord { model: m.model.name().into(), young, poisson, mu: m.mu, lambda: m.lambda }
    }

    pub fn to_params(&self) -> Result<MaterialParams> {
        let model = MaterialModel::from_name(&self.model)
            .ok_or_else(|| CliError::data(format!("unknown material model {:?}", self.model)))?;
        Ok(MaterialParams::new(model, self.mu, self.lambda)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub mesh: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub material: Option<MaterialRecord>,
    pub seed: u64,
    pub generator: String,
    pub n_vertices: usize,
    pub n_frames: usize,
    pub has_forces: bool,
    pub dt_frame: f64,
}

impl Sidecar {
    pub fn new(traj: &Trajectory) -> Self {
        Sidecar {
            mesh: traj.meta.mesh.clone(),
            material: traj.meta.material.as_ref().map(MaterialRecord::from_params),
            seed: traj.meta.seed,
            generator: traj.meta.generator.clone(),
            n_vertices: traj.n_vertices(),
            n_frames: traj.len(),
            has_forces: traj.has_forces(),
            dt_frame: traj.dt_frame,
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `path` and its `.json` sidecar.
pub fn save_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    write_atomic(path, &encode_trajectory(traj)?)?;
    let mut text = serde_json::to_string_pretty(&Sidecar::new(traj)).expect("sidecar serializes");
    text.push('\n');
    write_atomic(&sidecar_path(path), text.as_bytes())
}

/// Reads `path`; metadata comes from the sidecar when one exists.
pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let mut traj = decode_trajectory(&bytes).map_err(|e| match e {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    })?;
    let side = sidecar_path(path);
    if side.exists() {
        let text = std::fs::read_to_string(&side).map_err(|e| CliError::io(&side, e))?;
        let meta: Sidecar = serde_json::from_str(&text)
            .map_err(|e| CliError::data(format!("{}: {e}", side.display())))?;
        if meta.n_vertices != traj.n_vertices() || meta.n_frames != traj.len() {
            return Err(CliError::data(format!("{} disagrees with {}", side.display(), path.display())));
        }
        traj.meta = TrajectoryMeta {
            generator: meta.generator,
            seed: meta.seed,
            material: meta.material.map(|m| m.to_params()).transpose()?,
            mesh: meta.mesh,
        };
    }
    Ok(traj)
}

/// All `.nmpt` files in `dir`, sorted by name.
pub fn list_trajectories(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut paths = Vec::new();
    for e in entries {
        let p = e.map_err(|e| CliError::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "nmpt") {
            paths.push(p);
        }
    }
    paths.sort();
    Ok(paths)
}

pub fn load_trajectory_dir(dir: &Path) -> Result<Vec<Trajectory>> {
    list_trajectories(dir)?.iter().map(|p| load_trajectory(p)).collect()
}
