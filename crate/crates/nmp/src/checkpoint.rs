//! Binary checkpoints of a [`ParamStore`].
//!
//! ```text
//! "NMPC" | version u32 | entries u32
//! per entry: name_len u16 | name | rank u8 | dims u32 × rank | f64 data
//! metadata_len u32 | metadata JSON (seed, stage, statistics)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use nmp_core::diff::{ParamStore, Tensor, PARAMS_FORMAT_VERSION};
use serde::{Deserialize, Serialize};

use crate::atomic::write_atomic;
use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"NMPC";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    seed: u64,
    stage: String,
    stats: BTreeMap<String, Vec<f64>>,
}

fn corrupt(msg: impl Into<String>) -> CliError {
    CliError::data(format!("checkpoint: {}", msg.into()))
}

pub fn encode_checkpoint(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&PARAMS_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        let len = u16::try_from(name.len()).map_err(|_| corrupt(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(2);
        out.extend_from_slice(&(t.rows as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols as u32).to_le_bytes());
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = Metadata { seed: store.seed, stage: store.stage.clone(), stats: store.stats().clone() };
    let json = serde_json::to_vec(&meta).map_err(|e| corrupt(e.to_string()))?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != PARAMS_FORMAT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| corrupt("entry name is not UTF-8"))?.to_owned();
        let rank = r.take(1)?[0];
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [a, b] => (*a, *b),
            _ => return Err(corrupt(format!("{name}: rank {rank} unsupported"))),
        };
        let n = rows.checked_mul(cols).ok_or_else(|| corrupt("entry too large"))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| corrupt("entry too large"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        entries.push((name, Tensor::from_vec(rows, cols, data)));
    }
    let meta_len = r.u32()? as usize;
    let meta: Metadata = serde_json::from_slice(r.take(meta_len)?).map_err(|e| corrupt(format!("metadata: {e}")))?;
    if r.at != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    let mut store = ParamStore::new(meta.seed);
    store.stage = meta.stage;
    for (name, t) in entries {
        if store.contains(&name) {
            return Err(corrupt(format!("duplicate entry {name}")));
        }
        store.insert(&name, t)?;
    }
    for (k, v) in meta.stats {
        store.set_stat(&k, v);
    }
    Ok(store)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    write_atomic(path, &encode_checkpoint(store)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}
