//! Self-describing checkpoint files.
//!
//! Layout: an 8-byte magic, a format version, a JSON metadata blob (network
//! spec, seed, training progress, optimizer settings), then ordered
//! (name, shape, f32 payload) tensor entries, and finally an FNV-1a checksum
//! over everything after the magic. Parameter tensors come first in store
//! order; when optimizer state is included, each parameter is followed by its
//! `adam.m.` and `adam.v.` moment buffers under the same ordering. All
//! integers are little-endian. Writing the same state twice produces
//! byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig};
use crate::autodiff::ParamStore;
use crate::dataset::fnv1a;
use crate::networks::{Model, NetworkSpec};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EMLOCCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimizer settings and step count; the moment buffers themselves are
/// stored as tensor entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub config: AdamConfig,
    pub step_count: u64,
}

/// Training-metadata blob serialized into the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: NetworkSpec,
    pub seed: u64,
    /// Epochs fully completed when this checkpoint was written.
    pub epochs_completed: u64,
    /// Validation criterion of the best epoch seen so far, if any.
    pub best_val: Option<f64>,
    /// Present iff optimizer moment entries follow the parameters.
    pub optimizer: Option<OptimizerMeta>,
}

/// A checkpoint read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub meta: CheckpointMeta,
    pub store: ParamStore,
    /// Adam first and second moments in parameter order, when saved.
    pub moments: Option<(Vec<Vec<f32>>, Vec<Vec<f32>>)>,
}

impl LoadedCheckpoint {
    pub fn into_model(self) -> Model {
        Model { spec: self.meta.spec, store: self.store }
    }

    /// Rebuild the optimizer exactly as it was saved. Errors if the
    /// checkpoint carries no optimizer state.
    pub fn restore_adam(&self) -> Result<Adam> {
        let opt = self.meta.optimizer.as_ref().ok_or_else(|| {
            Error::CheckpointMismatch("checkpoint carries no optimizer state".to_string())
        })?;
        let (m, v) = self.moments.as_ref().ok_or_else(|| {
            Error::CheckpointMismatch("optimizer metadata present but moments missing".to_string())
        })?;
        Adam::restore(opt.config, &self.store, opt.step_count, m.clone(), v.clone())
    }
}

fn write_entry(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

/// Write a checkpoint. When `adam` is provided its settings go into the
/// metadata and its moment buffers are appended as tensor entries; any
/// optimizer field already present in `meta` is replaced to keep the header
/// and the entry list consistent.
pub fn save(
    path: &Path,
    meta: &CheckpointMeta,
    store: &ParamStore,
    adam: Option<&Adam>,
) -> Result<()> {
    let mut meta = meta.clone();
    meta.optimizer = adam.map(|a| OptimizerMeta { config: *a.config(), step_count: a.step_count() });
    let expected = meta.spec.param_count();
    if store.total_elements() != expected {
        return Err(Error::CheckpointMismatch(format!(
            "spec declares {expected} parameters but the store holds {}",
            store.total_elements()
        )));
    }

    let meta_json = serde_json::to_vec(&meta)
        .map_err(|e| Error::CheckpointFormat(format!("metadata blob: {e}")))?;
    let n_entries = store.len() * if adam.is_some() { 3 } else { 1 };

    let mut body = Vec::new();
    body.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    body.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    body.extend_from_slice(&meta_json);
    body.extend_from_slice(&(n_entries as u64).to_le_bytes());
    for (i, t) in store.tensors().iter().enumerate() {
        write_entry(&mut body, &t.name, &t.shape, &t.data);
        if let Some(a) = adam {
            let (m, v) = a.moments();
            write_entry(&mut body, &format!("adam.m.{}", t.name), &t.shape, &m[i]);
            write_entry(&mut body, &format!("adam.v.{}", t.name), &t.shape, &v[i]);
        }
    }
    let checksum = fnv1a(&body);

    let mut file = BufWriter::new(File::create(path)?);
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&body)?;
    file.write_all(&checksum.to_le_bytes())?;
    file.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointFormat(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn read_entry(cur: &mut Cursor) -> Result<(String, Vec<usize>, Vec<f32>)> {
    let name_len = cur.u32("entry name length")? as usize;
    let name = std::str::from_utf8(cur.take(name_len, "entry name")?)
        .map_err(|_| Error::CheckpointFormat("entry name is not UTF-8".to_string()))?
        .to_string();
    let rank = cur.u32("entry rank")? as usize;
    if rank > 8 {
        return Err(Error::CheckpointFormat(format!("entry {name:?} has implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel = 1usize;
    for _ in 0..rank {
        let d = cur.u64("entry dimension")? as usize;
        numel = numel.saturating_mul(d);
        shape.push(d);
    }
    let raw = cur.take(numel * 4, "entry payload")?;
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((name, shape, data))
}

pub fn load(path: &Path) -> Result<LoadedCheckpoint> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < CHECKPOINT_MAGIC.len() + 8 {
        return Err(Error::CheckpointFormat("file too short for a checkpoint".to_string()));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointFormat("bad magic; not a checkpoint file".to_string()));
    }
    let body = &bytes[8..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    let computed = fnv1a(body);
    if stored != computed {
        return Err(Error::CheckpointFormat(format!(
            "checksum mismatch: stored {stored:#018x}, computed {computed:#018x}"
        )));
    }

    let mut cur = Cursor { bytes: body, pos: 0 };
    let version = cur.u32("format version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointFormat(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let meta_len = cur.u64("metadata length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len, "metadata")?)
        .map_err(|e| Error::CheckpointFormat(format!("metadata blob: {e}")))?;
    meta.spec.validate()?;

    let n_entries = cur.u64("entry count")? as usize;
    let with_moments = meta.optimizer.is_some();
    let per_param = if with_moments { 3 } else { 1 };
    if n_entries % per_param != 0 {
        return Err(Error::CheckpointMismatch(format!(
            "{n_entries} entries cannot cover parameters{}",
            if with_moments { " plus two moment buffers each" } else { "" }
        )));
    }

    let mut store = ParamStore::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    let mut i = 0;
    while i < n_entries {
        let (name, shape, data) = read_entry(&mut cur)?;
        if with_moments {
            let (m_name, m_shape, m_data) = read_entry(&mut cur)?;
            let (v_name, v_shape, v_data) = read_entry(&mut cur)?;
            let want_m = format!("adam.m.{name}");
            let want_v = format!("adam.v.{name}");
            if m_name != want_m || v_name != want_v || m_shape != shape || v_shape != shape {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter {name:?} is not followed by its moment buffers"
                )));
            }
            m.push(m_data);
            v.push(v_data);
            i += 3;
        } else {
            i += 1;
        }
        store.add(&name, &shape, data)?;
    }
    if cur.pos != body.len() {
        return Err(Error::CheckpointFormat(format!(
            "{} trailing bytes after the last entry",
            body.len() - cur.pos
        )));
    }

    let expected = meta.spec.param_count();
    if store.total_elements() != expected {
        return Err(Error::CheckpointMismatch(format!(
            "spec declares {expected} parameters but the file holds {}",
            store.total_elements()
        )));
    }

    let moments = with_moments.then_some((m, v));
    Ok(LoadedCheckpoint { meta, store, moments })
}
