//! Versioned binary checkpoints.
//!
//! Layout (little endian):
//! `b"CLEFCKPT"`, `u32` version, `u32` metadata length, metadata JSON,
//! `u32` table count, then per table: name, `u32` entry count, and per
//! entry: name, `u32` rank, `u64` dims, `f32` payload. Names are `u32`
//! length-prefixed UTF-8.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ema::Ema;
use crate::error::{GradError, Result};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CLEFCKPT";

pub const TABLE_PARAMS: &str = "params";
pub const TABLE_EMA: &str = "ema";
const TABLE_ADAM_M: &str = "adam.m";
const TABLE_ADAM_V: &str = "adam.v";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub profile_hash: String,
    /// Content hash of the checkpoint this one was initialized from.
    pub init_from: Option<String>,
    /// Stage of the checkpoint named by `init_from`.
    pub init_stage: Option<String>,
    /// Parameter-name prefixes that downstream stages may drop.
    pub discardable: Vec<String>,
    pub adam: Option<AdamConfig>,
    pub adam_step: u64,
    pub ema_decay: Option<f64>,
    pub ema_updates: u64,
    pub notes: BTreeMap<String, String>,
}

type Table = Vec<(String, Tensor<f32>)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    tables: BTreeMap<String, Table>,
}

fn to_table<T: Real>(store: &ParamStore<T>, tensors: Option<&[Tensor<T>]>) -> Table {
    store
        .iter()
        .map(|(id, name, t)| {
            let t = tensors.map_or(t, |ts| &ts[id.index()]);
            (name.to_string(), t.cast::<f32>())
        })
        .collect()
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self {
            meta,
            tables: BTreeMap::new(),
        }
    }

    /// Live parameters plus, when given, EMA shadow and optimizer moments.
    pub fn capture<T: Real>(
        store: &ParamStore<T>,
        ema: Option<&Ema<T>>,
        adam: Option<&Adam<T>>,
        mut meta: CheckpointMeta,
    ) -> Self {
        let mut tables = BTreeMap::new();
        tables.insert(TABLE_PARAMS.to_string(), to_table(store, None));
        if let Some(e) = ema {
            tables.insert(TABLE_EMA.to_string(), to_table(store, Some(e.tensors())));
            meta.ema_decay = Some(e.decay());
            meta.ema_updates = e.updates();
        }
        if let Some(a) = adam {
            let (m, v) = a.moments();
            tables.insert(TABLE_ADAM_M.to_string(), to_table(store, Some(m)));
            tables.insert(TABLE_ADAM_V.to_string(), to_table(store, Some(v)));
            meta.adam = Some(a.config);
            meta.adam_step = a.step_count();
        }
        Self { meta, tables }
    }

    pub fn insert_table(&mut self, name: &str, entries: Vec<(String, Tensor<f32>)>) {
        self.tables.insert(name.to_string(), entries);
    }

    pub fn table(&self, name: &str) -> Option<&[(String, Tensor<f32>)]> {
        self.tables.get(name).map(|t| t.as_slice())
    }

    pub fn table_names(&self) -> impl Iterator<Item = &str> {
        self.tables.keys().map(|s| s.as_str())
    }

    /// Weights for inference: the EMA table when present, else live params.
    pub fn weights(&self) -> &[(String, Tensor<f32>)] {
        self.table(TABLE_EMA)
            .or_else(|| self.table(TABLE_PARAMS))
            .unwrap_or(&[])
    }

    /// Copies every entry of `table` whose name is known to `store`.
    /// Entries under discardable prefixes are skipped when `skip_discardable`.
    /// Returns the names loaded.
    pub fn load_into<T: Real>(&self, table: &str, store: &mut ParamStore<T>, skip_discardable: bool) -> Result<Vec<String>> {
        let entries = self
            .table(table)
            .ok_or_else(|| GradError::Checkpoint(format!("missing table {table}")))?;
        let mut loaded = Vec::new();
        for (name, t) in entries {
            if skip_discardable && self.meta.discardable.iter().any(|p| name.starts_with(p.as_str())) {
                continue;
            }
            if let Some(id) = store.find(name) {
                store.set(id, t.cast())?;
                loaded.push(name.clone());
            }
        }
        Ok(loaded)
    }

    /// Rebuilds EMA and optimizer state for a store whose parameter names
    /// match this checkpoint exactly.
    pub fn restore_training<T: Real>(&self, store: &ParamStore<T>) -> Result<(Option<Ema<T>>, Option<Adam<T>>)> {
        let aligned = |table: &str| -> Result<Option<Vec<Tensor<T>>>> {
            let Some(entries) = self.table(table) else { return Ok(None) };
            let by_name: BTreeMap<&str, &Tensor<f32>> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
            let mut out = Vec::with_capacity(store.len());
            for (_, name, live) in store.iter() {
                let t = by_name
                    .get(name)
                    .ok_or_else(|| GradError::Checkpoint(format!("{table}: missing {name}")))?;
                if t.shape() != live.shape() {
                    return Err(GradError::Checkpoint(format!("{table}: shape mismatch for {name}")));
                }
                out.push(t.cast());
            }
            Ok(Some(out))
        };
        let ema = match (aligned(TABLE_EMA)?, self.meta.ema_decay) {
            (Some(s), Some(d)) => Some(Ema::from_parts(d, s, self.meta.ema_updates)),
            _ => None,
        };
        let adam = match (aligned(TABLE_ADAM_M)?, aligned(TABLE_ADAM_V)?, self.meta.adam) {
            (Some(m), Some(v), Some(c)) => Some(Adam::from_parts(c, self.meta.adam_step, m, v)),
            _ => None,
        };
        Ok((ema, adam))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta).map_err(|e| GradError::Checkpoint(e.to_string()))?;
        write_u32(&mut w, meta.len())?;
        w.write_all(&meta)?;
        write_u32(&mut w, self.tables.len())?;
        for (tname, entries) in &self.tables {
            write_str(&mut w, tname)?;
            write_u32(&mut w, entries.len())?;
            let mut seen = BTreeSet::new();
            for (name, t) in entries {
                if !seen.insert(name.as_str()) {
                    return Err(GradError::Checkpoint(format!("duplicate entry {name} in {tname}")));
                }
                write_str(&mut w, name)?;
                write_u32(&mut w, t.rank())?;
                for &d in t.shape() {
                    w.write_all(&(d as u64).to_le_bytes())?;
                }
                let mut buf = Vec::with_capacity(t.numel() * 4);
                for v in t.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(GradError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(GradError::Checkpoint(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta).map_err(|e| GradError::Checkpoint(e.to_string()))?;
        let n_tables = read_u32(&mut r)?;
        let mut tables = BTreeMap::new();
        for _ in 0..n_tables {
            let tname = read_str(&mut r)?;
            let n = read_u32(&mut r)?;
            let mut entries = Vec::with_capacity(n as usize);
            for _ in 0..n {
                let name = read_str(&mut r)?;
                let rank = read_u32(&mut r)? as usize;
                if rank > 8 {
                    return Err(GradError::Checkpoint(format!("implausible rank {rank} for {name}")));
                }
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    let mut b = [0u8; 8];
                    r.read_exact(&mut b)?;
                    shape.push(u64::from_le_bytes(b) as usize);
                }
                let numel: usize = shape.iter().product();
                let mut raw = vec![0u8; numel * 4];
                r.read_exact(&mut raw)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                entries.push((name, Tensor::new(&shape, data)?));
            }
            tables.insert(tname, entries);
        }
        Ok(Self { meta, tables })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path)?;
        self.write_to(BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path)?;
        Self::read_from(BufReader::new(f))
    }
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| GradError::Checkpoint(format!("length {v} overflows u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > 1 << 16 {
        return Err(GradError::Checkpoint(format!("name length {n} too large")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| GradError::Checkpoint(e.to_string()))
}
