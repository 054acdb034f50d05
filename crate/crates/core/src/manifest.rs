//! Content hashes and run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clef_grad::Checkpoint;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, CoreError, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(d: &[u8]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(sha256_hex(&bytes))
}

/// Hash of a checkpoint's serialized form.
pub fn checkpoint_hash(ck: &Checkpoint) -> String {
    let mut buf = Vec::new();
    ck.write_to(&mut buf).expect("in-memory write");
    sha256_hex(&buf)
}

/// Hash over every regular file below `dir`, keyed by relative path.
pub fn dir_hash(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for (rel, path) in files {
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(file_hash(&path)?.as_bytes());
    }
    Ok(hex(&h.finalize()))
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != MANIFEST_FILE) {
            let rel = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().replace('\\', "/");
            out.push((rel, path));
        }
    }
    Ok(())
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub profile: String,
    pub profile_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// Input path to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Hash over the output directory, excluding this manifest.
    pub outputs: String,
}

impl RunManifest {
    pub fn new(command: &str, profile: &crate::Profile) -> Self {
        Self {
            command: command.into(),
            profile: profile.name.clone(),
            profile_hash: profile.hash(),
            seeds: BTreeMap::from([("root".to_string(), profile.seed)]),
            ..Default::default()
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let h = if path.is_dir() { dir_hash(path)? } else { file_hash(path)? };
        self.inputs.insert(path.display().to_string(), h);
        Ok(())
    }

    /// Hashes `out` and writes the manifest into it.
    pub fn finish(mut self, out: &Path) -> Result<Self> {
        self.outputs = dir_hash(out)?;
        let path = out.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self).map_err(|e| CoreError::Data(e.to_string()))?;
        std::fs::write(&path, text).map_err(io_err(&path))?;
        Ok(self)
    }

    /// Hashes a single output file and writes the manifest beside it as
    /// `<file>.manifest.json`.
    pub fn finish_file(mut self, out: &Path) -> Result<Self> {
        self.outputs = file_hash(out)?;
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        let path = out.with_file_name(name);
        let text = serde_json::to_string_pretty(&self).map_err(|e| CoreError::Data(e.to_string()))?;
        std::fs::write(&path, text).map_err(io_err(&path))?;
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))
    }
}
