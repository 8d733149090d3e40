//! Content-hash stamps that make completed stages no-ops on rerun.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const STAMP: &str = ".stamp.json";

/// One stage invocation: its declared inputs, outputs and parameters.
#[derive(Clone, Debug, Serialize)]
pub struct Stage {
    pub command: String,
    pub inputs: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub outputs: Vec<String>,
    pub params: serde_json::Value,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_path(h: &mut Sha256, path: &Path) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for e in entries {
            if e.file_name().is_some_and(|n| n == STAMP) {
                continue;
            }
            h.update(e.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default().as_bytes());
            hash_path(h, &e)?;
        }
    } else {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(())
}

impl Stage {
    /// SHA-256 over the command, parameters and input contents.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.command.as_bytes());
        h.update(serde_json::to_vec(&self.params)?);
        for p in &self.inputs {
            h.update(p.to_string_lossy().as_bytes());
            hash_path(&mut h, p)?;
        }
        Ok(hex(&h.finalize()))
    }

    /// Whether the stamp matches and every declared output exists.
    pub fn up_to_date(&self) -> Result<bool> {
        let stamp = self.out_dir.join(STAMP);
        let Ok(text) = std::fs::read_to_string(&stamp) else {
            return Ok(false);
        };
        let v: serde_json::Value = serde_json::from_str(&text).unwrap_or_default();
        let outputs_exist = self.outputs.iter().all(|o| self.out_dir.join(o).exists());
        Ok(outputs_exist && v["digest"].as_str() == Some(self.digest()?.as_str()))
    }

    pub fn write_stamp(&self) -> Result<()> {
        let v = serde_json::json!({ "command": self.command, "digest": self.digest()? });
        let path = self.out_dir.join(STAMP);
        std::fs::write(&path, serde_json::to_string_pretty(&v)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn plan(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Runs `body` unless the stage is up to date (then prints a note), in
    /// dry-run mode prints the plan instead.
    pub fn run(&self, dry_run: bool, body: impl FnOnce() -> Result<()>) -> Result<()> {
        for p in &self.inputs {
            if !p.exists() {
                return Err(Error::invalid(format!("{}: input {} does not exist", self.command, p.display())));
            }
        }
        if dry_run {
            println!("{}", self.plan()?);
            return Ok(());
        }
        if self.up_to_date()? {
            println!("{}: up to date ({})", self.command, self.out_dir.display());
            return Ok(());
        }
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        body()?;
        self.write_stamp()
    }
}
