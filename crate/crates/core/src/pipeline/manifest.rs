use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::error::{Error, Result};

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub started: String,
    pub finished: String,
    pub artifacts: Vec<Artifact>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tool_version: String,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, InputDigest>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join("manifest.json")
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = Self::path(run_dir);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Written to a temporary file and renamed, so readers never see a
    /// partial manifest.
    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = Self::path(run_dir);
        let tmp = run_dir.join("manifest.json.tmp");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    /// Checks that every input still hashes to its recorded digest.
    pub fn verify_inputs(&self) -> Result<()> {
        for (name, d) in &self.inputs {
            if !d.path.exists() {
                return Err(Error::MissingArtifact(d.path.clone()));
            }
            if sha256_file(&d.path)? != d.sha256 {
                return Err(Error::Invalid(format!(
                    "input `{name}` ({}) changed since preprocessing",
                    d.path.display()
                )));
            }
        }
        Ok(())
    }

    /// Checks that a finished stage's artifacts exist and are unchanged.
    pub fn verify_stage(&self, run_dir: &Path, stage: &str) -> Result<()> {
        let rec = self
            .stages
            .get(stage)
            .ok_or_else(|| Error::MissingArtifact(run_dir.join(stage)))?;
        for a in &rec.artifacts {
            let p = run_dir.join(&a.path);
            if !p.exists() {
                return Err(Error::MissingArtifact(p));
            }
            if sha256_file(&p)? != a.sha256 {
                return Err(Error::Invalid(format!("artifact {} was modified", a.path)));
            }
        }
        Ok(())
    }
}

/// Exclusive ownership of a run directory, held through `<run>/.lock`.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let path = run_dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked(run_dir.to_path_buf()))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_lock_fails_until_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(Error::Locked(_))));
        drop(a);
        RunLock::acquire(dir.path()).unwrap();
    }
}
