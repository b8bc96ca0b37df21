//! Run manifests: what a subcommand read, what it wrote, and how long it took.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use socialalign_core::dataset::io::write_atomic;
use socialalign_core::error::Result;

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

impl Artifact {
    fn of(path: &Path, bytes: &[u8]) -> Self {
        Artifact {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        Ok(Self::of(path, &bytes))
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// Model configuration in `key = value` form, when the stage uses one.
    pub config: Option<String>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub timings_ms: BTreeMap<String, u128>,
}

/// Collects a stage's artifacts. Outputs are buffered and written only by
/// [`Run::finish`], each to a temporary name that is then renamed.
pub struct Run {
    manifest: RunManifest,
    out: PathBuf,
    pending: Vec<(PathBuf, Vec<u8>)>,
    started: Instant,
    phase: Instant,
}

impl Run {
    pub fn new(command: &str, seed: u64, out: &Path) -> Self {
        let now = Instant::now();
        Run {
            manifest: RunManifest {
                command: command.to_string(),
                seed,
                config: None,
                inputs: Vec::new(),
                outputs: Vec::new(),
                timings_ms: BTreeMap::new(),
            },
            out: out.to_path_buf(),
            pending: Vec::new(),
            started: now,
            phase: now,
        }
    }

    pub fn config(&mut self, text: String) {
        self.manifest.config = Some(text);
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.manifest.inputs.push(Artifact::read(path)?);
        Ok(())
    }

    /// Records the time since the previous call under `name`.
    pub fn lap(&mut self, name: &str) {
        let now = Instant::now();
        self.manifest
            .timings_ms
            .insert(name.to_string(), now.duration_since(self.phase).as_millis());
        self.phase = now;
    }

    pub fn output(&mut self, name: &str, bytes: impl Into<Vec<u8>>) -> PathBuf {
        let path = self.out.join(name);
        self.pending.push((path.clone(), bytes.into()));
        path
    }

    /// Lists a file some other writer already placed under the output dir.
    pub fn existing_output(&mut self, path: &Path) -> Result<()> {
        self.manifest.outputs.push(Artifact::read(path)?);
        Ok(())
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        fs::create_dir_all(&self.out)?;
        for (path, bytes) in &self.pending {
            write_atomic(path, bytes)?;
            self.manifest.outputs.push(Artifact::of(path, bytes));
        }
        self.manifest
            .timings_ms
            .insert("total".into(), self.started.elapsed().as_millis());
        let name = format!("{}.manifest.json", self.manifest.command);
        let body = serde_json::to_string_pretty(&self.manifest)? + "\n";
        write_atomic(&self.out.join(name), body.as_bytes())?;
        Ok(self.manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outputs_are_hashed_and_written_on_finish() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = Run::new("demo", 3, dir.path());
        let p = run.output("a.txt", "abc");
        assert!(!p.exists());
        let m = run.finish().unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "abc");
        assert_eq!(
            m.outputs[0].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert!(dir.path().join("demo.manifest.json").exists());
    }
}
