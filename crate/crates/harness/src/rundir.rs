//! Output directory of one command invocation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{blob_hash, RunConfig};
use crate::error::{HarnessError, Result};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const INPUT_HASHES: &str = "inputs.sha256";
/// Wall-clock durations. Kept apart from the metrics files so that those
/// stay byte-identical across reruns.
pub const TIMINGS: &str = "timings.csv";

#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    inputs: Vec<(String, String)>,
    timings: Vec<(String, f64)>,
}

impl RunDir {
    /// Creates `root`. An existing directory is refused unless `force`,
    /// in which case it is removed first.
    pub fn create(root: &Path, force: bool) -> Result<Self> {
        if root.exists() {
            if !force {
                return Err(HarnessError::RunDirExists(root.to_path_buf()));
            }
            fs::remove_dir_all(root).map_err(|e| HarnessError::io(format!("clearing {}", root.display()), e))?;
        }
        fs::create_dir_all(root).map_err(|e| HarnessError::io(format!("creating {}", root.display()), e))?;
        Ok(Self {
            root: root.to_path_buf(),
            inputs: Vec::new(),
            timings: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&self, name: &str, content: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| HarnessError::io(format!("creating {}", parent.display()), e))?;
        }
        fs::write(&p, content).map_err(|e| HarnessError::io(format!("writing {}", p.display()), e))
    }

    /// Records an input file under `label` for `inputs.sha256`.
    pub fn record_input(&mut self, label: &str, content: &[u8]) {
        self.inputs.push((label.to_string(), blob_hash(content)));
    }

    pub fn record_input_file(&mut self, label: &str, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| HarnessError::io(format!("reading {}", path.display()), e))?;
        self.record_input(label, &bytes);
        Ok(())
    }

    pub fn write_config(&mut self, cfg: &RunConfig, original: &[u8]) -> Result<()> {
        self.record_input("config", original);
        self.write(RESOLVED_CONFIG, cfg.resolved_toml()?)
    }

    /// Runs `f` and records its duration under `phase`.
    pub fn timed<T>(&mut self, phase: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        self.timings.push((phase.to_string(), start.elapsed().as_secs_f64()));
        Ok(out)
    }

    /// Writes the input hashes and timings.
    pub fn finish(self) -> Result<()> {
        let mut hashes = String::new();
        for (label, h) in &self.inputs {
            hashes.push_str(&format!("{h}  {label}\n"));
        }
        self.write(INPUT_HASHES, hashes)?;
        let mut t = String::from("phase,seconds\n");
        for (phase, s) in &self.timings {
            t.push_str(&format!("{phase},{s:.3}\n"));
        }
        self.write(TIMINGS, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn existing_directory_requires_force() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("run");
        RunDir::create(&root, false).unwrap().write("a.csv", "x").unwrap();
        let err = RunDir::create(&root, false).unwrap_err();
        assert!(matches!(err, HarnessError::RunDirExists(_)));
        assert!(root.join("a.csv").exists());
        RunDir::create(&root, true).unwrap();
        assert!(!root.join("a.csv").exists());
    }

    #[test]
    fn finish_writes_hashes_and_timings() {
        let tmp = tempfile::tempdir().unwrap();
        let mut d = RunDir::create(&tmp.path().join("r"), false).unwrap();
        d.record_input("config", b"seed = 1\n");
        d.timed("phase", || Ok(())).unwrap();
        d.finish().unwrap();
        let h = fs::read_to_string(tmp.path().join("r").join(INPUT_HASHES)).unwrap();
        assert!(h.ends_with("  config\n"));
        let t = fs::read_to_string(tmp.path().join("r").join(TIMINGS)).unwrap();
        assert!(t.starts_with("phase,seconds\nphase,"));
    }
}
