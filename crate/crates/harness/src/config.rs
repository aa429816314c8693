//! Run configuration: one TOML file with nested sections, every field
//! optional. Unknown keys are rejected and errors carry the dotted key path.

use std::path::{Path, PathBuf};

use dkm_core::domains::{Benchmark, BenchmarkConfig};
use dkm_core::evaluation::{default_kappa_grid, EvalConfig};
use dkm_core::nets::ArchConfig;
use dkm_core::rng::derive_seed;
use dkm_core::training::{Regime, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub kappa: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            kappa: default_kappa_grid(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Run directory. Not part of the resolved snapshot, so moving a run
    /// does not change its config hash.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    pub regime: Regime,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub benchmark: BenchmarkConfig,
    pub protocol: EvalConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| HarnessError::config("<document>", e))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let message = e.inner().message().to_string();
            HarnessError::config(path, message)
        })
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(format!("reading {}", path.display()), e))?;
        let text = std::str::from_utf8(&bytes).map_err(|e| HarnessError::config("<document>", e))?;
        Ok((Self::parse(text)?, bytes))
    }

    /// Semantic checks that go beyond the schema.
    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| HarnessError::config("train", strip(e)))?;
        self.benchmark.validate().map_err(|e| HarnessError::config("benchmark", strip(e)))?;
        self.protocol.validate().map_err(|e| HarnessError::config("protocol", strip(e)))?;
        if self.arch.in_dim != self.benchmark.in_dim {
            return Err(HarnessError::config(
                "arch.in_dim",
                format!("{} does not match benchmark.in_dim {}", self.arch.in_dim, self.benchmark.in_dim),
            ));
        }
        let a = &self.arch;
        if a.in_dim == 0 || a.feature_dim == 0 || a.mapper_hidden == 0 || a.domain_hidden == 0 {
            return Err(HarnessError::config("arch", "layer widths must be positive"));
        }
        if a.encoder_hidden.contains(&0) {
            return Err(HarnessError::config("arch.encoder_hidden", "layer widths must be positive"));
        }
        if self.sweep.kappa.is_empty() {
            return Err(HarnessError::config("sweep.kappa", "grid is empty"));
        }
        if let Some(k) = self.sweep.kappa.iter().find(|k| !(k.is_finite() && **k >= 0.0)) {
            return Err(HarnessError::config("sweep.kappa", format!("{k} is not a non-negative number")));
        }
        Ok(())
    }

    /// The configuration with every default written out.
    pub fn resolved_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| HarnessError::config("<document>", e))
    }

    /// SHA-256 of the resolved snapshot, hex encoded.
    pub fn config_hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.resolved_toml()?.as_bytes())))
    }

    pub fn benchmark_seed(&self) -> u64 {
        derive_seed(self.seed, "benchmark", 0)
    }

    pub fn build_benchmark(&self) -> Result<Benchmark> {
        Ok(self.benchmark.build(self.benchmark_seed())?)
    }
}

fn strip(e: dkm_core::Error) -> String {
    match e {
        dkm_core::Error::InvalidArgument(m) => m,
        other => other.to_string(),
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Git-style content hash: SHA-256 over `blob <len>\0<content>`.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex(&h.finalize())
}
