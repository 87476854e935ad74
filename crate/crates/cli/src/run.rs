use std::path::{Path, PathBuf};
use std::time::Instant;

use loraens::checkpoint::{fingerprint_bytes, write_atomic};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberSeeds {
    pub index: usize,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub fix_init: bool,
    pub fix_shuffle: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    /// Truncated SHA-256 of the file contents, hex.
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub loraens: String,
    pub cli: String,
    pub base_format: u32,
    pub adapter_format: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub status: String,
    pub started_at: String,
    pub finished_at: String,
    pub config_hash: String,
    /// Resolved configuration, also written next to the manifest as
    /// `config.toml` so `--config` on it repeats the run.
    pub config: ExperimentConfig,
    pub data_seed: u64,
    pub pretrain_seed: u64,
    pub eval_seed: u64,
    pub members: Vec<MemberSeeds>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub base_fingerprint: Option<String>,
    pub artifacts: Vec<Artifact>,
    pub timings: Vec<Timing>,
    pub failures: Vec<String>,
    pub versions: Versions,
}

/// A per-run output directory that collects artifacts and timings and
/// writes the manifest when finished.
pub struct Run {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    clock: Instant,
}

pub fn hex(x: u64) -> String {
    format!("{x:016x}")
}

impl Run {
    /// Creates `<root>/<timestamp>-<command>`, adding a counter on collision.
    pub fn create(root: &Path, command: &str, config: &ExperimentConfig) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let now = chrono::Local::now();
        let stem = format!("{}-{command}", now.format("%Y%m%d-%H%M%S"));
        let mut dir = root.join(&stem);
        let mut n = 1;
        loop {
            match std::fs::create_dir(&dir) {
                Ok(()) => break,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    n += 1;
                    dir = root.join(format!("{stem}-{n}"));
                }
                Err(e) => return Err(CliError::io(&dir, e)),
            }
        }
        std::fs::write(dir.join("config.toml"), config.to_toml()).map_err(|e| CliError::io(&dir, e))?;
        Ok(Self {
            manifest: RunManifest {
                command: command.to_string(),
                status: "running".into(),
                started_at: now.to_rfc3339(),
                finished_at: String::new(),
                config_hash: hex(config.fingerprint()),
                config: config.clone(),
                data_seed: config.data_seed,
                pretrain_seed: config.pretrain.seed,
                eval_seed: config.eval.seed,
                members: Vec::new(),
                base_fingerprint: None,
                artifacts: Vec::new(),
                timings: Vec::new(),
                failures: Vec::new(),
                versions: Versions {
                    loraens: loraens::VERSION.into(),
                    cli: env!("CARGO_PKG_VERSION").into(),
                    base_format: loraens::checkpoint::BASE_VERSION,
                    adapter_format: loraens::checkpoint::ADAPTER_VERSION,
                },
            },
            dir,
            clock: Instant::now(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Creates a subdirectory of the run.
    pub fn subdir(&self, name: &str) -> Result<PathBuf> {
        let p = self.dir.join(name);
        std::fs::create_dir_all(&p).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    /// Records an artifact already on disk.
    pub fn artifact(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.manifest.artifacts.push(Artifact {
            path: path.to_path_buf(),
            sha256: hex(fingerprint_bytes(&bytes)),
        });
        Ok(())
    }

    /// Writes `contents` to `name` inside the run and records it.
    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        std::fs::write(&p, contents).map_err(|e| CliError::io(&p, e))?;
        self.artifact(&p)?;
        Ok(p)
    }

    /// Seconds since the previous lap, recorded under `stage`.
    pub fn lap(&mut self, stage: &str) {
        self.manifest.timings.push(Timing {
            stage: stage.into(),
            seconds: self.clock.elapsed().as_secs_f64(),
        });
        self.clock = Instant::now();
    }

    /// Writes the manifest atomically with the final status.
    pub fn finish(mut self, outcome: &Result<()>) -> Result<PathBuf> {
        self.manifest.finished_at = chrono::Local::now().to_rfc3339();
        self.manifest.status = match outcome {
            Ok(()) => "ok".into(),
            Err(CliError::Numerical(_)) => "numerical_failure".into(),
            Err(CliError::Config(_)) => "configuration_failure".into(),
        };
        if let Err(e) = outcome {
            self.manifest.failures.push(e.to_string());
        }
        let path = self.path("manifest.json");
        let json = serde_json::to_vec_pretty(&self.manifest).expect("manifest serialises");
        write_atomic(&path, &json)?;
        Ok(path)
    }
}
