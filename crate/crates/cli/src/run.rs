//! Run-directory lifecycle: creation and naming, input-artifact discovery
//! across previous runs, and the manifest every command writes beside its
//! outputs.

use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use mvdiff::config::Config;
use mvdiff::{Error, Result};

/// The root holding one directory per run, named
/// `<epoch-seconds>-<command>-<config-digest>`.
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: Option<PathBuf>) -> Self {
        Workspace {
            root: root.unwrap_or_else(|| PathBuf::from("runs")),
        }
    }

    /// Newest previous run containing `probe` (a run-relative path).
    fn find_latest(&self, probe: &str) -> Option<PathBuf> {
        let mut hits: Vec<PathBuf> = std::fs::read_dir(&self.root)
            .ok()?
            .flatten()
            .map(|e| e.path())
            .filter(|p| p.is_dir() && p.join(probe).exists())
            .collect();
        hits.sort();
        hits.pop()
    }

    /// Resolve an input artifact: an explicit config `key` wins, otherwise
    /// the newest run containing `probe` supplies `rel`. The resolved path
    /// is pinned back into the config so the snapshot names real inputs,
    /// and `witness` (a file under the path, or the path itself when
    /// empty) must exist.
    fn resolve(&self, cfg: &mut Config, key: &str, probe: &str, rel: &str, witness: &str) -> Result<PathBuf> {
        let path = match cfg.get::<String>(key)? {
            Some(p) => PathBuf::from(p),
            None => {
                let run = self
                    .find_latest(probe)
                    .ok_or_else(|| Error::MissingArtifact(self.root.join("<run>").join(probe)))?;
                if rel.is_empty() {
                    run
                } else {
                    run.join(rel)
                }
            }
        };
        let check = if witness.is_empty() {
            path.clone()
        } else {
            path.join(witness)
        };
        if !check.exists() {
            return Err(Error::MissingArtifact(check));
        }
        cfg.set(key, path.to_string_lossy())?;
        Ok(path)
    }

    pub fn dataset_dir(&self, cfg: &mut Config) -> Result<PathBuf> {
        self.resolve(cfg, "paths.dataset", "dataset/dataset.json", "dataset", "dataset.json")
    }

    pub fn backbones_dir(&self, cfg: &mut Config) -> Result<PathBuf> {
        self.resolve(cfg, "paths.backbones", "encoder.ckpt", "", "encoder.ckpt")
    }

    pub fn apm_ckpt(&self, cfg: &mut Config) -> Result<PathBuf> {
        self.resolve(cfg, "paths.apm", "apm.ckpt", "apm.ckpt", "")
    }

    pub fn unet_ckpt(&self, cfg: &mut Config) -> Result<PathBuf> {
        self.resolve(cfg, "paths.unet", "unet.ckpt", "unet.ckpt", "")
    }

    pub fn samples_dir(&self, cfg: &mut Config) -> Result<PathBuf> {
        self.resolve(cfg, "paths.samples", "samples.json", "", "samples.json")
    }

    /// Create the run directory for a fully resolved config.
    pub fn begin(&self, command: &str, cfg: &Config) -> Result<Run> {
        cfg.deny_unknown()?;
        let digest = cfg.digest();
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .expect("clock predates the epoch")
            .as_secs();
        std::fs::create_dir_all(&self.root)?;
        let mut dir = self.root.join(format!("{secs}-{command}-{digest}"));
        let mut n = 1u32;
        while dir.exists() {
            n += 1;
            dir = self.root.join(format!("{secs}-{command}-{digest}.{n}"));
        }
        std::fs::create_dir_all(&dir)?;
        Ok(Run {
            dir,
            command: command.to_string(),
            digest,
            started: Instant::now(),
        })
    }
}

/// An in-progress run directory.
pub struct Run {
    pub dir: PathBuf,
    command: String,
    pub digest: String,
    started: Instant,
}

#[derive(serde::Serialize)]
pub struct ArtifactRecord {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
}

impl ArtifactRecord {
    pub fn plain(name: impl Into<String>) -> Self {
        ArtifactRecord {
            name: name.into(),
            checksum: None,
        }
    }

    pub fn summed(name: impl Into<String>, checksum: impl Into<String>) -> Self {
        ArtifactRecord {
            name: name.into(),
            checksum: Some(checksum.into()),
        }
    }
}

impl Run {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Write the resolved-config snapshot and the run manifest, then print
    /// the run directory (the last line of every successful command).
    pub fn finish(
        self,
        cfg: &Config,
        dataset_digest: Option<String>,
        artifacts: Vec<ArtifactRecord>,
    ) -> Result<()> {
        cfg.snapshot(&self.dir.join("resolved.cfg"))?;
        let manifest = serde_json::json!({
            "command": self.command,
            "config_digest": self.digest,
            "dataset_digest": dataset_digest,
            "artifacts": artifacts,
            "elapsed_secs": self.started.elapsed().as_secs_f64(),
        });
        let body = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Format(format!("run manifest: {e}")))?;
        std::fs::write(self.dir.join("manifest.json"), body + "\n")?;
        println!("run: {}", self.dir.display());
        Ok(())
    }
}
