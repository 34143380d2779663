//! Layout of a run directory and its manifest.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use cascade_core::experiment::RunConfig;
use serde::{Deserialize, Serialize};

use crate::config;

pub struct RunDir {
    root: PathBuf,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub stages: serde_json::Map<String, serde_json::Value>,
}

impl RunDir {
    pub fn open(root: &Path) -> Result<Self> {
        for sub in ["data", "checkpoints"] {
            let p = root.join(sub);
            std::fs::create_dir_all(&p).with_context(|| format!("creating {}", p.display()))?;
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn train_data(&self) -> PathBuf {
        self.path("data/train.jsonl")
    }

    pub fn val_data(&self) -> PathBuf {
        self.path("data/val.jsonl")
    }

    pub fn card_checkpoint(&self) -> PathBuf {
        self.path("checkpoints/card.ckpt")
    }

    pub fn flow_checkpoint(&self) -> PathBuf {
        self.path("checkpoints/flow.ckpt")
    }

    pub fn write(&self, path: &Path, text: &str) -> Result<()> {
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    fn manifest_path(&self) -> PathBuf {
        self.path("manifest.json")
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let p = self.manifest_path();
        if !p.exists() {
            return Ok(Manifest::default());
        }
        let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
    }

    /// Records a completed stage with its resolved configuration.
    pub fn record(&self, cfg: &RunConfig, stage: &str, outputs: &[PathBuf], seconds: f64) -> Result<()> {
        let mut m = self.manifest()?;
        m.version = env!("CARGO_PKG_VERSION").to_owned();
        let hash = config::hash(cfg)?;
        let config_file = format!("config-{}.toml", &hash[..12]);
        self.write(&self.path(&config_file), &config::to_toml(cfg)?)?;
        let rel = |p: &PathBuf| p.strip_prefix(&self.root).unwrap_or(p).display().to_string();
        let finished = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        m.stages.insert(
            stage.to_owned(),
            serde_json::json!({
                "config_sha256": hash,
                "config": config_file,
                "seed": cfg.seed,
                "stage_seed": cfg.stage_seed(stage),
                "outputs": outputs.iter().map(rel).collect::<Vec<_>>(),
                "seconds": seconds,
                "finished_unix": finished,
            }),
        );
        self.write(&self.manifest_path(), &serde_json::to_string_pretty(&m)?)
    }
}
