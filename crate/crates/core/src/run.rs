//! Run directory layout and the manifest that lists every file a run wrote.
//!
//! ```text
//! <root>/config.json
//! <root>/checkpoints/stage1.bin, stage2.bin, one_stage.bin
//! <root>/logs/loss.csv
//! <root>/results/*.csv
//! <root>/manifest.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use mpfgvc_tensor::{checkpoint, Scalar};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{config, Error, IoContext, Result};
use crate::model::{Labels, Model};
use crate::pipeline::LossLog;

/// Checkpoint names, in the order a later command prefers them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Stage2,
    OneStage,
    Stage1,
}

impl CheckpointKind {
    pub const PREFERENCE: [CheckpointKind; 3] = [CheckpointKind::Stage2, CheckpointKind::OneStage, CheckpointKind::Stage1];

    pub fn file_name(self) -> &'static str {
        match self {
            CheckpointKind::Stage1 => "stage1.bin",
            CheckpointKind::Stage2 => "stage2.bin",
            CheckpointKind::OneStage => "one_stage.bin",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Relative path to what produced it.
    pub files: BTreeMap<String, ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub kind: String,
    pub command: String,
}

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Opens `root`, creating the standard subdirectories.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["checkpoints", "logs", "results"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).at(&p)?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn checkpoint_path(&self, kind: CheckpointKind) -> PathBuf {
        self.root.join("checkpoints").join(kind.file_name())
    }

    pub fn loss_path(&self) -> PathBuf {
        self.root.join("logs").join("loss.csv")
    }

    pub fn result_path(&self, name: &str) -> PathBuf {
        self.root.join("results").join(format!("{name}.csv"))
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let p = self.manifest_path();
        if !p.exists() {
            return Ok(Manifest::default());
        }
        let text = fs::read_to_string(&p).at(&p)?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: p,
            msg: e.to_string(),
        })
    }

    /// Adds `path` (absolute or relative to the root) to the manifest.
    pub fn record(&self, path: &Path, kind: &str, command: &str) -> Result<()> {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        let mut m = self.manifest()?;
        m.files.insert(
            rel.to_string_lossy().replace('\\', "/"),
            ManifestEntry {
                kind: kind.to_string(),
                command: command.to_string(),
            },
        );
        let p = self.manifest_path();
        fs::write(&p, serde_json::to_vec_pretty(&m)?).at(&p)
    }

    pub fn write_config(&self, cfg: &RunConfig, command: &str) -> Result<()> {
        let p = self.config_path();
        fs::write(&p, serde_json::to_vec_pretty(cfg)?).at(&p)?;
        self.record(&p, "config", command)
    }

    /// Writes a CSV under `results/` and records it.
    pub fn write_result(&self, name: &str, csv: &str, command: &str) -> Result<PathBuf> {
        let p = self.result_path(name);
        fs::write(&p, csv).at(&p)?;
        self.record(&p, "results", command)?;
        Ok(p)
    }

    /// Appends rows to `logs/loss.csv`, writing the header when the file is new.
    pub fn append_losses(&self, log: &LossLog, command: &str) -> Result<()> {
        let p = self.loss_path();
        let csv = log.to_csv();
        let body = if p.exists() {
            csv.split_once('\n').map(|(_, rows)| rows).unwrap_or("")
        } else {
            csv.as_str()
        };
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&p).at(&p)?;
        f.write_all(body.as_bytes()).at(&p)?;
        self.record(&p, "loss log", command)
    }

    pub fn save_model<T: Scalar>(&self, model: &Model<T>, kind: CheckpointKind, command: &str) -> Result<PathBuf> {
        let p = self.checkpoint_path(kind);
        let meta = json!({
            "checkpoint": kind,
            "config": model.cfg,
            "supercategory": model.labels.supercategory,
            "class_names": model.labels.class_names,
        });
        checkpoint::save(&p, &model.store, meta)?;
        self.record(&p, "checkpoint", command)?;
        Ok(p)
    }

    /// First existing checkpoint among `kinds`.
    pub fn find_checkpoint(&self, kinds: &[CheckpointKind]) -> Option<(CheckpointKind, PathBuf)> {
        kinds
            .iter()
            .map(|&k| (k, self.checkpoint_path(k)))
            .find(|(_, p)| p.exists())
    }
}

/// Rebuilds a model from a checkpoint written by [`RunDir::save_model`].
pub fn load_model<T: Scalar>(path: &Path) -> Result<Model<T>> {
    if !path.exists() {
        return Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        });
    }
    let bytes = fs::read(path).at(path)?;
    let (_, meta) = checkpoint::from_bytes::<T>(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let cfg: RunConfig =
        serde_json::from_value(meta["config"].clone()).map_err(|e| bad(&format!("config: {e}")))?;
    let labels = Labels {
        supercategory: meta["supercategory"]
            .as_str()
            .ok_or_else(|| bad("missing supercategory"))?
            .to_string(),
        class_names: serde_json::from_value(meta["class_names"].clone()).map_err(|e| bad(&format!("class_names: {e}")))?,
    };
    let mut model = Model::new(&cfg, labels)?;
    checkpoint::load_into(path, &mut model.store).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(model)
}

/// Parses a comma-separated list of integers, e.g. `"4,8,16"`.
pub fn parse_values(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse().map_err(|_| config(format!("not an integer: {v:?}"))))
        .collect()
}
