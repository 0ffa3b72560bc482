use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::checkpoint::save_model;
use crate::classifier::ModelParams;
use crate::error::{Error, Result};

/// Receives metrics streams and checkpoints as stages finish.
pub trait RunSink {
    /// Replaces the metrics stream of `stage` with `lines`.
    fn metrics(&mut self, stage: &str, lines: &[Value]) -> Result<()>;

    fn checkpoint(&mut self, name: &str, model: &ModelParams) -> Result<()>;
}

/// Discards everything.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl RunSink for NullSink {
    fn metrics(&mut self, _: &str, _: &[Value]) -> Result<()> {
        Ok(())
    }

    fn checkpoint(&mut self, _: &str, _: &ModelParams) -> Result<()> {
        Ok(())
    }
}

/// Writes `metrics/<stage>.jsonl` and `checkpoints/<name>.params` under a run
/// directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["", "metrics", "checkpoints", "data", "predictions", "reports"] {
            let dir = root.join(sub);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.data_dir().join("manifest.json")
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.params"))
    }

    pub fn metrics_path(&self, stage: &str) -> PathBuf {
        self.root.join("metrics").join(format!("{stage}.jsonl"))
    }

    pub fn predictions_path(&self, name: &str) -> PathBuf {
        self.root.join("predictions").join(format!("{name}.jsonl"))
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.json"))
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.root.join("vocab.txt")
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }
}

impl RunSink for RunDir {
    fn metrics(&mut self, stage: &str, lines: &[Value]) -> Result<()> {
        let path = self.metrics_path(stage);
        let file = File::create(&path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
        let mut out = BufWriter::new(file);
        for line in lines {
            serde_json::to_writer(&mut out, line)?;
            out.write_all(b"\n")
                .map_err(|e| Error::io(format!("write {}", path.display()), e))?;
        }
        out.flush()
            .map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    fn checkpoint(&mut self, name: &str, model: &ModelParams) -> Result<()> {
        save_model(&self.checkpoint_path(name), model)
    }
}
