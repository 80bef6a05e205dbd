use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use super::{StepMetrics, TrainConfig, TrainState, Trainer};
use crate::error::{Error, Result};

/// On-disk layout of one run:
///
/// ```text
/// <root>/config.toml
/// <root>/manifest.json
/// <root>/teacher.safetensors
/// <root>/metrics.jsonl
/// <root>/checkpoints/step_000100.safetensors
/// <root>/samples/
/// ```
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let run = Self { root: root.into() };
        for dir in [run.checkpoints_dir(), run.samples_dir()] {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(run)
    }

    pub fn open(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn teacher_path(&self) -> PathBuf {
        self.root.join("teacher.safetensors")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn samples_dir(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.checkpoints_dir().join(format!("step_{step:06}.safetensors"))
    }

    pub fn diagnostic_path(&self, step: u64) -> PathBuf {
        self.checkpoints_dir().join(format!("diagnostic_step_{step:06}.safetensors"))
    }

    /// The regular checkpoint with the highest step, if any.
    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        let dir = self.checkpoints_dir();
        if !dir.exists() {
            return Ok(None);
        }
        let mut best: Option<(u64, PathBuf)> = None;
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let step = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("step_"))
                .and_then(|n| n.strip_suffix(".safetensors"))
                .and_then(|n| n.parse::<u64>().ok());
            if let Some(step) = step {
                if best.as_ref().is_none_or(|(b, _)| step > *b) {
                    best = Some((step, path));
                }
            }
        }
        Ok(best.map(|(_, p)| p))
    }

    pub fn read_metrics(&self) -> Result<Vec<StepMetrics>> {
        let path = self.metrics_path();
        if !path.exists() {
            return Ok(Vec::new());
        }
        let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }

    /// Drop records past `step`, as when resuming from that checkpoint.
    pub fn truncate_metrics(&self, step: u64) -> Result<()> {
        let kept: Vec<StepMetrics> = self.read_metrics()?.into_iter().filter(|m| m.step <= step).collect();
        let path = self.metrics_path();
        let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        for m in &kept {
            writeln!(f, "{}", serde_json::to_string(m)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Appends step records to `metrics.jsonl` and saves periodic checkpoints.
pub struct StepRecorder<'a> {
    run: &'a RunDir,
    cfg: &'a TrainConfig,
    file: File,
}

impl<'a> StepRecorder<'a> {
    pub fn new(run: &'a RunDir, cfg: &'a TrainConfig) -> Result<Self> {
        let path = run.metrics_path();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { run, cfg, file })
    }

    pub fn record(&mut self, m: &StepMetrics, state: &TrainState) -> Result<()> {
        let path = self.run.metrics_path();
        writeln!(self.file, "{}", serde_json::to_string(m)?).map_err(|e| Error::io(&path, e))?;
        self.file.flush().map_err(|e| Error::io(&path, e))?;
        let every = self.cfg.checkpoint_every;
        if every > 0 && state.step % every == 0 {
            state.save(&self.run.checkpoint_path(state.step), self.cfg)?;
        }
        Ok(())
    }
}

impl Trainer {
    /// Train to `until` inside a run directory. Every step is logged and a
    /// final checkpoint written; a non-finite loss leaves a diagnostic
    /// checkpoint of the pre-step state behind before the error is returned.
    pub fn run_in(&self, state: &mut TrainState, until: u64, run: &RunDir) -> Result<Vec<StepMetrics>> {
        let mut rec = StepRecorder::new(run, self.config())?;
        let mut out = Vec::new();
        while state.step < until {
            let before = state.step;
            let snapshot = state.fork()?;
            match self.step(state) {
                Ok(m) => {
                    rec.record(&m, state)?;
                    out.push(m);
                }
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    snapshot.save(&run.diagnostic_path(before), self.config())?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        let last = run.checkpoint_path(state.step);
        if !last.exists() {
            state.save(&last, self.config())?;
        }
        Ok(out)
    }
}
