use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;

use super::checkpoint::{Checkpoint, CheckpointError};
use super::config::{ConfigError, EmbedderKind, RunConfig};
use super::metrics::MetricsLog;
use super::render::export_frames;
use crate::diversity::{connect_embedder, BuiltinEmbedder, Embedder};
use crate::metaevo::{IterationReport, Run, RunError};

#[derive(Debug, Error)]
pub enum DriverError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// `ckpt_t<iteration:06>.bin`.
pub fn checkpoint_filename(iteration: u64) -> String {
    format!("ckpt_t{iteration:06}.bin")
}

/// Newest checkpoint in `dir`, by iteration.
pub fn latest_checkpoint(dir: &Path) -> io::Result<Option<PathBuf>> {
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(t) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("ckpt_t"))
            .and_then(|n| n.strip_suffix(".bin"))
            .and_then(|n| n.parse::<u64>().ok())
        else {
            continue;
        };
        if best.as_ref().map_or(true, |(b, _)| t > *b) {
            best = Some((t, path));
        }
    }
    Ok(best.map(|(_, p)| p))
}

pub fn make_embedder(config: &RunConfig) -> Box<dyn Embedder> {
    match config.embedder.kind {
        EmbedderKind::Builtin => Box::new(BuiltinEmbedder),
        EmbedderKind::External => connect_embedder(
            config.embedder.endpoint.as_deref(),
            Duration::from_millis(config.embedder.timeout_ms),
        ),
    }
}

/// A run bound to its output directory: logs every iteration, exports
/// frames and writes checkpoints on schedule.
pub struct Driver {
    config: RunConfig,
    run: Run,
    log: MetricsLog,
}

impl Driver {
    /// Start from scratch, truncating any logs already in the output directory.
    pub fn start(config: RunConfig) -> Result<Self, DriverError> {
        config.validate()?;
        std::fs::create_dir_all(&config.output_dir)?;
        std::fs::write(config.output_dir.join("config.json"), config.to_json())?;
        let run = Run::new(
            config.world,
            config.meta.clone(),
            config.seed,
            make_embedder(&config),
        )?;
        let log = MetricsLog::create(&config.output_dir)?;
        Ok(Self { config, run, log })
    }

    /// Continue from a checkpoint. Log lines written after it are dropped, so
    /// the logs end up as if the run had never stopped. `output_dir`
    /// overrides the directory stored in the checkpoint.
    pub fn resume(checkpoint: &Path, output_dir: Option<&Path>) -> Result<Self, DriverError> {
        let ckpt = Checkpoint::load(checkpoint)?;
        let mut config = ckpt.config;
        if let Some(dir) = output_dir {
            config.output_dir = dir.to_path_buf();
        }
        config.validate()?;
        let run = Run::from_state(
            config.world,
            config.meta.clone(),
            ckpt.worlds,
            ckpt.archive,
            ckpt.meta_rng,
            ckpt.iteration,
            make_embedder(&config),
        )?;
        let log = MetricsLog::resume(&config.output_dir, ckpt.metrics_cursor, ckpt.summary_cursor)?;
        Ok(Self { config, run, log })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn run(&self) -> &Run {
        &self.run
    }

    pub fn is_done(&self) -> bool {
        self.run.is_done()
    }

    pub fn step(&mut self) -> Result<IterationReport, DriverError> {
        let report = self.run.step()?;
        self.log.write(&report)?;
        if self.config.frame_stride > 0 {
            for (i, tr) in report.trajectories.iter().enumerate() {
                let dir = self
                    .config
                    .output_dir
                    .join("frames")
                    .join(format!("world_{i:03}"));
                export_frames(
                    &dir,
                    &self.config.run_id,
                    report.t,
                    &tr.frames,
                    self.config.frame_stride,
                )?;
            }
        }
        let every = self.config.checkpoint_interval;
        if (every > 0 && report.t % every == 0) || self.run.is_done() {
            self.checkpoint()?;
        }
        Ok(report)
    }

    /// Save the current state and return its path.
    pub fn checkpoint(&mut self) -> Result<PathBuf, DriverError> {
        let (metrics_cursor, summary_cursor) = self.log.cursors()?;
        let ckpt = Checkpoint {
            config: self.config.clone(),
            iteration: self.run.iteration(),
            meta_rng: self.run.rng().clone(),
            metrics_cursor,
            summary_cursor,
            archive: self.run.archive().clone(),
            worlds: self.run.worlds().to_vec(),
        };
        let path = self
            .config
            .output_dir
            .join(checkpoint_filename(ckpt.iteration));
        ckpt.save(&path)?;
        log::info!("checkpoint {}", path.display());
        Ok(path)
    }

    /// Step until the configured number of meta-iterations is reached.
    pub fn finish(
        &mut self,
        mut on_iteration: impl FnMut(&IterationReport),
    ) -> Result<(), DriverError> {
        while !self.is_done() {
            let report = self.step()?;
            on_iteration(&report);
        }
        Ok(())
    }
}
