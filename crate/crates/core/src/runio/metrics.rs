use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::metaevo::{IterationReport, Replacement, WorldRecord};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.jsonl";
pub const ANALYSIS_FILE: &str = "analysis.jsonl";

/// Population-level view of one meta-iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub t: u64,
    /// Mean F over healthy worlds; `None` when every world is unhealthy.
    pub mean_score: Option<f64>,
    pub mean_novelty: f64,
    pub mean_diversity: f64,
    pub best_score: Option<f64>,
    pub unhealthy: usize,
    pub archive_len: usize,
    pub replacements: Vec<Replacement>,
}

impl SummaryRecord {
    pub fn from_report(report: &IterationReport) -> Self {
        let n = report.records.len().max(1) as f64;
        let healthy: Vec<f64> = report.records.iter().filter_map(|r| r.score).collect();
        let mean_score =
            (!healthy.is_empty()).then(|| healthy.iter().sum::<f64>() / healthy.len() as f64);
        Self {
            t: report.t,
            mean_score,
            mean_novelty: report.records.iter().map(|r| r.novelty).sum::<f64>() / n,
            mean_diversity: report.records.iter().map(|r| r.diversity).sum::<f64>() / n,
            best_score: healthy.iter().copied().reduce(f64::max),
            unhealthy: report.records.iter().filter(|r| !r.healthy).count(),
            archive_len: report.archive_len,
            replacements: report.replacements.clone(),
        }
    }
}

/// Append-only JSON-lines logs of a run directory.
pub struct MetricsLog {
    metrics: File,
    summary: File,
    dir: PathBuf,
}

fn open_append(path: &Path, keep: Option<u64>) -> io::Result<File> {
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    match keep {
        Some(len) => {
            if file.metadata()?.len() < len {
                return Err(io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    format!("{} is shorter than the checkpoint expects", path.display()),
                ));
            }
            file.set_len(len)?;
        }
        None => file.set_len(0)?,
    }
    Ok(file)
}

impl MetricsLog {
    /// Start fresh logs in `dir`, truncating old ones.
    pub fn create(dir: &Path) -> io::Result<Self> {
        Self::open(dir, None)
    }

    /// Reopen logs, dropping whatever was written after the given cursors.
    pub fn resume(dir: &Path, metrics_cursor: u64, summary_cursor: u64) -> io::Result<Self> {
        Self::open(dir, Some((metrics_cursor, summary_cursor)))
    }

    fn open(dir: &Path, cursors: Option<(u64, u64)>) -> io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            metrics: open_append(&dir.join(METRICS_FILE), cursors.map(|c| c.0))?,
            summary: open_append(&dir.join(SUMMARY_FILE), cursors.map(|c| c.1))?,
            dir: dir.to_path_buf(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, report: &IterationReport) -> io::Result<()> {
        let mut buf = Vec::new();
        for r in &report.records {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        self.metrics.write_all(&buf)?;
        let mut line = serde_json::to_vec(&SummaryRecord::from_report(report))?;
        line.push(b'\n');
        self.summary.write_all(&line)?;
        Ok(())
    }

    /// Byte lengths of the metrics and summary logs.
    pub fn cursors(&mut self) -> io::Result<(u64, u64)> {
        self.metrics.flush()?;
        self.summary.flush()?;
        Ok((
            self.metrics.metadata()?.len(),
            self.summary.metadata()?.len(),
        ))
    }
}

pub fn read_metrics(path: &Path) -> io::Result<Vec<WorldRecord>> {
    read_lines(path)
}

pub fn read_summary(path: &Path) -> io::Result<Vec<SummaryRecord>> {
    read_lines(path)
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> io::Result<Vec<T>> {
    BufReader::new(File::open(path)?)
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|l| serde_json::from_str(&l?).map_err(io::Error::from))
        .collect()
}

/// Append one JSON line to `path`.
pub fn append_json_line<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?
        .write_all(&line)
}
