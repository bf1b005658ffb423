//! CSV and JSON-lines report records.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub clip: String,
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// One JSON line of the evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub clip: String,
    pub frames: usize,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub clips: usize,
    pub frames: usize,
    /// Mean over every frame row.
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Mean of the per-clip means.
    pub clip_mean_psnr: f64,
    pub clip_mean_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub clip: String,
    pub frames: usize,
    pub seed: u64,
    pub noise_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowErrorRecord {
    pub clip: String,
    pub frames: usize,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub variant: String,
    pub params: usize,
    pub psnr: f64,
    pub ssim: f64,
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |source| CliError::Csv { path: path.to_path_buf(), source }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(CliError::io(path))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<std::result::Result<Vec<T>, _>>().map_err(csv_err(path))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(CliError::io(path))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        let line = serde_json::to_string(r).map_err(|e| CliError::Usage(e.to_string()))?;
        writeln!(w, "{line}").map_err(CliError::io(path))?;
    }
    w.flush().map_err(CliError::io(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CliError::Usage(format!("{}: {e}", path.display()))))
        .collect()
}

/// Loss log that is flushed after every row so an interrupted run keeps its history.
pub struct LossLog {
    writer: csv::Writer<File>,
    path: std::path::PathBuf,
}

impl LossLog {
    /// Starts a log at `path`, keeping existing rows up to and including `keep_through`.
    pub fn open(path: &Path, keep_through: u64) -> Result<Self> {
        let kept: Vec<LossRecord> = if keep_through > 0 && path.exists() {
            read_csv::<LossRecord>(path)?.into_iter().filter(|r| r.iteration <= keep_through).collect()
        } else {
            Vec::new()
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        }
        let file = File::create(path).map_err(CliError::io(path))?;
        let mut log = LossLog { writer: csv::WriterBuilder::new().has_headers(false).from_writer(file), path: path.to_path_buf() };
        log.writer.write_record(["iteration", "loss", "lr"]).map_err(csv_err(path))?;
        for r in &kept {
            log.writer.serialize(r).map_err(csv_err(path))?;
        }
        log.writer.flush().map_err(CliError::io(path))?;
        Ok(log)
    }

    pub fn push(&mut self, r: &LossRecord) -> Result<()> {
        self.writer.serialize(r).map_err(csv_err(&self.path))?;
        self.writer.flush().map_err(CliError::io(&self.path))
    }
}
