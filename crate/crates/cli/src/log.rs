//! JSONL training log, one record per optimizer step.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ctxssl_core::train::StepReport;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub contrastive: f64,
    pub predictor: f64,
    pub total: f64,
    /// Context environments in the batch: distinct labels joined by `+`.
    pub group: String,
    pub wallclock_ms: u64,
}

impl LogRecord {
    pub fn from_report(r: &StepReport, wallclock_ms: u64) -> LogRecord {
        let mut labels: Vec<&str> = r.envs.iter().map(|e| e.label()).collect();
        labels.sort_unstable();
        labels.dedup();
        LogRecord {
            step: r.step,
            contrastive: r.loss.contrastive,
            predictor: r.loss.predictor,
            total: r.loss.total,
            group: labels.join("+"),
            wallclock_ms,
        }
    }
}

pub struct LogWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LogWriter {
    pub fn create(path: &Path) -> Result<LogWriter> {
        let f = File::create(path).map_err(|e| CliError::io(path, e))?;
        Ok(LogWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }

    /// Keeps the lines of records up to `step`, byte for byte, and appends after them.
    pub fn resume(path: &Path, step: u64) -> Result<LogWriter> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(CliError::io(path, e)),
        };
        let mut kept = Vec::new();
        for (i, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let r = parse_line(path, i, line)?;
            if r.step <= step {
                kept.push(line);
            }
        }
        let mut w = LogWriter::create(path)?;
        for line in kept {
            writeln!(w.out, "{line}").map_err(|e| CliError::io(path, e))?;
        }
        Ok(w)
    }

    pub fn append(&mut self, r: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(self.out, "{line}").map_err(|e| CliError::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let f = OpenOptions::new()
        .read(true)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(path, i, &line)?);
    }
    Ok(out)
}

fn parse_line(path: &Path, i: usize, line: &str) -> Result<LogRecord> {
    serde_json::from_str(line)
        .map_err(|e| CliError::Mismatch(format!("{} line {}: {e}", path.display(), i + 1)))
}
