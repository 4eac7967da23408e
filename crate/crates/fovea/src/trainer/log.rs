//! Append-only training log: CSV with columns `stage,epoch,step,lr,loss`.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub stage: u8,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug)]
pub struct TrainLog {
    path: PathBuf,
    file: std::io::BufWriter<std::fs::File>,
}

impl TrainLog {
    /// Open for appending; writes the header only when the file is new.
    pub fn open(path: &Path) -> Result<TrainLog> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let is_new = !path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        let mut log = TrainLog {
            path: path.to_path_buf(),
            file: std::io::BufWriter::new(file),
        };
        if is_new {
            writeln!(log.file, "stage,epoch,step,lr,loss")?;
        }
        Ok(log)
    }

    pub fn push(&mut self, row: &LogRow) -> Result<()> {
        writeln!(
            self.file,
            "{},{},{},{},{}",
            row.stage, row.epoch, row.step, row.lr, row.loss
        )?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read log {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "stage,epoch,step,lr,loss" {
                return Err(Error::Data(format!("unexpected log header: {line}")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::Data(format!("malformed log line {}: {line}", i + 1)));
        }
        rows.push(LogRow {
            stage: parts[0].parse().map_err(|_| bad(line))?,
            epoch: parts[1].parse().map_err(|_| bad(line))?,
            step: parts[2].parse().map_err(|_| bad(line))?,
            lr: parts[3].parse().map_err(|_| bad(line))?,
            loss: parts[4].parse().map_err(|_| bad(line))?,
        });
    }
    Ok(rows)
}

fn bad(line: &str) -> Error {
    Error::Data(format!("malformed log line: {line}"))
}

/// Mean loss per epoch for one stage, in epoch order.
pub fn epoch_means(rows: &[LogRow], stage: u8) -> Vec<(usize, f64)> {
    let mut acc: Vec<(usize, f64, usize)> = Vec::new();
    for r in rows.iter().filter(|r| r.stage == stage) {
        match acc.last_mut() {
            Some((e, sum, n)) if *e == r.epoch => {
                *sum += r.loss;
                *n += 1;
            }
            _ => acc.push((r.epoch, r.loss, 1)),
        }
    }
    acc.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}
