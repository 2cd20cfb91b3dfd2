//! Line-delimited JSON metrics: one object per round, appended as the run goes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::server::{ModeAccuracy, RoundLog};

/// One line of `metrics.jsonl`. Deliberately free of wall-clock data so equal
/// configurations produce byte-identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub accuracy: ModeAccuracy,
    pub loss: LossBreakdown,
    pub gamma: Vec<f64>,
    pub sampled: Vec<usize>,
    pub learning_rate: f64,
}

impl From<&RoundLog> for MetricsRecord {
    fn from(log: &RoundLog) -> Self {
        Self {
            round: log.round,
            accuracy: log.accuracy,
            loss: log.mean_loss,
            gamma: log.gamma.clone(),
            sampled: log.sampled.clone(),
            learning_rate: log.learning_rate,
        }
    }
}

/// One line of `timing.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub round: usize,
    pub elapsed_seconds: f64,
    pub round_seconds: f64,
}

/// Appends one JSON object per line and flushes after each, so a crashed run
/// keeps every completed round.
pub struct JsonlWriter {
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self { out: BufWriter::new(File::create(path)?) })
    }

    pub fn append<S: Serialize>(&mut self, item: &S) -> Result<()> {
        serde_json::to_writer(&mut self.out, item)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Reads `metrics.jsonl`; a malformed line is reported with its 1-based number.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord =
            serde_json::from_str(&line).map_err(|e| Error::Metrics { line: i + 1, reason: e.to_string() })?;
        if let Some(prev) = out.last().map(|r: &MetricsRecord| r.round) {
            if rec.round <= prev {
                return Err(Error::Metrics { line: i + 1, reason: format!("round {} does not follow round {prev}", rec.round) });
            }
        }
        out.push(rec);
    }
    Ok(out)
}
