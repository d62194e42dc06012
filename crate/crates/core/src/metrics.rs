//! Append-only JSONL metrics stream: scalar records `{step, phase, key,
//! value}` plus per-episode records carrying return, success, and the
//! skill-usage histogram.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ChoreoError, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum MetricRecord {
    Scalar {
        step: u64,
        phase: String,
        key: String,
        value: f64,
    },
    Episode {
        step: u64,
        phase: String,
        #[serde(rename = "return")]
        ep_return: f64,
        success: bool,
        skill_histogram: Vec<usize>,
    },
}

/// Writer that only ever appends; re-opening an existing stream continues
/// it, which is what crash-resume relies on.
pub struct MetricsWriter {
    out: BufWriter<std::fs::File>,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(MetricsWriter {
            out: BufWriter::new(file),
        })
    }

    pub fn scalar(&mut self, step: u64, phase: &str, key: &str, value: f64) -> Result<()> {
        self.write(&MetricRecord::Scalar {
            step,
            phase: phase.to_string(),
            key: key.to_string(),
            value,
        })
    }

    pub fn episode(
        &mut self,
        step: u64,
        phase: &str,
        ep_return: f64,
        success: bool,
        skill_histogram: Vec<usize>,
    ) -> Result<()> {
        self.write(&MetricRecord::Episode {
            step,
            phase: phase.to_string(),
            ep_return,
            success,
            skill_histogram,
        })
    }

    fn write(&mut self, record: &MetricRecord) -> Result<()> {
        writeln!(self.out, "{}", serde_json::to_string(record).unwrap())?;
        self.out.flush()?;
        Ok(())
    }
}

/// Reads a metrics stream back; used by resume checks and reports.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| ChoreoError::Parse {
            record: i,
            field: "metric".to_string(),
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
