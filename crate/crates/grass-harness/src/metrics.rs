//! Run artifacts: metrics JSONL, probability-trace JSONL, timeline CSV,
//! and memory-trace CSV.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use grass_core::memory::{MemSample, PeakReport};
use grass_core::offload::OverlapTimeline;

use crate::error::{HarnessError, Result};

/// One row of metrics.jsonl. Wall-clock time deliberately stays out of
/// this file so identical configs produce bit-identical artifacts; wall
/// time lives in the run summary instead.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    pub sampled_layers: Vec<usize>,
    pub probs: Vec<f64>,
    pub sim_step_ms: f64,
    /// What the same step would have cost with fully serialized
    /// offloading; the ratio against `sim_step_ms` is the overlap gain.
    pub sim_vanilla_step_ms: f64,
    pub device_peak_bytes: PeakReport,
}

/// One row of prob_trace.jsonl, emitted at every probability update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbTraceRecord {
    pub step: u64,
    pub mgn: Vec<f64>,
    pub probs: Vec<f64>,
    pub sampled: Vec<usize>,
}

/// End-of-run summary (the one artifact allowed to carry wall time).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub steps: u64,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub sim_total_ms: f64,
    pub sim_vanilla_total_ms: f64,
    pub wall_ms: f64,
    pub device_peak_bytes: PeakReport,
}

pub struct JsonlWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file =
            File::create(path).map_err(|e| HarnessError::io(path.display().to_string(), e))?;
        Ok(JsonlWriter {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let mut line = serde_json::to_string(record)
            .map_err(|e| HarnessError::Report(format!("serialize record: {e}")))?;
        line.push('\n');
        self.out
            .write_all(line.as_bytes())
            .and_then(|_| self.out.flush())
            .map_err(|e| HarnessError::io(self.path.display().to_string(), e))
    }
}

pub struct CsvWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &str) -> Result<Self> {
        let file =
            File::create(path).map_err(|e| HarnessError::io(path.display().to_string(), e))?;
        let mut w = CsvWriter {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        };
        w.row(header)?;
        Ok(w)
    }

    pub fn row(&mut self, line: &str) -> Result<()> {
        self.out
            .write_all(line.as_bytes())
            .and_then(|_| self.out.write_all(b"\n"))
            .map_err(|e| HarnessError::io(self.path.display().to_string(), e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out
            .flush()
            .map_err(|e| HarnessError::io(self.path.display().to_string(), e))
    }
}

/// Appends a phase's events to the timeline CSV
/// (`lane,kind,layer,start_ms,end_ms`).
pub fn write_timeline_rows(csv: &mut CsvWriter, timeline: &OverlapTimeline) -> Result<()> {
    for t in &timeline.transfers {
        csv.row(&format!(
            "transfer,{},{},{},{}",
            t.kind.name(),
            t.layer.0,
            t.start_ms,
            t.end_ms
        ))?;
    }
    for u in &timeline.updates {
        csv.row(&format!(
            "compute,update,{},{},{}",
            u.layer.0, u.start_ms, u.end_ms
        ))?;
    }
    Ok(())
}

/// Appends memory-trace samples (`time_ms,category,device_bytes`).
pub fn write_memory_rows(csv: &mut CsvWriter, samples: &[MemSample]) -> Result<()> {
    for s in samples {
        csv.row(&format!(
            "{},{},{}",
            s.time_ms,
            s.category.name(),
            s.device_bytes
        ))?;
    }
    Ok(())
}

/// Reads a JSONL file back into records.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| HarnessError::io(path.display().to_string(), e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| HarnessError::Report(format!("{}: {e}", path.display())))
        })
        .collect()
}
