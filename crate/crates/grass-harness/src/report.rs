//! Post-run summarization of a run's artifact directory.

use std::fmt::Write as FmtWrite;
use std::path::Path;

use crate::error::{HarnessError, Result};
use crate::metrics::{read_jsonl, CsvWriter, MetricsRecord, ProbTraceRecord, RunSummary};

#[derive(Debug, Clone)]
pub struct Report {
    pub summary: RunSummary,
    pub overlap_speedup: f64,
    /// (step, policy entropy in nats) per probability update.
    pub entropy_trajectory: Vec<(u64, f64)>,
    pub text: String,
}

fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Builds the per-run summary: final losses, per-category memory peaks,
/// the overlap speedup ratio, and the probability-entropy trajectory.
/// Writes `report.txt` and `entropy.csv` next to the inputs.
pub fn report(dir: &Path) -> Result<Report> {
    let summary_path = dir.join("run_summary.json");
    let summary_text = std::fs::read_to_string(&summary_path)
        .map_err(|e| HarnessError::io(summary_path.display().to_string(), e))?;
    let summary: RunSummary = serde_json::from_str(&summary_text)
        .map_err(|e| HarnessError::Report(format!("{}: {e}", summary_path.display())))?;

    let metrics: Vec<MetricsRecord> = read_jsonl(&dir.join("metrics.jsonl"))?;
    if metrics.is_empty() {
        return Err(HarnessError::Report("metrics.jsonl is empty".into()));
    }
    let update_steps: Vec<&MetricsRecord> =
        metrics.iter().filter(|r| !r.sampled_layers.is_empty()).collect();
    let (sim_sum, vanilla_sum) = update_steps.iter().fold((0.0, 0.0), |(a, b), r| {
        (a + r.sim_step_ms, b + r.sim_vanilla_step_ms)
    });
    let overlap_speedup = if sim_sum > 0.0 { vanilla_sum / sim_sum } else { 1.0 };

    let prob_trace_path = dir.join("prob_trace.jsonl");
    let entropy_trajectory: Vec<(u64, f64)> = if prob_trace_path.exists() {
        read_jsonl::<ProbTraceRecord>(&prob_trace_path)?
            .iter()
            .map(|r| (r.step, entropy(&r.probs)))
            .collect()
    } else {
        Vec::new()
    };

    let mut entropy_csv = CsvWriter::create(&dir.join("entropy.csv"), "step,entropy_nats")?;
    for (step, h) in &entropy_trajectory {
        entropy_csv.row(&format!("{step},{h}"))?;
    }
    entropy_csv.flush()?;

    let peaks = &summary.device_peak_bytes;
    let mut text = String::new();
    let _ = writeln!(text, "method: {}", summary.method);
    let _ = writeln!(text, "steps: {}", summary.steps);
    let _ = writeln!(text, "final train loss: {:.6}", summary.final_train_loss);
    let _ = writeln!(text, "final val loss:   {:.6}", summary.final_val_loss);
    let _ = writeln!(
        text,
        "simulated time: {:.1} ms ({:.1} ms serialized, overlap speedup {:.3}x)",
        summary.sim_total_ms, summary.sim_vanilla_total_ms, overlap_speedup
    );
    let _ = writeln!(text, "wall time: {:.1} ms", summary.wall_ms);
    let _ = writeln!(text, "device peaks (bytes):");
    let _ = writeln!(text, "  params:      {}", peaks.params);
    let _ = writeln!(text, "  grads:       {}", peaks.grads);
    let _ = writeln!(text, "  activations: {}", peaks.activations);
    let _ = writeln!(text, "  optimizer:   {}", peaks.optimizer);
    let _ = writeln!(text, "  total:       {}", peaks.total);
    if let (Some(first), Some(last)) = (entropy_trajectory.first(), entropy_trajectory.last()) {
        let _ = writeln!(
            text,
            "policy entropy: {:.4} nats at step {} -> {:.4} nats at step {}",
            first.1, first.0, last.1, last.0
        );
    }
    let report_path = dir.join("report.txt");
    std::fs::write(&report_path, &text)
        .map_err(|e| HarnessError::io(report_path.display().to_string(), e))?;

    Ok(Report {
        summary,
        overlap_speedup,
        entropy_trajectory,
        text,
    })
}
