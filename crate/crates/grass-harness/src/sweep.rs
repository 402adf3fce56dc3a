//! Grid sweeps over the scheduler hyperparameters and the seed.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::metrics::CsvWriter;
use crate::runner::run;

/// Sweep axes; an empty axis keeps the base config's value.
#[derive(Debug, Clone, Default)]
pub struct SweepGrid {
    pub sample_period: Vec<u64>,
    pub active_layers: Vec<usize>,
    pub probe_steps: Vec<u64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub sample_period: u64,
    pub active_layers: usize,
    pub probe_steps: u64,
    pub seed: u64,
    pub outcome: std::result::Result<SweepStats, String>,
}

#[derive(Debug, Clone, Copy)]
pub struct SweepStats {
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub mean_sim_step_ms: f64,
    pub sim_total_ms: f64,
}

fn axis<T: Copy>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Runs one configuration per grid point. Failures are recorded in their
/// row and the sweep continues.
pub fn sweep(base: &RunConfig, grid: &SweepGrid) -> Result<Vec<SweepRow>> {
    base.validate()?;
    let periods = axis(&grid.sample_period, base.grass.sample_period);
    let gammas = axis(&grid.active_layers, base.grass.active_layers);
    let probes = axis(&grid.probe_steps, base.grass.probe_steps);
    let seeds = axis(&grid.seeds, base.seed);

    let root = base.resolved_output_dir();
    let mut rows = Vec::new();
    for &ts in &periods {
        for &gamma in &gammas {
            for &tp in &probes {
                for &seed in &seeds {
                    let mut cfg = base.clone();
                    cfg.grass.sample_period = ts;
                    // Keep the refresh interval locked to the sampling
                    // period unless the base config decouples them.
                    if base.grass.prob_update_period == base.grass.sample_period {
                        cfg.grass.prob_update_period = ts;
                    }
                    cfg.grass.active_layers = gamma;
                    cfg.grass.probe_steps = tp;
                    cfg.seed = seed;
                    cfg.output_dir =
                        root.join(format!("ts{ts}_g{gamma}_tp{tp}_seed{seed}"));
                    let outcome = match run(&cfg) {
                        Ok(out) => Ok(SweepStats {
                            final_train_loss: out.final_train_loss,
                            final_val_loss: out.final_val_loss,
                            mean_sim_step_ms: out.sim_total_ms / cfg.total_steps as f64,
                            sim_total_ms: out.sim_total_ms,
                        }),
                        Err(e) => Err(e.to_string()),
                    };
                    rows.push(SweepRow {
                        sample_period: ts,
                        active_layers: gamma,
                        probe_steps: tp,
                        seed,
                        outcome,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Writes the aggregated sweep table.
pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| HarnessError::io(parent.display().to_string(), e))?;
    }
    let mut csv = CsvWriter::create(
        path,
        "sample_period,active_layers,probe_steps,seed,status,final_train_loss,final_val_loss,mean_sim_step_ms,sim_total_ms,error",
    )?;
    for row in rows {
        match &row.outcome {
            Ok(s) => csv.row(&format!(
                "{},{},{},{},ok,{},{},{},{},",
                row.sample_period,
                row.active_layers,
                row.probe_steps,
                row.seed,
                s.final_train_loss,
                s.final_val_loss,
                s.mean_sim_step_ms,
                s.sim_total_ms
            ))?,
            Err(msg) => csv.row(&format!(
                "{},{},{},{},failed,,,,,\"{}\"",
                row.sample_period,
                row.active_layers,
                row.probe_steps,
                row.seed,
                msg.replace('"', "'")
            ))?,
        }
    }
    csv.flush()
}
