//! Command-line driver.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use grass_harness::config::RunConfig;
use grass_harness::dataset::BatchStream;
use grass_harness::error::{HarnessError, Result};
use grass_harness::metrics::JsonlWriter;
use grass_harness::sweep::{sweep, write_sweep_csv, SweepGrid};
use grass_harness::Method;

#[derive(Parser)]
#[command(
    name = "grass",
    about = "Gradient-based adaptive layer-wise importance sampling trainer",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flag overrides applied on top of the JSON config.
#[derive(Args, Debug, Clone)]
struct Overrides {
    /// Probing steps before adaptive sampling starts.
    #[arg(long)]
    probe_steps: Option<u64>,
    /// Steps between layer resamplings.
    #[arg(long)]
    sample_period: Option<u64>,
    /// Number of layers trained per sampling period.
    #[arg(long)]
    active_layers: Option<usize>,
    #[command(flatten)]
    common: CommonOverrides,
}

/// Overrides that never collide with sweep axes.
#[derive(Args, Debug, Clone)]
struct CommonOverrides {
    /// Softmax temperature over layer importance.
    #[arg(long)]
    temperature: Option<f64>,
    /// EMA weight on newly observed importance.
    #[arg(long)]
    ema_alpha: Option<f64>,
    /// Training method: fft | uniform_static | grass_static | grass.
    #[arg(long)]
    method: Option<String>,
    /// Random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Total training steps.
    #[arg(long)]
    total_steps: Option<u64>,
    /// Offload mode: pinned | vanilla | overlapped.
    #[arg(long)]
    offload: Option<String>,
    /// Output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(v) = self.probe_steps {
            cfg.grass.probe_steps = v;
        }
        if let Some(v) = self.sample_period {
            // Keep the refresh interval locked to the sampling period
            // when the config does not decouple them.
            if cfg.grass.prob_update_period == cfg.grass.sample_period {
                cfg.grass.prob_update_period = v;
            }
            cfg.grass.sample_period = v;
        }
        if let Some(v) = self.active_layers {
            cfg.grass.active_layers = v;
        }
        self.common.apply(cfg)
    }
}

impl CommonOverrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(v) = self.temperature {
            cfg.grass.temperature = v;
        }
        if let Some(v) = self.ema_alpha {
            cfg.grass.ema_alpha = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.total_steps {
            cfg.total_steps = v;
        }
        if let Some(m) = &self.method {
            cfg.method = match m.as_str() {
                "fft" => Method::Fft,
                "uniform_static" => Method::UniformStatic,
                "grass_static" => Method::GrassStatic,
                "grass" => Method::Grass,
                other => {
                    return Err(HarnessError::config(format!(
                        "method: unknown value {other}"
                    )))
                }
            };
        }
        if let Some(o) = &self.offload {
            cfg.offload = match o.as_str() {
                "pinned" => grass_core::offload::OffloadMode::Pinned,
                "vanilla" => grass_core::offload::OffloadMode::Vanilla,
                "overlapped" => grass_core::offload::OffloadMode::Overlapped,
                other => {
                    return Err(HarnessError::config(format!(
                        "offload: unknown value {other}"
                    )))
                }
            };
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        Ok(())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its artifacts.
    Run {
        /// Path to the JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run a grid over scheduler hyperparameters and seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated sampling periods.
        #[arg(long, value_delimiter = ',')]
        sample_period: Vec<u64>,
        /// Comma-separated active-layer counts.
        #[arg(long, value_delimiter = ',')]
        active_layers: Vec<usize>,
        /// Comma-separated probing lengths.
        #[arg(long, value_delimiter = ',')]
        probe_steps: Vec<u64>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[command(flatten)]
        overrides: CommonOverrides,
    },
    /// Summarize a finished run's artifact directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Materialize deterministic batches from a dataset spec.
    GenDataset {
        #[arg(long)]
        config: PathBuf,
        /// Number of batches to emit.
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Output JSONL path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(serde::Serialize)]
struct BatchRecord {
    inputs: Vec<u32>,
    targets: Vec<i64>,
    batch: usize,
    seq: usize,
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn dispatch() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, overrides } => {
            let mut cfg = RunConfig::load(&config)?;
            overrides.apply(&mut cfg)?;
            let outcome = grass_harness::run(&cfg)?;
            println!(
                "run complete: method={} steps={} final_train_loss={:.6} final_val_loss={:.6}",
                cfg.method.name(),
                cfg.total_steps,
                outcome.final_train_loss,
                outcome.final_val_loss
            );
            println!("artifacts: {}", outcome.output_dir.display());
            Ok(())
        }
        Command::Sweep {
            config,
            sample_period,
            active_layers,
            probe_steps,
            seeds,
            overrides,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            overrides.apply(&mut cfg)?;
            let grid = SweepGrid {
                sample_period,
                active_layers,
                probe_steps,
                seeds,
            };
            let rows = sweep(&cfg, &grid)?;
            let csv_path = cfg.resolved_output_dir().join("sweep.csv");
            write_sweep_csv(&rows, &csv_path)?;
            let failures = rows.iter().filter(|r| r.outcome.is_err()).count();
            println!(
                "sweep complete: {} runs, {failures} failed, table at {}",
                rows.len(),
                csv_path.display()
            );
            Ok(())
        }
        Command::Report { dir } => {
            let rep = grass_harness::report::report(&dir)?;
            print!("{}", rep.text);
            Ok(())
        }
        Command::GenDataset {
            config,
            count,
            out,
            overrides,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            overrides.apply(&mut cfg)?;
            cfg.validate()?;
            let mut stream = BatchStream::new(
                &cfg.dataset,
                &cfg.model,
                cfg.batch_size,
                cfg.seq_len,
                grass_core::rng::Rng::stream(cfg.seed, 1),
            )?;
            let mut writer = JsonlWriter::create(&out)?;
            for _ in 0..count {
                let b = stream.next_batch();
                writer.append(&BatchRecord {
                    inputs: b.inputs,
                    targets: b.targets,
                    batch: b.batch,
                    seq: b.seq,
                })?;
            }
            println!("wrote {count} batches to {}", out.display());
            Ok(())
        }
    }
}
