//! Run configuration: one JSON document, with CLI flags layered on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use grass_core::model::ModelConfig;
use grass_core::offload::{OffloadMode, TierModel};
use grass_core::optimizer::OptimizerConfig;
use grass_core::scheduler::GrassConfig;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fft,
    UniformStatic,
    GrassStatic,
    Grass,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fft => "fft",
            Method::UniformStatic => "uniform_static",
            Method::GrassStatic => "grass_static",
            Method::Grass => "grass",
        }
    }

    pub fn uses_scheduler(self) -> bool {
        !matches!(self, Method::Fft)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Byte-level language modeling over a text file.
    CharCorpus { path: PathBuf },
    /// Synthetic task whose label signal can only be routed to the
    /// output through the given block's attention depth, so that block
    /// dominates the gradient signal.
    PlantedImportance {
        layer: usize,
        /// Fraction of answer tokens that actually carry the marker's
        /// value; the rest are label noise.
        signal: f64,
    },
    /// Deterministic cyclic token stream.
    Repetition { vocab: usize, period: usize },
}

/// Simulated-time cost of everything outside the optimizer phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepCostModel {
    /// Forward+backward compute per step, milliseconds.
    pub fwd_bwd_ms: f64,
}

impl Default for StepCostModel {
    fn default() -> Self {
        StepCostModel { fwd_bwd_ms: 100.0 }
    }
}

fn default_eval_interval() -> u64 {
    10
}

fn default_eval_batches() -> usize {
    4
}

fn default_true() -> bool {
    true
}

fn default_precision() -> Precision {
    Precision::F64
}

fn default_offload() -> OffloadMode {
    OffloadMode::Overlapped
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub grass: GrassConfig,
    pub method: Method,
    pub dataset: DatasetSpec,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    #[serde(default = "default_offload")]
    pub offload: OffloadMode,
    #[serde(default)]
    pub tier: TierModel,
    #[serde(default)]
    pub step_cost: StepCostModel,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
    /// Keep embedding and output head trainable in every sampling
    /// period. Off excludes them from training entirely, which also
    /// removes their optimizer shards.
    #[serde(default = "default_true")]
    pub always_train_embed_head: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| HarnessError::io(path.display().to_string(), e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| HarnessError::config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.method.uses_scheduler() {
            self.grass.validate(self.model.n_layers)?;
        }
        self.tier.validate()?;
        if self.total_steps == 0 {
            return Err(HarnessError::config("total_steps: must be positive"));
        }
        if self.batch_size == 0 {
            return Err(HarnessError::config("batch_size: must be positive"));
        }
        if self.seq_len < 2 {
            return Err(HarnessError::config(
                "seq_len: must be at least 2 for next-token targets",
            ));
        }
        if self.seq_len > self.model.max_seq_len {
            return Err(HarnessError::config(format!(
                "seq_len: {} exceeds model.max_seq_len {}",
                self.seq_len, self.model.max_seq_len
            )));
        }
        if !(self.step_cost.fwd_bwd_ms >= 0.0) {
            return Err(HarnessError::config("step_cost.fwd_bwd_ms: must be non-negative"));
        }
        match &self.dataset {
            DatasetSpec::PlantedImportance { layer, signal } => {
                if *layer >= self.model.n_layers {
                    return Err(HarnessError::config(format!(
                        "dataset.layer: planted layer {layer} outside model with {} layers",
                        self.model.n_layers
                    )));
                }
                if self.model.attn_window.is_none() {
                    return Err(HarnessError::config(
                        "dataset.kind: planted_importance requires model.attn_window so the marker distance exceeds a single layer's span",
                    ));
                }
                if !(0.0..=1.0).contains(signal) {
                    return Err(HarnessError::config("dataset.signal: must be in [0, 1]"));
                }
            }
            DatasetSpec::Repetition { vocab, period } => {
                if *period == 0 || *vocab == 0 {
                    return Err(HarnessError::config("dataset: vocab and period must be positive"));
                }
                if period > vocab {
                    return Err(HarnessError::config(
                        "dataset.period: must not exceed dataset.vocab",
                    ));
                }
                if *vocab > self.model.vocab_size {
                    return Err(HarnessError::config(format!(
                        "dataset.vocab: {vocab} exceeds model.vocab_size {}",
                        self.model.vocab_size
                    )));
                }
            }
            DatasetSpec::CharCorpus { .. } => {}
        }
        Ok(())
    }

    /// Output directory with the `GRASS_OUTPUT_ROOT` override applied to
    /// relative paths.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os("GRASS_OUTPUT_ROOT") {
            Some(root) if self.output_dir.is_relative() => {
                PathBuf::from(root).join(&self.output_dir)
            }
            _ => self.output_dir.clone(),
        }
    }
}
