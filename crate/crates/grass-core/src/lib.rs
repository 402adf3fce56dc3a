//! Core engine for gradient-based adaptive layer-wise importance sampling.
//!
//! Everything in this crate is deterministic, single-threaded compute:
//! a minimal dense-tensor autodiff tape, a tiny decoder-only transformer,
//! a per-layer-sharded AdamW optimizer, the adaptive sampling scheduler,
//! and a virtual-clock model of two-tier optimizer-state offloading.
//! IO, threads, and file formats live in the companion harness crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod element;
pub mod error;
pub mod gradcheck;
pub mod memory;
pub mod model;
pub mod offload;
pub mod optimizer;
pub mod rng;
pub mod scheduler;
pub mod tape;
pub mod tensor;

pub use element::Element;
pub use error::CoreError;
pub use model::{FreezeMask, LayerGrads, LayerId, ModelConfig, TinyTransformer, UnitId};
pub use offload::{OffloadMode, OverlapTimeline, TierModel, TransferEvent};
pub use optimizer::{OptimizerConfig, OptimizerShard, Residency};
pub use rng::Rng;
pub use scheduler::{GrassConfig, GrassScheduler, MgnTracker, SamplingPolicy, ScheduleDecision};
pub use tape::{Gradients, Tape, ValueId};
pub use tensor::Tensor;

/// Convenience alias used throughout the crate.
pub type Result<T> = core::result::Result<T, CoreError>;
