//! Device-memory accounting over simulated time.
//!
//! Tracks the running device-resident byte total per category and the
//! per-category and overall peaks. Every change is appended to a trace
//! so a run can export `(time_ms, category, device_bytes)` rows.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MemCategory {
    Params,
    Grads,
    Activations,
    Optimizer,
}

impl MemCategory {
    pub const ALL: [MemCategory; 4] = [
        MemCategory::Params,
        MemCategory::Grads,
        MemCategory::Activations,
        MemCategory::Optimizer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MemCategory::Params => "params",
            MemCategory::Grads => "grads",
            MemCategory::Activations => "activations",
            MemCategory::Optimizer => "optimizer",
        }
    }

    fn index(self) -> usize {
        match self {
            MemCategory::Params => 0,
            MemCategory::Grads => 1,
            MemCategory::Activations => 2,
            MemCategory::Optimizer => 3,
        }
    }
}

/// One point in the device-memory trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemSample {
    pub time_ms: f64,
    pub category: MemCategory,
    pub device_bytes: u64,
}

/// Per-category peak device bytes plus the overall instantaneous peak.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PeakReport {
    pub params: u64,
    pub grads: u64,
    pub activations: u64,
    pub optimizer: u64,
    pub total: u64,
}

#[derive(Debug, Clone)]
pub struct MemoryAccountant {
    current: [u64; 4],
    peak: [u64; 4],
    peak_total: u64,
    trace: Vec<MemSample>,
}

impl Default for MemoryAccountant {
    fn default() -> Self {
        Self::new()
    }
}

impl MemoryAccountant {
    pub fn new() -> Self {
        MemoryAccountant {
            current: [0; 4],
            peak: [0; 4],
            peak_total: 0,
            trace: Vec::new(),
        }
    }

    pub fn alloc(&mut self, time_ms: f64, category: MemCategory, bytes: u64) {
        let i = category.index();
        self.current[i] += bytes;
        if self.current[i] > self.peak[i] {
            self.peak[i] = self.current[i];
        }
        let total: u64 = self.current.iter().sum();
        if total > self.peak_total {
            self.peak_total = total;
        }
        self.trace.push(MemSample {
            time_ms,
            category,
            device_bytes: self.current[i],
        });
    }

    pub fn free(&mut self, time_ms: f64, category: MemCategory, bytes: u64) -> Result<()> {
        let i = category.index();
        if bytes > self.current[i] {
            return Err(CoreError::Accounting(format!(
                "freeing {bytes} bytes of {} but only {} allocated",
                category.name(),
                self.current[i]
            )));
        }
        self.current[i] -= bytes;
        self.trace.push(MemSample {
            time_ms,
            category,
            device_bytes: self.current[i],
        });
        Ok(())
    }

    pub fn current(&self, category: MemCategory) -> u64 {
        self.current[category.index()]
    }

    pub fn peak(&self, category: MemCategory) -> u64 {
        self.peak[category.index()]
    }

    pub fn peak_report(&self) -> PeakReport {
        PeakReport {
            params: self.peak(MemCategory::Params),
            grads: self.peak(MemCategory::Grads),
            activations: self.peak(MemCategory::Activations),
            optimizer: self.peak(MemCategory::Optimizer),
            total: self.peak_total,
        }
    }

    pub fn trace(&self) -> &[MemSample] {
        &self.trace
    }

    /// Drops trace samples while keeping peaks and current totals, so
    /// long runs can cap their trace memory after flushing to disk.
    pub fn drain_trace(&mut self) -> Vec<MemSample> {
        core::mem::take(&mut self.trace)
    }
}
