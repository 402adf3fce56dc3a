//! Planning of layer-wise optimizer-state movement over a simulated
//! two-tier memory.
//!
//! The device holds at most a couple of shard buffers; everything else
//! lives on the host. A single FIFO transfer channel carries shards in
//! both directions while per-layer updates run on the compute lane.
//! Vanilla mode fully serializes fetch, update, and write-back per
//! layer. Overlapped mode keeps two device buffers: the next layer's
//! fetch is issued ahead of time and each write-back queues behind the
//! prefetches, so interior transfers hide under update compute.
//!
//! The planner computes event times directly from the pipeline
//! recurrence; an independent discrete-event simulation in the test
//! suite replays the same policy through an event queue and must agree.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::model::LayerId;
use crate::Result;

/// Cost model of the simulated two-tier memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierModel {
    pub device_capacity: u64,
    /// `None` means unbounded host memory.
    pub host_capacity: Option<u64>,
    pub bandwidth_bytes_per_ms: f64,
    /// Fixed cost added to every transfer.
    pub transfer_latency_ms: f64,
    /// Update compute cost: `base + per_byte * shard_bytes` milliseconds.
    pub update_base_ms: f64,
    pub update_ms_per_byte: f64,
}

impl Default for TierModel {
    fn default() -> Self {
        TierModel {
            device_capacity: u64::MAX,
            host_capacity: None,
            bandwidth_bytes_per_ms: 1024.0 * 1024.0,
            transfer_latency_ms: 0.0,
            update_base_ms: 0.0,
            update_ms_per_byte: 2.0 / (1024.0 * 1024.0),
        }
    }
}

impl TierModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_bytes_per_ms > 0.0) {
            return Err(CoreError::Config {
                field: "bandwidth_bytes_per_ms",
                detail: "must be positive".into(),
            });
        }
        for (field, v) in [
            ("transfer_latency_ms", self.transfer_latency_ms),
            ("update_base_ms", self.update_base_ms),
            ("update_ms_per_byte", self.update_ms_per_byte),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(CoreError::Config {
                    field,
                    detail: format!("{v} must be a non-negative finite number"),
                });
            }
        }
        Ok(())
    }

    pub fn transfer_ms(&self, bytes: u64) -> f64 {
        self.transfer_latency_ms + bytes as f64 / self.bandwidth_bytes_per_ms
    }

    pub fn update_ms(&self, bytes: u64) -> f64 {
        self.update_base_ms + self.update_ms_per_byte * bytes as f64
    }
}

/// Residency strategy for the sampled layers' optimizer shards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffloadMode {
    /// No per-step movement: every active shard is device-pinned for the
    /// whole sampling period, so device usage grows with the number of
    /// active layers.
    Pinned,
    /// Per-step fetch/update/write-back, fully serialized, one buffer.
    Vanilla,
    /// Per-step movement with one-ahead prefetch and deferred
    /// write-back, two buffers.
    Overlapped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransferKind {
    HtoD,
    DtoH,
}

impl TransferKind {
    pub fn name(self) -> &'static str {
        match self {
            TransferKind::HtoD => "htod",
            TransferKind::DtoH => "dtoh",
        }
    }
}

/// One shard movement on the transfer channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferEvent {
    pub kind: TransferKind,
    pub layer: LayerId,
    pub bytes: u64,
    pub issue_ms: f64,
    pub start_ms: f64,
    pub end_ms: f64,
}

/// One per-layer update on the compute lane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateEvent {
    pub layer: LayerId,
    pub start_ms: f64,
    pub end_ms: f64,
}

/// The planned optimizer phase of one step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OverlapTimeline {
    pub transfers: Vec<TransferEvent>,
    pub updates: Vec<UpdateEvent>,
    pub makespan_ms: f64,
}

impl OverlapTimeline {
    /// Checks the structural contracts: per layer the update sits inside
    /// its fetch/write-back bracket, the transfer channel is serialized,
    /// and compute intervals never overlap.
    pub fn check_invariants(&self) -> Result<()> {
        for u in &self.updates {
            let htod = self
                .transfers
                .iter()
                .find(|t| t.kind == TransferKind::HtoD && t.layer == u.layer);
            let dtoh = self
                .transfers
                .iter()
                .find(|t| t.kind == TransferKind::DtoH && t.layer == u.layer);
            if let Some(h) = htod {
                if u.start_ms < h.end_ms {
                    return Err(CoreError::Scheduling(format!(
                        "update of layer {} starts at {} before its fetch ends at {}",
                        u.layer.0, u.start_ms, h.end_ms
                    )));
                }
            }
            if let Some(d) = dtoh {
                if d.start_ms < u.end_ms {
                    return Err(CoreError::Scheduling(format!(
                        "write-back of layer {} starts at {} before its update ends at {}",
                        u.layer.0, d.start_ms, u.end_ms
                    )));
                }
            }
        }
        for pair in self.transfers.windows(2) {
            if pair[1].start_ms < pair[0].end_ms {
                return Err(CoreError::Scheduling(
                    "transfer channel events overlap".into(),
                ));
            }
            if pair[1].issue_ms < pair[0].issue_ms {
                return Err(CoreError::Scheduling(
                    "transfer channel is not FIFO in issue order".into(),
                ));
            }
            if pair[0].start_ms < pair[0].issue_ms {
                return Err(CoreError::Scheduling(
                    "transfer starts before it is issued".into(),
                ));
            }
        }
        for pair in self.updates.windows(2) {
            if pair[1].start_ms < pair[0].end_ms {
                return Err(CoreError::Scheduling(
                    "compute lane events overlap".into(),
                ));
            }
        }
        Ok(())
    }

    /// Peak bytes simultaneously device-resident, counting each shard
    /// from the end of its fetch to the start of its write-back (an
    /// in-flight shard belongs to the channel, not the device).
    pub fn peak_device_shard_bytes(&self) -> u64 {
        let mut deltas: Vec<(f64, i64)> = Vec::new();
        for t in &self.transfers {
            match t.kind {
                TransferKind::HtoD => deltas.push((t.end_ms, t.bytes as i64)),
                TransferKind::DtoH => deltas.push((t.start_ms, -(t.bytes as i64))),
            }
        }
        // Frees first on ties: a handoff at the same instant reuses the
        // buffer rather than doubling it.
        deltas.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut current = 0i64;
        let mut peak = 0i64;
        for (_, d) in deltas {
            current += d;
            peak = peak.max(current);
        }
        peak.max(0) as u64
    }
}

/// Plans the optimizer phase for the given active layers (ascending id
/// order, which is also the update order).
pub fn plan_schedule(
    active: &[(LayerId, u64)],
    mode: OffloadMode,
    tier: &TierModel,
) -> Result<OverlapTimeline> {
    tier.validate()?;
    let buffers = match mode {
        OffloadMode::Pinned => active.len().max(1) as u64,
        OffloadMode::Vanilla => 1,
        OffloadMode::Overlapped => 2,
    };
    if let Some(&(layer, bytes)) = active
        .iter()
        .max_by_key(|&&(_, bytes)| bytes)
    {
        let needed = bytes.saturating_mul(buffers.min(active.len() as u64));
        if needed > tier.device_capacity {
            return Err(CoreError::Capacity(format!(
                "shard of layer {} needs {needed} device bytes across {buffers} buffers, capacity is {}",
                layer.0, tier.device_capacity
            )));
        }
    }

    let mut timeline = OverlapTimeline::default();
    match mode {
        OffloadMode::Pinned => {
            // No per-step transfers; updates run back to back.
            let mut now = 0.0;
            for &(layer, bytes) in active {
                let end = now + tier.update_ms(bytes);
                timeline.updates.push(UpdateEvent {
                    layer,
                    start_ms: now,
                    end_ms: end,
                });
                now = end;
            }
            timeline.makespan_ms = now;
        }
        OffloadMode::Vanilla => {
            let mut now = 0.0;
            for &(layer, bytes) in active {
                let t = tier.transfer_ms(bytes);
                timeline.transfers.push(TransferEvent {
                    kind: TransferKind::HtoD,
                    layer,
                    bytes,
                    issue_ms: now,
                    start_ms: now,
                    end_ms: now + t,
                });
                now += t;
                let u = tier.update_ms(bytes);
                timeline.updates.push(UpdateEvent {
                    layer,
                    start_ms: now,
                    end_ms: now + u,
                });
                now += u;
                timeline.transfers.push(TransferEvent {
                    kind: TransferKind::DtoH,
                    layer,
                    bytes,
                    issue_ms: now,
                    start_ms: now,
                    end_ms: now + t,
                });
                now += t;
            }
            timeline.makespan_ms = now;
        }
        OffloadMode::Overlapped => {
            let n = active.len();
            let mut chan_free = 0.0f64;
            let mut htod_end = alloc::vec![0.0f64; n];
            let run_transfer = |timeline: &mut OverlapTimeline,
                                    chan_free: &mut f64,
                                    kind: TransferKind,
                                    idx: usize,
                                    issue: f64|
             -> f64 {
                let (layer, bytes) = active[idx];
                let start = chan_free.max(issue);
                let end = start + tier.transfer_ms(bytes);
                timeline.transfers.push(TransferEvent {
                    kind,
                    layer,
                    bytes,
                    issue_ms: issue,
                    start_ms: start,
                    end_ms: end,
                });
                *chan_free = end;
                end
            };
            // Fill both buffers up front.
            for idx in 0..n.min(2) {
                htod_end[idx] =
                    run_transfer(&mut timeline, &mut chan_free, TransferKind::HtoD, idx, 0.0);
            }
            let mut prev_update_end = 0.0f64;
            for idx in 0..n {
                let (layer, bytes) = active[idx];
                let start = prev_update_end.max(htod_end[idx]);
                let end = start + tier.update_ms(bytes);
                timeline.updates.push(UpdateEvent {
                    layer,
                    start_ms: start,
                    end_ms: end,
                });
                prev_update_end = end;
                // The next prefetch goes out before this layer's
                // write-back so the pipeline never starves; the
                // write-back queues behind it on the FIFO channel.
                if idx + 2 < n {
                    htod_end[idx + 2] = run_transfer(
                        &mut timeline,
                        &mut chan_free,
                        TransferKind::HtoD,
                        idx + 2,
                        end,
                    );
                }
                run_transfer(&mut timeline, &mut chan_free, TransferKind::DtoH, idx, end);
            }
            timeline.makespan_ms = chan_free.max(prev_update_end);
        }
    }
    Ok(timeline)
}
