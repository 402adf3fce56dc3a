//! Threaded execution of planned offload schedules.
//!
//! One training thread drives per-layer updates; one transfer-worker
//! thread owns the simulated interconnect. They exchange two FIFO
//! message queues: requests carry serialized shards with a virtual
//! issue time, completions carry the payload back with the transfer's
//! virtual start/end times. The contract is strict: a layer's update
//! runs only after its fetch completion has been received, and its
//! write-back is issued only after the update returns, so final
//! parameters cannot depend on worker timing.

use std::collections::BTreeMap;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::thread::JoinHandle;

use grass_core::element::Element;
use grass_core::model::{LayerGrads, LayerId, TinyTransformer, UnitId};
use grass_core::offload::{
    OffloadMode, OverlapTimeline, TierModel, TransferEvent, TransferKind, UpdateEvent,
};
use grass_core::optimizer::{
    apply_update, deserialize_shard, serialize_shard, OptimizerConfig, OptimizerShard, Residency,
};
use grass_core::rng::Rng;
use grass_core::CoreError;

use crate::error::{HarnessError, Result};

/// Randomized perturbation of simulated transfer durations, used to show
/// that results are independent of interconnect timing.
#[derive(Debug, Clone, Copy)]
pub struct JitterConfig {
    pub seed: u64,
    /// Each transfer duration is scaled by `1 + u * max_fraction`.
    pub max_fraction: f64,
}

#[derive(Debug, Default)]
pub struct WorkerOptions {
    pub jitter: Option<JitterConfig>,
    /// Test hook: flip a byte in the first host-to-device payload of
    /// this layer while it is in flight.
    pub corrupt_htod_of: Option<LayerId>,
}

struct TransferRequest {
    kind: TransferKind,
    layer: LayerId,
    /// Simulated bytes (moment payload), used for timing and accounting.
    bytes: u64,
    issue_ms: f64,
    payload: Vec<u8>,
}

struct TransferDone {
    kind: TransferKind,
    layer: LayerId,
    bytes: u64,
    issue_ms: f64,
    start_ms: f64,
    end_ms: f64,
    payload: Vec<u8>,
}

enum WorkerMessage {
    Transfer(TransferRequest),
    Shutdown,
}

/// The background thread servicing the transfer lane in FIFO order.
pub struct TransferWorker {
    tx: Sender<WorkerMessage>,
    rx: Receiver<TransferDone>,
    handle: Option<JoinHandle<()>>,
}

impl TransferWorker {
    pub fn spawn(tier: TierModel, options: WorkerOptions) -> Self {
        let (req_tx, req_rx) = channel::<WorkerMessage>();
        let (done_tx, done_rx) = channel::<TransferDone>();
        let handle = std::thread::spawn(move || {
            let mut clock = 0.0f64;
            let mut jitter_rng = options.jitter.map(|j| Rng::stream(j.seed, 0x6a69_7474_6572));
            let mut corrupt_pending = options.corrupt_htod_of;
            while let Ok(WorkerMessage::Transfer(mut req)) = req_rx.recv() {
                if let (Some(target), TransferKind::HtoD) = (corrupt_pending, req.kind) {
                    if target == req.layer {
                        let mid = req.payload.len() / 2;
                        req.payload[mid] ^= 0x40;
                        corrupt_pending = None;
                    }
                }
                let mut duration = tier.transfer_ms(req.bytes);
                if let Some(rng) = jitter_rng.as_mut() {
                    let j = options.jitter.unwrap();
                    duration *= 1.0 + rng.next_f64() * j.max_fraction;
                    // Shake up real thread interleaving as well.
                    let pause = rng.next_below(50);
                    std::thread::sleep(std::time::Duration::from_micros(pause));
                }
                let start = clock.max(req.issue_ms);
                let end = start + duration;
                clock = end;
                if done_tx
                    .send(TransferDone {
                        kind: req.kind,
                        layer: req.layer,
                        bytes: req.bytes,
                        issue_ms: req.issue_ms,
                        start_ms: start,
                        end_ms: end,
                        payload: req.payload,
                    })
                    .is_err()
                {
                    break;
                }
            }
        });
        TransferWorker {
            tx: req_tx,
            rx: done_rx,
            handle: Some(handle),
        }
    }

    fn send(&self, req: TransferRequest) -> Result<()> {
        self.tx
            .send(WorkerMessage::Transfer(req))
            .map_err(|_| HarnessError::Core(CoreError::Scheduling("transfer worker gone".into())))
    }

    fn recv(&self) -> Result<TransferDone> {
        self.rx
            .recv()
            .map_err(|_| HarnessError::Core(CoreError::Scheduling("transfer worker gone".into())))
    }
}

impl Drop for TransferWorker {
    fn drop(&mut self) {
        let _ = self.tx.send(WorkerMessage::Shutdown);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

/// Outcome of one executed optimizer phase.
#[derive(Debug)]
pub struct ExecutedPhase {
    /// Measured events, at absolute simulated times.
    pub timeline: OverlapTimeline,
    /// When the phase is fully drained (compute and transfers).
    pub end_ms: f64,
    /// Where the compute lane ended, for chaining later compute.
    pub compute_end_ms: f64,
}

/// Runs the update phase for the active block layers with host-resident
/// shards round-tripping through the worker. `mode` must be a moving
/// mode; pinned phases never reach the transfer lane.
#[allow(clippy::too_many_arguments)]
pub fn execute_offloaded_phase<E: Element>(
    worker: &TransferWorker,
    mode: OffloadMode,
    tier: &TierModel,
    phase_start_ms: f64,
    active: &[LayerId],
    shards: &mut BTreeMap<UnitId, OptimizerShard<E>>,
    grads: &BTreeMap<UnitId, LayerGrads<E>>,
    model: &mut TinyTransformer<E>,
    opt_cfg: &OptimizerConfig,
) -> Result<ExecutedPhase> {
    let mut timeline = OverlapTimeline::default();
    let mut compute_clock = phase_start_ms;
    let mut transfer_end = phase_start_ms;
    let mut outstanding_dtoh = 0usize;

    let shard_bytes = |shards: &BTreeMap<UnitId, OptimizerShard<E>>, layer: LayerId| -> u64 {
        shards
            .get(&UnitId::Block(layer))
            .map(|s| s.payload_bytes())
            .unwrap_or(0)
    };
    let send_htod = |worker: &TransferWorker,
                     shards: &mut BTreeMap<UnitId, OptimizerShard<E>>,
                     layer: LayerId,
                     issue: f64|
     -> Result<()> {
        let unit = UnitId::Block(layer);
        let shard = shards
            .get_mut(&unit)
            .ok_or_else(|| CoreError::Scheduling(format!("no shard for {}", unit.key())))?;
        if shard.residency != Residency::Host {
            return Err(CoreError::Scheduling(format!(
                "fetch of {} while {:?}",
                unit.key(),
                shard.residency
            ))
            .into());
        }
        let payload = serialize_shard(shard);
        let bytes = shard.payload_bytes();
        shard.residency = Residency::InFlight;
        worker.send(TransferRequest {
            kind: TransferKind::HtoD,
            layer,
            bytes,
            issue_ms: issue,
            payload,
        })
    };

    // Prefetch depth: two buffers when overlapping, one when vanilla.
    let prefetch = match mode {
        OffloadMode::Overlapped => 2,
        OffloadMode::Vanilla => 1,
        OffloadMode::Pinned => {
            return Err(CoreError::Scheduling(
                "pinned phases do not use the transfer worker".into(),
            )
            .into())
        }
    };
    for &layer in active.iter().take(prefetch) {
        send_htod(worker, shards, layer, phase_start_ms)?;
    }

    for (idx, &layer) in active.iter().enumerate() {
        let unit = UnitId::Block(layer);
        // Wait for this layer's shard; write-back completions of earlier
        // layers may arrive first and are folded back into the store.
        let arrival = loop {
            let done = worker.recv()?;
            timeline.transfers.push(TransferEvent {
                kind: done.kind,
                layer: done.layer,
                bytes: done.bytes,
                issue_ms: done.issue_ms,
                start_ms: done.start_ms,
                end_ms: done.end_ms,
            });
            transfer_end = transfer_end.max(done.end_ms);
            match done.kind {
                TransferKind::HtoD => {
                    if done.layer != layer {
                        return Err(CoreError::Scheduling(format!(
                            "fetch completion for layer {} while waiting on {}",
                            done.layer.0, layer.0
                        ))
                        .into());
                    }
                    let mut shard = deserialize_shard::<E>(&done.payload)?;
                    shard.residency = Residency::Device;
                    shards.insert(unit, shard);
                    break done.end_ms;
                }
                TransferKind::DtoH => {
                    let mut shard = deserialize_shard::<E>(&done.payload)?;
                    shard.residency = Residency::Host;
                    shards.insert(UnitId::Block(done.layer), shard);
                    outstanding_dtoh -= 1;
                }
            }
        };

        let layer_grads = grads
            .get(&unit)
            .ok_or_else(|| CoreError::Scheduling(format!("no gradients for {}", unit.key())))?;
        let shard = shards.get_mut(&unit).expect("shard arrived above");
        let update_start = compute_clock.max(arrival);
        apply_update(shard, model, layer_grads, opt_cfg)?;
        let update_end = update_start + tier.update_ms(shard.payload_bytes());
        timeline.updates.push(UpdateEvent {
            layer,
            start_ms: update_start,
            end_ms: update_end,
        });
        compute_clock = update_end;

        // Next prefetch goes out ahead of this layer's write-back; the
        // single-buffer mode instead waits for the buffer to drain.
        if mode == OffloadMode::Overlapped {
            if let Some(&next) = active.get(idx + prefetch) {
                send_htod(worker, shards, next, update_end)?;
            }
        }
        let shard = shards.get_mut(&unit).expect("shard present");
        let payload = serialize_shard(shard);
        let bytes = shard.payload_bytes();
        shard.residency = Residency::InFlight;
        worker.send(TransferRequest {
            kind: TransferKind::DtoH,
            layer,
            bytes,
            issue_ms: update_end,
            payload,
        })?;
        outstanding_dtoh += 1;

        // Single-buffer mode blocks until the write-back lands.
        if mode == OffloadMode::Vanilla {
            while outstanding_dtoh > 0 {
                let done = worker.recv()?;
                timeline.transfers.push(TransferEvent {
                    kind: done.kind,
                    layer: done.layer,
                    bytes: done.bytes,
                    issue_ms: done.issue_ms,
                    start_ms: done.start_ms,
                    end_ms: done.end_ms,
                });
                transfer_end = transfer_end.max(done.end_ms);
                match done.kind {
                    TransferKind::DtoH => {
                        let mut shard = deserialize_shard::<E>(&done.payload)?;
                        shard.residency = Residency::Host;
                        shards.insert(UnitId::Block(done.layer), shard);
                        outstanding_dtoh -= 1;
                    }
                    TransferKind::HtoD => {
                        return Err(CoreError::Scheduling(
                            "fetch completed during single-buffer drain".into(),
                        )
                        .into())
                    }
                }
            }
            if let Some(&next) = active.get(idx + 1) {
                send_htod(worker, shards, next, compute_clock.max(transfer_end))?;
            }
        }
    }

    // Drain remaining write-backs.
    while outstanding_dtoh > 0 {
        let done = worker.recv()?;
        timeline.transfers.push(TransferEvent {
            kind: done.kind,
            layer: done.layer,
            bytes: done.bytes,
            issue_ms: done.issue_ms,
            start_ms: done.start_ms,
            end_ms: done.end_ms,
        });
        transfer_end = transfer_end.max(done.end_ms);
        if done.kind != TransferKind::DtoH {
            return Err(CoreError::Scheduling("unexpected fetch while draining".into()).into());
        }
        let mut shard = deserialize_shard::<E>(&done.payload)?;
        shard.residency = Residency::Host;
        shards.insert(UnitId::Block(done.layer), shard);
        outstanding_dtoh -= 1;
    }

    let end_ms = compute_clock.max(transfer_end);
    timeline.makespan_ms = end_ms - phase_start_ms;
    let _ = shard_bytes;
    Ok(ExecutedPhase {
        timeline,
        end_ms,
        compute_end_ms: compute_clock,
    })
}
