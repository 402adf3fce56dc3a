//! The training loop: method dispatch, scheduling, offloaded updates,
//! accounting, and artifact emission.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use grass_core::element::Element;
use grass_core::memory::{MemCategory, MemoryAccountant, PeakReport};
use grass_core::model::{FreezeMask, LayerGrads, LayerId, TinyTransformer, TokenBatch, UnitId};
use grass_core::offload::{plan_schedule, OffloadMode, TierModel, TransferKind};
use grass_core::optimizer::{apply_update, init_shards, OptimizerShard, Residency};
use grass_core::rng::Rng;
use grass_core::scheduler::{GrassScheduler, ProbsMode, ScheduleDecision};
use grass_core::CoreError;

use crate::checkpoint::save_checkpoint;
use crate::config::{Method, Precision, RunConfig};
use crate::dataset::BatchStream;
use crate::error::{HarnessError, Result};
use crate::exec::{execute_offloaded_phase, JitterConfig, TransferWorker, WorkerOptions};
use crate::metrics::{
    write_memory_rows, write_timeline_rows, CsvWriter, JsonlWriter, MetricsRecord,
    ProbTraceRecord, RunSummary,
};

const DATA_STREAM: u64 = 1;
const VAL_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub sim_total_ms: f64,
    pub sim_vanilla_total_ms: f64,
    pub peaks: PeakReport,
    pub output_dir: PathBuf,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub prob_trace_path: Option<PathBuf>,
}

/// Optional knobs tests layer on top of a config.
#[derive(Debug, Default, Clone, Copy)]
pub struct RunOverrides {
    pub transfer_jitter: Option<JitterConfig>,
}

pub fn run(config: &RunConfig) -> Result<RunOutcome> {
    run_with(config, RunOverrides::default())
}

pub fn run_with(config: &RunConfig, overrides: RunOverrides) -> Result<RunOutcome> {
    config.validate()?;
    match config.precision {
        Precision::F64 => run_typed::<f64>(config, overrides),
        Precision::F32 => run_typed::<f32>(config, overrides),
    }
}

struct Artifacts {
    metrics: JsonlWriter,
    prob_trace: Option<JsonlWriter>,
    timeline: CsvWriter,
    memory: CsvWriter,
}

fn run_typed<E: Element>(config: &RunConfig, overrides: RunOverrides) -> Result<RunOutcome> {
    let wall_start = Instant::now();
    let out_dir = config.resolved_output_dir();
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| HarnessError::io(out_dir.display().to_string(), e))?;

    let mut model = TinyTransformer::<E>::init(
        config.model.clone(),
        &mut Rng::stream(config.seed, INIT_STREAM),
    )?;
    let mut data = BatchStream::new(
        &config.dataset,
        &config.model,
        config.batch_size,
        config.seq_len,
        Rng::stream(config.seed, DATA_STREAM),
    )?;
    // A fixed validation set, identical across methods and steps.
    let val_batches: Vec<TokenBatch> = {
        let mut val = BatchStream::new(
            &config.dataset,
            &config.model,
            config.batch_size,
            config.seq_len,
            Rng::stream(config.seed, VAL_STREAM),
        )?;
        (0..config.eval_batches.max(1)).map(|_| val.next_batch()).collect()
    };

    // The layer sampler is seeded from the run seed so one seed field
    // controls the whole experiment.
    let mut scheduler = if config.method.uses_scheduler() {
        let mut gcfg = config.grass.clone();
        gcfg.rng_seed = config.seed;
        let mode = match config.method {
            Method::Grass => ProbsMode::Adaptive,
            Method::GrassStatic => ProbsMode::StaticAfterProbe,
            Method::UniformStatic => {
                // Uniform static sampling has no probing phase.
                gcfg.probe_steps = 0;
                ProbsMode::ForcedUniform
            }
            Method::Fft => unreachable!(),
        };
        Some(GrassScheduler::new(gcfg, config.model.n_layers, mode)?)
    } else {
        None
    };

    // Shards: always-trainable groups live on the device; block shards
    // start host-side except under full fine-tuning, where everything is
    // device-resident for the whole run.
    let train_groups = config.method == Method::Fft || config.always_train_embed_head;
    let mut shards: BTreeMap<UnitId, OptimizerShard<E>> = init_shards(&model)
        .into_iter()
        .filter(|s| train_groups || matches!(s.unit, UnitId::Block(_)))
        .map(|mut s| {
            if config.method == Method::Fft {
                s.residency = Residency::Device;
            }
            (s.unit, s)
        })
        .collect();

    let mut acct = MemoryAccountant::new();
    let param_bytes = (model.total_param_count() * E::BYTES) as u64;
    acct.alloc(0.0, MemCategory::Params, param_bytes);
    for shard in shards.values() {
        if shard.residency == Residency::Device {
            acct.alloc(0.0, MemCategory::Optimizer, shard.payload_bytes());
        }
    }
    let act_bytes = activation_proxy_bytes::<E>(config);

    let worker = match (config.method, config.offload) {
        (Method::Fft, _) | (_, OffloadMode::Pinned) => None,
        _ => Some(TransferWorker::spawn(
            config.tier.clone(),
            WorkerOptions {
                jitter: overrides.transfer_jitter,
                corrupt_htod_of: None,
            },
        )),
    };

    let mut artifacts = Artifacts {
        metrics: JsonlWriter::create(&out_dir.join("metrics.jsonl"))?,
        prob_trace: if config.method.uses_scheduler() {
            Some(JsonlWriter::create(&out_dir.join("prob_trace.jsonl"))?)
        } else {
            None
        },
        timeline: CsvWriter::create(&out_dir.join("timeline.csv"), "lane,kind,layer,start_ms,end_ms")?,
        memory: CsvWriter::create(&out_dir.join("memory_trace.csv"), "time_ms,category,device_bytes")?,
    };

    let all_blocks: Vec<LayerId> = (0..config.model.n_layers).map(LayerId).collect();
    let group_units: Vec<UnitId> = if train_groups {
        vec![UnitId::Embedding, UnitId::Head]
    } else {
        Vec::new()
    };

    let mut now_ms = 0.0f64;
    let mut vanilla_total_ms = 0.0f64;
    let mut active: Vec<LayerId> = all_blocks.clone();
    let mut pinned_on_device: Vec<LayerId> = Vec::new();
    let mut mask = FreezeMask::all_trainable(config.model.n_layers);
    let mut last_train_loss = f64::NAN;
    let mut last_val_loss = f64::NAN;

    let loop_result = (|| -> Result<()> {
        for step in 0..config.total_steps {
            // Scheduling decision.
            let mut probing = false;
            match scheduler.as_mut() {
                Some(sched) => match sched.step(step)? {
                    ScheduleDecision::Probe => {
                        probing = true;
                        mask = FreezeMask::all_trainable(config.model.n_layers);
                    }
                    ScheduleDecision::Resample {
                        layers,
                        policy_refreshed,
                    } => {
                        if policy_refreshed {
                            if let Some(trace) = artifacts.prob_trace.as_mut() {
                                trace.append(&ProbTraceRecord {
                                    step,
                                    mgn: sched.tracker().committed().to_vec(),
                                    probs: sched.policy().probs.clone(),
                                    sampled: layers.iter().map(|l| l.0).collect(),
                                })?;
                            }
                        }
                        if config.offload == OffloadMode::Pinned {
                            now_ms += pinned_swap(
                                &mut acct,
                                now_ms,
                                &mut shards,
                                &mut pinned_on_device,
                                &layers,
                                &config.tier,
                            )?;
                        }
                        mask = FreezeMask::for_active(
                            config.model.n_layers,
                            &layers,
                            config.always_train_embed_head,
                        )?;
                        active = layers;
                    }
                    ScheduleDecision::Continue => {}
                },
                None => {
                    // Full fine-tuning: everything trains every step.
                    active = all_blocks.clone();
                    mask = FreezeMask::all_trainable(config.model.n_layers);
                }
            }

            // Forward/backward.
            let batch = data.next_batch();
            acct.alloc(now_ms, MemCategory::Activations, act_bytes);
            let pass = model.forward_loss(&batch, &mask)?;
            last_train_loss = pass.loss();
            if !last_train_loss.is_finite() {
                return Err(CoreError::numerical(format!("train loss at step {step}")).into());
            }
            let grads = model.backward_collect(&pass)?;
            drop(pass);
            let grad_bytes: u64 = grads
                .iter()
                .map(|g| (g.n_params * E::BYTES) as u64)
                .sum();
            acct.alloc(now_ms, MemCategory::Grads, grad_bytes);
            if let Some(sched) = scheduler.as_mut() {
                sched.record_step(&grads)?;
            }
            let step_start = now_ms;
            now_ms += config.step_cost.fwd_bwd_ms;

            // Optimizer phase.
            let mut vanilla_step_ms = config.step_cost.fwd_bwd_ms;
            if !probing {
                let opt_cfg = config.optimizer.at_step(step);
                let grads_by_unit: BTreeMap<UnitId, LayerGrads<E>> =
                    grads.into_iter().map(|g| (g.unit, g)).collect();

                // Always-trainable groups update in place on the device.
                let mut group_ms = 0.0;
                for &unit in &group_units {
                    if let Some(g) = grads_by_unit.get(&unit) {
                        let shard = shards
                            .get_mut(&unit)
                            .ok_or_else(|| CoreError::Scheduling(format!("no shard for {}", unit.key())))?;
                        apply_update(shard, &mut model, g, &opt_cfg)?;
                        group_ms += config.tier.update_ms(shard.payload_bytes());
                    }
                }
                now_ms += group_ms;
                vanilla_step_ms += group_ms;

                let active_bytes: Vec<(LayerId, u64)> = active
                    .iter()
                    .map(|&l| (l, shards[&UnitId::Block(l)].payload_bytes()))
                    .collect();
                match (config.method, config.offload, worker.as_ref()) {
                    (Method::Fft, _, _) | (_, OffloadMode::Pinned, _) => {
                        for &(layer, bytes) in &active_bytes {
                            let unit = UnitId::Block(layer);
                            let g = grads_by_unit.get(&unit).ok_or_else(|| {
                                CoreError::Scheduling(format!("no gradients for {}", unit.key()))
                            })?;
                            let shard = shards.get_mut(&unit).unwrap();
                            apply_update(shard, &mut model, g, &opt_cfg)?;
                            now_ms += config.tier.update_ms(bytes);
                            vanilla_step_ms += config.tier.update_ms(bytes);
                        }
                    }
                    (_, mode, Some(worker)) => {
                        let phase = execute_offloaded_phase(
                            worker,
                            mode,
                            &config.tier,
                            now_ms,
                            &active,
                            &mut shards,
                            &grads_by_unit,
                            &mut model,
                            &opt_cfg,
                        )?;
                        account_phase(&mut acct, &phase.timeline)?;
                        write_timeline_rows(&mut artifacts.timeline, &phase.timeline)?;
                        now_ms = phase.end_ms;
                        vanilla_step_ms +=
                            plan_schedule(&active_bytes, OffloadMode::Vanilla, &config.tier)?
                                .makespan_ms;
                    }
                    (_, _, None) => {
                        return Err(CoreError::Scheduling("offload worker missing".into()).into())
                    }
                }
            }
            acct.free(now_ms, MemCategory::Grads, grad_bytes)?;
            acct.free(now_ms, MemCategory::Activations, act_bytes)?;
            if probing {
                // Probe steps cost only the forward/backward compute.
                vanilla_step_ms = config.step_cost.fwd_bwd_ms;
            }
            vanilla_total_ms += vanilla_step_ms;

            // Periodic validation.
            let is_last = step + 1 == config.total_steps;
            let val_loss = if is_last
                || (config.eval_interval > 0 && (step + 1) % config.eval_interval == 0)
            {
                let mut total = 0.0;
                for vb in &val_batches {
                    total += model.eval_loss(vb)?;
                }
                last_val_loss = total / val_batches.len() as f64;
                Some(last_val_loss)
            } else {
                None
            };

            artifacts.metrics.append(&MetricsRecord {
                step,
                train_loss: last_train_loss,
                val_loss,
                sampled_layers: if probing {
                    Vec::new()
                } else {
                    active.iter().map(|l| l.0).collect()
                },
                probs: scheduler
                    .as_ref()
                    .map(|s| s.policy().probs.clone())
                    .unwrap_or_default(),
                sim_step_ms: now_ms - step_start,
                sim_vanilla_step_ms: vanilla_step_ms,
                device_peak_bytes: acct.peak_report(),
            })?;
            write_memory_rows(&mut artifacts.memory, &acct.drain_trace())?;
        }
        Ok(())
    })();

    // On a numerical fault the run still leaves a checkpoint behind.
    let checkpoint_path = out_dir.join("checkpoint.bin");
    let shard_list: Vec<OptimizerShard<E>> = shards.values().cloned().collect();
    save_checkpoint(
        &checkpoint_path,
        &model,
        &shard_list,
        config.total_steps,
        config.seed,
    )?;
    artifacts.timeline.flush()?;
    artifacts.memory.flush()?;
    loop_result?;

    let summary = RunSummary {
        method: config.method.name().to_string(),
        steps: config.total_steps,
        final_train_loss: last_train_loss,
        final_val_loss: last_val_loss,
        sim_total_ms: now_ms,
        sim_vanilla_total_ms: vanilla_total_ms,
        wall_ms: wall_start.elapsed().as_secs_f64() * 1e3,
        device_peak_bytes: acct.peak_report(),
    };
    let summary_path = out_dir.join("run_summary.json");
    std::fs::write(
        &summary_path,
        serde_json::to_vec_pretty(&summary).map_err(|e| HarnessError::Report(e.to_string()))?,
    )
    .map_err(|e| HarnessError::io(summary_path.display().to_string(), e))?;

    Ok(RunOutcome {
        final_train_loss: last_train_loss,
        final_val_loss: last_val_loss,
        sim_total_ms: now_ms,
        sim_vanilla_total_ms: vanilla_total_ms,
        peaks: acct.peak_report(),
        prob_trace_path: artifacts
            .prob_trace
            .as_ref()
            .map(|_| out_dir.join("prob_trace.jsonl")),
        metrics_path: out_dir.join("metrics.jsonl"),
        checkpoint_path,
        output_dir: out_dir,
    })
}

/// Rough per-step device footprint of forward activations kept for the
/// backward pass: embeddings plus, per block, the attention/MLP
/// intermediates (12 tensors of `[batch, seq, d]`) and the score matrix
/// (`2 * [batch, heads, seq, seq]`).
fn activation_proxy_bytes<E: Element>(config: &RunConfig) -> u64 {
    let b = config.batch_size as u64;
    let t = config.seq_len as u64;
    let d = config.model.d_model as u64;
    let h = config.model.n_heads as u64;
    let l = config.model.n_layers as u64;
    let scalars = 2 * b * t * d + l * (12 * b * t * d + 2 * b * h * t * t);
    scalars * E::BYTES as u64
}

/// Device-residency swap at a sampling-period boundary in pinned mode.
/// Old actives drain to the host, new actives load, serialized on the
/// transfer channel. Returns the elapsed channel time.
fn pinned_swap<E: Element>(
    acct: &mut MemoryAccountant,
    now_ms: f64,
    shards: &mut BTreeMap<UnitId, OptimizerShard<E>>,
    on_device: &mut Vec<LayerId>,
    incoming: &[LayerId],
    tier: &TierModel,
) -> Result<f64> {
    let mut elapsed = 0.0;
    for &layer in on_device.iter() {
        if incoming.contains(&layer) {
            continue;
        }
        let shard = shards.get_mut(&UnitId::Block(layer)).unwrap();
        shard.residency = Residency::Host;
        elapsed += tier.transfer_ms(shard.payload_bytes());
        acct.free(now_ms + elapsed, MemCategory::Optimizer, shard.payload_bytes())?;
    }
    for &layer in incoming {
        if on_device.contains(&layer) {
            continue;
        }
        let shard = shards.get_mut(&UnitId::Block(layer)).unwrap();
        shard.residency = Residency::Device;
        elapsed += tier.transfer_ms(shard.payload_bytes());
        acct.alloc(now_ms + elapsed, MemCategory::Optimizer, shard.payload_bytes());
    }
    *on_device = incoming.to_vec();
    Ok(elapsed)
}

/// Feeds an executed phase's shard movements into the accountant in
/// timestamp order (frees first on ties, matching buffer handoff).
fn account_phase(acct: &mut MemoryAccountant, timeline: &grass_core::offload::OverlapTimeline) -> Result<()> {
    let mut deltas: Vec<(f64, i64)> = Vec::new();
    for t in &timeline.transfers {
        match t.kind {
            TransferKind::HtoD => deltas.push((t.end_ms, t.bytes as i64)),
            TransferKind::DtoH => deltas.push((t.start_ms, -(t.bytes as i64))),
        }
    }
    deltas.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    for (time, delta) in deltas {
        if delta >= 0 {
            acct.alloc(time, MemCategory::Optimizer, delta as u64);
        } else {
            acct.free(time, MemCategory::Optimizer, (-delta) as u64)?;
        }
    }
    Ok(())
}
