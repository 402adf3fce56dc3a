//! The adaptive layer-sampling state machine.
//!
//! Drives training through two phases: a probing phase that runs
//! forward/backward for every layer without touching parameters, to
//! seed per-layer mean-gradient-norm (MGN) statistics; then an adaptive
//! phase that repeatedly samples a small set of trainable layers from a
//! softmax over MGN, refreshing the statistics with an exponential
//! moving average at a fixed interval. A static variant freezes the
//! probabilities after probing; a forced-uniform variant ignores MGN
//! entirely and reproduces uniform static sampling.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::CoreError;
use crate::model::{LayerGrads, LayerId, UnitId};
use crate::rng::Rng;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrassConfig {
    /// Probing steps before any parameter update.
    pub probe_steps: u64,
    /// Steps between consecutive layer resamplings.
    pub sample_period: u64,
    /// Steps between probability refreshes; a multiple of the sample
    /// period so refreshes land on resample boundaries.
    pub prob_update_period: u64,
    /// Layers trained per sampling period.
    pub active_layers: usize,
    /// Softmax temperature over (optionally normalized) MGN.
    pub temperature: f64,
    /// EMA weight on the newly observed window.
    pub ema_alpha: f64,
    /// Divide MGN by its maximum before the softmax so the temperature
    /// is scale-free across models.
    pub normalize_mgn: bool,
    pub rng_seed: u64,
}

impl Default for GrassConfig {
    fn default() -> Self {
        GrassConfig {
            probe_steps: 150,
            sample_period: 25,
            prob_update_period: 25,
            active_layers: 2,
            temperature: 1.0,
            ema_alpha: 0.5,
            normalize_mgn: true,
            rng_seed: 0,
        }
    }
}

impl GrassConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.active_layers == 0 || self.active_layers > n_layers {
            return Err(CoreError::Config {
                field: "active_layers",
                detail: format!("{} not in [1, {n_layers}]", self.active_layers),
            });
        }
        if self.sample_period == 0 {
            return Err(CoreError::Config {
                field: "sample_period",
                detail: "must be positive".into(),
            });
        }
        if self.prob_update_period == 0 || !self.prob_update_period.is_multiple_of(self.sample_period) {
            return Err(CoreError::Config {
                field: "prob_update_period",
                detail: format!(
                    "{} must be a positive multiple of sample_period {}",
                    self.prob_update_period, self.sample_period
                ),
            });
        }
        if !(self.temperature > 0.0) {
            return Err(CoreError::Config {
                field: "temperature",
                detail: "must be positive".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(CoreError::Config {
                field: "ema_alpha",
                detail: format!("{} not in [0, 1]", self.ema_alpha),
            });
        }
        Ok(())
    }
}

/// Streaming per-layer MGN statistics over the current window.
#[derive(Debug, Clone)]
pub struct MgnTracker {
    window_sum: Vec<f64>,
    window_count: Vec<u64>,
    committed: Vec<f64>,
}

impl MgnTracker {
    pub fn new(n_layers: usize) -> Self {
        MgnTracker {
            window_sum: vec![0.0; n_layers],
            window_count: vec![0; n_layers],
            committed: vec![0.0; n_layers],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.committed.len()
    }

    /// Folds one step's gradient snapshots into the window: each block
    /// layer contributes its RMS gradient magnitude `sqrt(|g|^2 / N_p)`.
    /// Non-block units are ignored; they are not sampled.
    pub fn record_step<E: Element>(&mut self, grads: &[LayerGrads<E>]) -> Result<()> {
        for g in grads {
            let UnitId::Block(LayerId(l)) = g.unit else {
                continue;
            };
            if l >= self.committed.len() {
                return Err(CoreError::usage(format!(
                    "gradient for layer {l} outside tracked range {}",
                    self.committed.len()
                )));
            }
            let rms = g.rms();
            if !rms.is_finite() {
                return Err(CoreError::numerical(format!(
                    "gradient norm of layer {l}"
                )));
            }
            self.window_sum[l] += rms;
            self.window_count[l] += 1;
        }
        Ok(())
    }

    /// Closes the window: layers that received gradients yield their mean
    /// per-step RMS, the rest yield no observation. Accumulators reset.
    pub fn commit_window(&mut self) -> Result<Vec<Option<f64>>> {
        if self.window_count.iter().all(|&c| c == 0) {
            return Err(CoreError::usage("commit_window with no recorded steps"));
        }
        let out = self
            .window_sum
            .iter()
            .zip(&self.window_count)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect();
        self.reset_window();
        Ok(out)
    }

    /// Drops the current window without committing. Used by static
    /// variants whose probabilities never refresh.
    pub fn discard_window(&mut self) {
        self.reset_window();
    }

    fn reset_window(&mut self) {
        self.window_sum.iter_mut().for_each(|s| *s = 0.0);
        self.window_count.iter_mut().for_each(|c| *c = 0);
    }

    /// Overwrites committed values from a window, used for the first
    /// estimate coming out of the probing phase.
    pub fn assign_committed(&mut self, window: &[Option<f64>]) {
        for (slot, w) in self.committed.iter_mut().zip(window) {
            if let Some(w) = w {
                *slot = *w;
            }
        }
    }

    /// Blends a committed window into the running estimate:
    /// `m <- alpha * window + (1 - alpha) * m` for observed layers.
    /// Unobserved (frozen) layers keep their previous value exactly.
    pub fn ema_refresh(&mut self, window: &[Option<f64>], alpha: f64) {
        for (slot, w) in self.committed.iter_mut().zip(window) {
            if let Some(w) = w {
                *slot = alpha * w + (1.0 - alpha) * *slot;
            }
        }
    }

    pub fn committed(&self) -> &[f64] {
        &self.committed
    }
}

/// Per-layer sampling probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPolicy {
    pub probs: Vec<f64>,
    pub last_update_step: u64,
}

impl SamplingPolicy {
    pub fn uniform(n_layers: usize) -> Self {
        SamplingPolicy {
            probs: vec![1.0 / n_layers as f64; n_layers],
            last_update_step: 0,
        }
    }

    /// Shannon entropy of the policy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * libm::log(p))
            .sum::<f64>()
    }
}

/// Softmax of (optionally max-normalized) MGN at temperature `tau`,
/// computed with max-subtraction so large scores cannot overflow.
pub fn compute_probs(committed: &[f64], tau: f64, normalize: bool) -> Result<SamplingPolicy> {
    if !(tau > 0.0) {
        return Err(CoreError::Config {
            field: "temperature",
            detail: "must be positive".into(),
        });
    }
    if committed.is_empty() {
        return Err(CoreError::usage("compute_probs over zero layers"));
    }
    if let Some(&bad) = committed.iter().find(|&&m| !(m >= 0.0)) {
        return Err(CoreError::usage(format!(
            "negative or non-finite MGN {bad}"
        )));
    }
    let max_m = committed.iter().cloned().fold(0.0f64, f64::max);
    let scores: Vec<f64> = if normalize && max_m > 0.0 {
        committed.iter().map(|&m| m / max_m).collect()
    } else {
        committed.to_vec()
    };
    let max_s = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // Clamp underflowed exponentials so extreme temperatures cannot
    // produce an exactly-zero probability.
    let exps: Vec<f64> = scores
        .iter()
        .map(|&s| libm::exp((s - max_s) / tau).max(f64::MIN_POSITIVE))
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(SamplingPolicy {
        probs: exps.iter().map(|&e| e / total).collect(),
        last_update_step: 0,
    })
}

/// Draws `count` distinct layers by sequential sampling with
/// renormalization: each draw picks from the remaining layers with
/// probability proportional to the policy, then removes the winner.
/// Returned ids are sorted ascending, the order updates run in.
pub fn sample_layers(policy: &SamplingPolicy, count: usize, rng: &mut Rng) -> Result<Vec<LayerId>> {
    let n = policy.probs.len();
    if count > n {
        return Err(CoreError::Config {
            field: "active_layers",
            detail: format!("{count} exceeds {n} layers"),
        });
    }
    let mut weights = policy.probs.clone();
    let mut picked = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = weights.iter().sum();
        let mut u = rng.next_f64() * total;
        let mut chosen = None;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            if u < w {
                chosen = Some(i);
                break;
            }
            u -= w;
        }
        // Rounding can push u past the last positive weight.
        let idx = chosen
            .or_else(|| weights.iter().rposition(|&w| w > 0.0))
            .ok_or_else(|| CoreError::usage("sample_layers: no remaining probability mass"))?;
        weights[idx] = 0.0;
        picked.push(LayerId(idx));
    }
    picked.sort();
    Ok(picked)
}

/// How the sampling policy evolves after the probing phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbsMode {
    /// Refresh MGN and probabilities every update interval.
    Adaptive,
    /// Keep the probe-phase probabilities for the whole run.
    StaticAfterProbe,
    /// Ignore MGN entirely; always sample uniformly.
    ForcedUniform,
}

/// Decision the training loop acts on at a given step.
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleDecision {
    /// Forward/backward over all layers, no parameter updates.
    Probe,
    /// Start of a sampling period with the given trainable layers.
    Resample {
        layers: Vec<LayerId>,
        /// True when the probabilities were recomputed at this step,
        /// i.e. a probability-trace record should be emitted.
        policy_refreshed: bool,
    },
    /// Mid-period training step; the active set is unchanged.
    Continue,
}

/// The scheduler proper: owns the tracker, the policy, and the sampling
/// RNG stream, and turns a monotone step index into decisions.
#[derive(Debug, Clone)]
pub struct GrassScheduler {
    cfg: GrassConfig,
    mode: ProbsMode,
    tracker: MgnTracker,
    policy: SamplingPolicy,
    rng: Rng,
}

impl GrassScheduler {
    pub fn new(cfg: GrassConfig, n_layers: usize, mode: ProbsMode) -> Result<Self> {
        cfg.validate(n_layers)?;
        let rng = Rng::stream(cfg.rng_seed, 0x6c61_7965_7273); // layer-sampling stream
        Ok(GrassScheduler {
            cfg,
            mode,
            tracker: MgnTracker::new(n_layers),
            policy: SamplingPolicy::uniform(n_layers),
            rng,
        })
    }

    pub fn config(&self) -> &GrassConfig {
        &self.cfg
    }

    pub fn tracker(&self) -> &MgnTracker {
        &self.tracker
    }

    pub fn policy(&self) -> &SamplingPolicy {
        &self.policy
    }

    /// Records one step's gradient snapshots into the MGN window.
    pub fn record_step<E: Element>(&mut self, grads: &[LayerGrads<E>]) -> Result<()> {
        self.tracker.record_step(grads)
    }

    /// Advances the state machine.
    ///
    /// Steps below the probe length are probing: every layer trains its
    /// statistics, no parameters move. At the probe boundary the probe
    /// window becomes the initial MGN estimate and the first sampling
    /// period begins. After that, a resample fires every sample period,
    /// and on update-interval boundaries the adaptive mode commits the
    /// window, EMA-blends it, and recomputes probabilities first.
    pub fn step(&mut self, step_index: u64) -> Result<ScheduleDecision> {
        if step_index < self.cfg.probe_steps {
            return Ok(ScheduleDecision::Probe);
        }
        let since_probe = step_index - self.cfg.probe_steps;
        if !since_probe.is_multiple_of(self.cfg.sample_period) {
            return Ok(ScheduleDecision::Continue);
        }
        let refreshed = if since_probe == 0 {
            // End of probing: the probe window is the initial estimate.
            if self.cfg.probe_steps > 0 {
                let window = self.tracker.commit_window()?;
                self.tracker.assign_committed(&window);
            }
            self.refresh_policy(step_index)?;
            true
        } else if since_probe.is_multiple_of(self.cfg.prob_update_period) {
            match self.mode {
                ProbsMode::Adaptive => {
                    let window = self.tracker.commit_window()?;
                    self.tracker.ema_refresh(&window, self.cfg.ema_alpha);
                    self.refresh_policy(step_index)?;
                    true
                }
                ProbsMode::StaticAfterProbe | ProbsMode::ForcedUniform => {
                    // Stale windows must not leak into a later commit.
                    self.tracker.discard_window();
                    false
                }
            }
        } else {
            false
        };
        let layers = sample_layers(&self.policy, self.cfg.active_layers, &mut self.rng)?;
        Ok(ScheduleDecision::Resample {
            layers,
            policy_refreshed: refreshed,
        })
    }

    fn refresh_policy(&mut self, step_index: u64) -> Result<()> {
        self.policy = match self.mode {
            ProbsMode::ForcedUniform => SamplingPolicy::uniform(self.tracker.n_layers()),
            _ => compute_probs(
                self.tracker.committed(),
                self.cfg.temperature,
                self.cfg.normalize_mgn,
            )?,
        };
        self.policy.last_update_step = step_index;
        Ok(())
    }
}
