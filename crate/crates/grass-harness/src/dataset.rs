//! Deterministic batch generation for the three built-in tasks.
//!
//! Every stream is fully determined by (spec, seed): the same config
//! replays the same batch sequence no matter which method consumes it.

use std::path::Path;

use grass_core::model::{ModelConfig, TokenBatch};
use grass_core::rng::Rng;

use crate::config::DatasetSpec;
use crate::error::{HarnessError, Result};

/// Filler token for the planted-importance task.
const FILLER: u32 = 0;
/// Distinct marker values (and matching answer tokens).
const N_MARKERS: u32 = 8;
/// Tokens used by the planted task: filler, markers, answers.
const PLANTED_VOCAB: u32 = 1 + 2 * N_MARKERS;

#[derive(Debug)]
enum StreamKind {
    Corpus { ids: Vec<u32> },
    Planted { distance: usize, signal: f64 },
    Repetition { period: usize },
}

/// An infinite deterministic stream of token batches.
#[derive(Debug)]
pub struct BatchStream {
    kind: StreamKind,
    rng: Rng,
    batch_size: usize,
    seq_len: usize,
}

impl BatchStream {
    pub fn new(
        spec: &DatasetSpec,
        model: &ModelConfig,
        batch_size: usize,
        seq_len: usize,
        rng: Rng,
    ) -> Result<Self> {
        let kind = match spec {
            DatasetSpec::CharCorpus { path } => {
                let ids = load_corpus(path, model.vocab_size)?;
                if ids.len() < seq_len + 2 {
                    return Err(HarnessError::config(format!(
                        "corpus {} has {} usable tokens, need at least {}",
                        path.display(),
                        ids.len(),
                        seq_len + 2
                    )));
                }
                StreamKind::Corpus { ids }
            }
            DatasetSpec::PlantedImportance { layer, signal } => {
                let window = model.attn_window.ok_or_else(|| {
                    HarnessError::config("planted_importance requires model.attn_window")
                })?;
                let distance = planted_distance(*layer, window);
                if seq_len < distance + 2 {
                    return Err(HarnessError::config(format!(
                        "seq_len {seq_len} too short: marker-to-answer distance is {distance}"
                    )));
                }
                if model.vocab_size < PLANTED_VOCAB as usize {
                    return Err(HarnessError::config(format!(
                        "planted_importance needs vocab_size >= {PLANTED_VOCAB}"
                    )));
                }
                StreamKind::Planted {
                    distance,
                    signal: *signal,
                }
            }
            DatasetSpec::Repetition { period, .. } => StreamKind::Repetition { period: *period },
        };
        Ok(BatchStream {
            kind,
            rng,
            batch_size,
            seq_len,
        })
    }

    pub fn next_batch(&mut self) -> TokenBatch {
        let (bsz, seq) = (self.batch_size, self.seq_len);
        let mut inputs = Vec::with_capacity(bsz * seq);
        let mut targets = Vec::with_capacity(bsz * seq);
        for _ in 0..bsz {
            match &self.kind {
                StreamKind::Corpus { ids } => {
                    let start = self.rng.next_below((ids.len() - seq) as u64) as usize;
                    inputs.extend_from_slice(&ids[start..start + seq]);
                    targets.extend(ids[start + 1..start + seq + 1].iter().map(|&t| t as i64));
                }
                StreamKind::Repetition { period } => {
                    let phase = self.rng.next_below(*period as u64) as usize;
                    inputs.extend((0..seq).map(|i| ((phase + i) % period) as u32));
                    targets.extend((1..=seq).map(|i| ((phase + i) % period) as i64));
                }
                StreamKind::Planted { distance, signal } => {
                    let (seq_in, seq_tg) =
                        planted_sequence(&mut self.rng, seq, *distance, *signal);
                    inputs.extend(seq_in);
                    targets.extend(seq_tg);
                }
            }
        }
        TokenBatch::new(inputs, targets, bsz, seq).expect("stream produces conforming batches")
    }
}

/// Marker-to-answer distance that needs `layer + 1` attention hops: one
/// hop covers `window - 1` positions, so resolving the answer requires
/// routing through blocks `0..=layer` and no shallower stack suffices.
pub fn planted_distance(layer: usize, window: usize) -> usize {
    (layer + 1) * (window.saturating_sub(1)).max(1) + 1
}

fn planted_sequence(
    rng: &mut Rng,
    seq: usize,
    distance: usize,
    signal: f64,
) -> (Vec<u32>, Vec<i64>) {
    let mut tokens = vec![FILLER; seq + 1];
    // Marker/answer pairs tiled over non-overlapping spans: each marker
    // value must be relayed exactly `distance` positions forward, which
    // takes the full planted attention depth, before the answer position
    // can predict its copy. Everything else is filler, so most of the
    // learnable loss runs through the relay circuit.
    let span = distance + 2;
    let n_pairs = (seq / span).max(1);
    for pair in 0..n_pairs {
        let base = pair * span;
        let slack = if pair + 1 == n_pairs {
            seq - 1 - distance - base
        } else {
            span - 1 - distance
        };
        let marker_pos = base + rng.next_below((slack + 1) as u64) as usize;
        let marker_value = rng.next_below(N_MARKERS as u64) as u32;
        tokens[marker_pos] = 1 + marker_value;
        let answer_value = if rng.next_f64() < signal {
            marker_value
        } else {
            rng.next_below(N_MARKERS as u64) as u32
        };
        tokens[marker_pos + distance] = 1 + N_MARKERS + answer_value;
    }
    let inputs = tokens[..seq].to_vec();
    let targets = tokens[1..=seq].iter().map(|&t| t as i64).collect();
    (inputs, targets)
}

fn load_corpus(path: &Path, vocab_size: usize) -> Result<Vec<u32>> {
    let bytes =
        std::fs::read(path).map_err(|e| HarnessError::io(path.display().to_string(), e))?;
    // Rank distinct bytes; anything past the vocabulary folds onto the
    // last id so token ids always stay in range.
    let mut seen = [false; 256];
    for &b in &bytes {
        seen[b as usize] = true;
    }
    let mut rank = [0u32; 256];
    let mut next = 0u32;
    for b in 0..256 {
        if seen[b] {
            rank[b] = next.min(vocab_size as u32 - 1);
            next += 1;
        }
    }
    Ok(bytes.iter().map(|&b| rank[b as usize]).collect())
}
