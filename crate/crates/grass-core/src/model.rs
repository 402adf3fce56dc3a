//! Tiny decoder-only transformer organized as an ordered list of blocks.
//!
//! Each block is the unit of layer sampling: it knows its parameter
//! count, can be frozen for a sampling period, and reports its per-step
//! gradient snapshot as one flat vector. Embedding and output head are
//! separate always-trainable groups outside the sampled set.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::CoreError;
use crate::rng::Rng;
use crate::tape::{Gradients, Tape, ValueId};
use crate::tensor::Tensor;
use crate::Result;

const INIT_STD: f64 = 0.02;

/// Index of a transformer block. Dense and stable for a model's lifetime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerId(pub usize);

/// A parameter unit the optimizer shards over: one sampled block or one
/// of the always-trainable groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum UnitId {
    Embedding,
    Block(LayerId),
    Head,
}

impl UnitId {
    pub fn key(&self) -> String {
        match self {
            UnitId::Embedding => "embedding".into(),
            UnitId::Block(LayerId(i)) => format!("block.{i}"),
            UnitId::Head => "head".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Per-layer attention span: each position sees itself plus
    /// `attn_window - 1` predecessors. `None` means full causal.
    #[serde(default)]
    pub attn_window: Option<usize>,
    /// Reuse the token embedding as the output projection.
    #[serde(default)]
    pub tie_embed_head: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive: [(&'static str, usize); 6] = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(CoreError::Config {
                    field,
                    detail: "must be positive".into(),
                });
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(CoreError::Config {
                field: "n_heads",
                detail: format!("{} does not divide d_model {}", self.n_heads, self.d_model),
            });
        }
        if self.attn_window == Some(0) {
            return Err(CoreError::Config {
                field: "attn_window",
                detail: "must be at least 1".into(),
            });
        }
        Ok(())
    }

    /// Scalars in one block: q/k/v/o projections, the two MLP matrices,
    /// and two affine layernorms.
    pub fn block_param_count(&self) -> usize {
        4 * self.d_model * self.d_model + 2 * self.d_model * self.d_ff + 4 * self.d_model
    }
}

/// Which parameter units receive gradients this step.
#[derive(Debug, Clone, PartialEq)]
pub struct FreezeMask {
    trainable: Vec<bool>,
    embed: bool,
    head: bool,
}

impl FreezeMask {
    pub fn all_trainable(n_layers: usize) -> Self {
        FreezeMask {
            trainable: vec![true; n_layers],
            embed: true,
            head: true,
        }
    }

    pub fn all_frozen(n_layers: usize) -> Self {
        FreezeMask {
            trainable: vec![false; n_layers],
            embed: false,
            head: false,
        }
    }

    /// Mask for one sampling period: exactly the given blocks plus the
    /// always-trainable groups when enabled.
    pub fn for_active(n_layers: usize, active: &[LayerId], train_groups: bool) -> Result<Self> {
        let mut trainable = vec![false; n_layers];
        for &LayerId(i) in active {
            if i >= n_layers {
                return Err(CoreError::usage(format!(
                    "layer {i} out of range for {n_layers} layers"
                )));
            }
            trainable[i] = true;
        }
        Ok(FreezeMask {
            trainable,
            embed: train_groups,
            head: train_groups,
        })
    }

    pub fn is_block_trainable(&self, layer: LayerId) -> bool {
        self.trainable.get(layer.0).copied().unwrap_or(false)
    }

    pub fn is_unit_trainable(&self, unit: UnitId) -> bool {
        match unit {
            UnitId::Embedding => self.embed,
            UnitId::Block(l) => self.is_block_trainable(l),
            UnitId::Head => self.head,
        }
    }

    pub fn trainable_blocks(&self) -> impl Iterator<Item = LayerId> + '_ {
        self.trainable
            .iter()
            .enumerate()
            .filter(|(_, &t)| t)
            .map(|(i, _)| LayerId(i))
    }

    pub fn n_trainable_blocks(&self) -> usize {
        self.trainable.iter().filter(|&&t| t).count()
    }
}

/// Per-layer flattened gradient snapshot.
#[derive(Debug, Clone)]
pub struct LayerGrads<E: Element> {
    pub unit: UnitId,
    pub flat: Vec<E>,
    pub n_params: usize,
}

impl<E: Element> LayerGrads<E> {
    pub fn new(unit: UnitId, flat: Vec<E>) -> Result<Self> {
        if flat.is_empty() {
            return Err(CoreError::usage("empty gradient snapshot"));
        }
        if let Some(bad) = flat.iter().find(|g| !g.is_finite()) {
            return Err(CoreError::numerical(format!(
                "gradient of {} contains {bad:?}",
                unit.key()
            )));
        }
        let n_params = flat.len();
        Ok(LayerGrads {
            unit,
            flat,
            n_params,
        })
    }

    /// Root-mean-square gradient magnitude, computed in f64.
    pub fn rms(&self) -> f64 {
        let sq: f64 = self.flat.iter().map(|g| {
            let g = g.to_f64();
            g * g
        }).sum();
        libm::sqrt(sq / self.n_params as f64)
    }
}

/// One token batch: row-major `[batch, seq]` inputs and next-token
/// targets, with `-1` marking padded target positions.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub inputs: Vec<u32>,
    pub targets: Vec<i64>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(inputs: Vec<u32>, targets: Vec<i64>, batch: usize, seq: usize) -> Result<Self> {
        if inputs.len() != batch * seq || targets.len() != batch * seq {
            return Err(CoreError::usage(format!(
                "batch of {batch}x{seq} wants {} tokens, got {} inputs / {} targets",
                batch * seq,
                inputs.len(),
                targets.len()
            )));
        }
        Ok(TokenBatch {
            inputs,
            targets,
            batch,
            seq,
        })
    }
}

#[derive(Debug, Clone)]
struct BlockParams<E: Element> {
    ln1_g: Tensor<E>,
    ln1_b: Tensor<E>,
    wq: Tensor<E>,
    wk: Tensor<E>,
    wv: Tensor<E>,
    wo: Tensor<E>,
    ln2_g: Tensor<E>,
    ln2_b: Tensor<E>,
    fc1: Tensor<E>,
    fc2: Tensor<E>,
}

struct BlockLeafIds {
    ln1_g: ValueId,
    ln1_b: ValueId,
    wq: ValueId,
    wk: ValueId,
    wv: ValueId,
    wo: ValueId,
    ln2_g: ValueId,
    ln2_b: ValueId,
    fc1: ValueId,
    fc2: ValueId,
}

impl BlockLeafIds {
    fn in_order(&self) -> [ValueId; 10] {
        [
            self.ln1_g, self.ln1_b, self.wq, self.wk, self.wv, self.wo, self.ln2_g, self.ln2_b,
            self.fc1, self.fc2,
        ]
    }
}

/// A completed forward pass: the tape, the scalar loss, and the leaf ids
/// needed to collect per-unit gradients afterwards.
pub struct ForwardPass<E: Element> {
    tape: Tape<E>,
    loss: ValueId,
    tok_emb: ValueId,
    pos_emb: ValueId,
    blocks: Vec<BlockLeafIds>,
    final_ln_g: ValueId,
    final_ln_b: ValueId,
    head: Option<ValueId>,
    mask: FreezeMask,
}

impl<E: Element> ForwardPass<E> {
    pub fn loss(&self) -> f64 {
        self.tape.value(self.loss).data()[0].to_f64()
    }
}

#[derive(Debug, Clone)]
pub struct TinyTransformer<E: Element> {
    cfg: ModelConfig,
    tok_emb: Tensor<E>,
    pos_emb: Tensor<E>,
    blocks: Vec<BlockParams<E>>,
    final_ln_g: Tensor<E>,
    final_ln_b: Tensor<E>,
    head: Option<Tensor<E>>,
}

impl<E: Element> TinyTransformer<E> {
    /// Builds a model with scaled-normal weights (std 0.02) and identity
    /// layernorms, drawing from the provided stream.
    pub fn init(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut normal = |shape: Vec<usize>| -> Tensor<E> {
            let numel: usize = shape.iter().product();
            let data = (0..numel)
                .map(|_| E::from_f64(rng.next_normal() * INIT_STD))
                .collect();
            Tensor::new(shape, data).expect("internal shape")
        };
        let tok_emb = normal(vec![cfg.vocab_size, d]);
        let pos_emb = normal(vec![cfg.max_seq_len, d]);
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockParams {
                ln1_g: ones(d),
                ln1_b: Tensor::zeros(vec![d]),
                wq: normal(vec![d, d]),
                wk: normal(vec![d, d]),
                wv: normal(vec![d, d]),
                wo: normal(vec![d, d]),
                ln2_g: ones(d),
                ln2_b: Tensor::zeros(vec![d]),
                fc1: normal(vec![d, cfg.d_ff]),
                fc2: normal(vec![cfg.d_ff, d]),
            })
            .collect();
        let head = if cfg.tie_embed_head {
            None
        } else {
            Some(normal(vec![d, cfg.vocab_size]))
        };
        Ok(TinyTransformer {
            final_ln_g: ones(d),
            final_ln_b: Tensor::zeros(vec![d]),
            cfg,
            tok_emb,
            pos_emb,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn n_layers(&self) -> usize {
        self.cfg.n_layers
    }

    /// All parameter units in canonical update order.
    pub fn units(&self) -> Vec<UnitId> {
        let mut out = vec![UnitId::Embedding];
        out.extend((0..self.cfg.n_layers).map(|i| UnitId::Block(LayerId(i))));
        out.push(UnitId::Head);
        out
    }

    /// Exact scalar count of one block's parameter tensors.
    pub fn param_count(&self, layer: LayerId) -> Result<usize> {
        if layer.0 >= self.cfg.n_layers {
            return Err(CoreError::usage(format!(
                "layer {} out of range for {} layers",
                layer.0, self.cfg.n_layers
            )));
        }
        Ok(self.unit_param_count(UnitId::Block(layer)))
    }

    pub fn unit_param_count(&self, unit: UnitId) -> usize {
        let mut count = 0;
        self.visit_unit_params(unit, |t| count += t.numel());
        count
    }

    pub fn total_param_count(&self) -> usize {
        self.units()
            .into_iter()
            .map(|u| self.unit_param_count(u))
            .sum()
    }

    /// Visits a unit's parameter tensors in their canonical flat order.
    pub fn visit_unit_params(&self, unit: UnitId, mut f: impl FnMut(&Tensor<E>)) {
        match unit {
            UnitId::Embedding => {
                f(&self.tok_emb);
                f(&self.pos_emb);
            }
            UnitId::Block(LayerId(i)) => {
                let b = &self.blocks[i];
                for t in [
                    &b.ln1_g, &b.ln1_b, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2_g, &b.ln2_b, &b.fc1,
                    &b.fc2,
                ] {
                    f(t);
                }
            }
            UnitId::Head => {
                f(&self.final_ln_g);
                f(&self.final_ln_b);
                if let Some(h) = &self.head {
                    f(h);
                }
            }
        }
    }

    pub fn visit_unit_params_mut(&mut self, unit: UnitId, mut f: impl FnMut(&mut Tensor<E>)) {
        match unit {
            UnitId::Embedding => {
                f(&mut self.tok_emb);
                f(&mut self.pos_emb);
            }
            UnitId::Block(LayerId(i)) => {
                let b = &mut self.blocks[i];
                for t in [
                    &mut b.ln1_g,
                    &mut b.ln1_b,
                    &mut b.wq,
                    &mut b.wk,
                    &mut b.wv,
                    &mut b.wo,
                    &mut b.ln2_g,
                    &mut b.ln2_b,
                    &mut b.fc1,
                    &mut b.fc2,
                ] {
                    f(t);
                }
            }
            UnitId::Head => {
                f(&mut self.final_ln_g);
                f(&mut self.final_ln_b);
                if let Some(h) = &mut self.head {
                    f(h);
                }
            }
        }
    }

    /// Concatenated copy of a unit's parameters in flat order.
    pub fn unit_params_flat(&self, unit: UnitId) -> Vec<E> {
        let mut out = Vec::with_capacity(self.unit_param_count(unit));
        self.visit_unit_params(unit, |t| out.extend_from_slice(t.data()));
        out
    }

    /// Overwrites a unit's parameters from a flat vector.
    pub fn set_unit_params_flat(&mut self, unit: UnitId, flat: &[E]) -> Result<()> {
        if flat.len() != self.unit_param_count(unit) {
            return Err(CoreError::usage(format!(
                "flat params for {} want {} scalars, got {}",
                unit.key(),
                self.unit_param_count(unit),
                flat.len()
            )));
        }
        let mut offset = 0;
        self.visit_unit_params_mut(unit, |t| {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        Ok(())
    }

    /// Adds `scale * delta` to a unit's parameters (flat order).
    pub fn add_scaled_to_unit(&mut self, unit: UnitId, delta: &[E], scale: E) -> Result<()> {
        if delta.len() != self.unit_param_count(unit) {
            return Err(CoreError::usage(format!(
                "delta for {} want {} scalars, got {}",
                unit.key(),
                self.unit_param_count(unit),
                delta.len()
            )));
        }
        let mut offset = 0;
        self.visit_unit_params_mut(unit, |t| {
            for v in t.data_mut() {
                *v += scale * delta[offset];
                offset += 1;
            }
        });
        Ok(())
    }

    /// Named tensors in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out: Vec<(String, &Tensor<E>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in [
                ("ln1_g", &b.ln1_g),
                ("ln1_b", &b.ln1_b),
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("ln2_g", &b.ln2_g),
                ("ln2_b", &b.ln2_b),
                ("fc1", &b.fc1),
                ("fc2", &b.fc2),
            ] {
                out.push((format!("block.{i}.{name}"), t));
            }
        }
        out.push(("final_ln_g".into(), &self.final_ln_g));
        out.push(("final_ln_b".into(), &self.final_ln_b));
        if let Some(h) = &self.head {
            out.push(("head".into(), h));
        }
        out
    }

    /// Overwrites one named tensor, validating its shape.
    pub fn set_named_tensor(&mut self, name: &str, data: &[E]) -> Result<()> {
        let mut found = false;
        let mut bad_len = None;
        self.visit_all_params_mut(|n, t| {
            if n == name {
                found = true;
                if t.numel() == data.len() {
                    t.data_mut().copy_from_slice(data);
                } else {
                    bad_len = Some(t.numel());
                }
            }
        });
        if let Some(want) = bad_len {
            return Err(CoreError::usage(format!(
                "tensor {name} wants {want} scalars, got {}",
                data.len()
            )));
        }
        if !found {
            return Err(CoreError::usage(format!("unknown tensor {name}")));
        }
        Ok(())
    }

    fn visit_all_params_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<E>)) {
        f("tok_emb", &mut self.tok_emb);
        f("pos_emb", &mut self.pos_emb);
        for i in 0..self.blocks.len() {
            let b = &mut self.blocks[i];
            for (name, t) in [
                ("ln1_g", &mut b.ln1_g),
                ("ln1_b", &mut b.ln1_b),
                ("wq", &mut b.wq),
                ("wk", &mut b.wk),
                ("wv", &mut b.wv),
                ("wo", &mut b.wo),
                ("ln2_g", &mut b.ln2_g),
                ("ln2_b", &mut b.ln2_b),
                ("fc1", &mut b.fc1),
                ("fc2", &mut b.fc2),
            ] {
                f(&format!("block.{i}.{name}"), t);
            }
        }
        f("final_ln_g", &mut self.final_ln_g);
        f("final_ln_b", &mut self.final_ln_b);
        if let Some(h) = &mut self.head {
            f("head", h);
        }
    }

    fn leaf(
        tape: &mut Tape<E>,
        tensor: &Tensor<E>,
        trainable: bool,
    ) -> Result<ValueId> {
        let mut t = tensor.clone();
        t.set_requires_grad(trainable);
        tape.leaf(t)
    }

    /// Runs the model on a batch and returns the mean cross-entropy over
    /// non-padded positions, with the graph retained for a backward pass.
    /// The freeze mask decides which parameters are registered as
    /// differentiable; it never changes the forward result.
    pub fn forward_loss(&self, batch: &TokenBatch, mask: &FreezeMask) -> Result<ForwardPass<E>> {
        if mask.trainable.len() != self.cfg.n_layers {
            return Err(CoreError::usage(format!(
                "freeze mask covers {} layers, model has {}",
                mask.trainable.len(),
                self.cfg.n_layers
            )));
        }
        if batch.seq > self.cfg.max_seq_len {
            return Err(CoreError::usage(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq, self.cfg.max_seq_len
            )));
        }
        let (bsz, seq, d) = (batch.batch, batch.seq, self.cfg.d_model);
        let n_heads = self.cfg.n_heads;
        let d_head = d / n_heads;
        let mut tape = Tape::new();

        let tok_emb = Self::leaf(&mut tape, &self.tok_emb, mask.embed)?;
        let pos_emb = Self::leaf(&mut tape, &self.pos_emb, mask.embed)?;
        let mut block_ids = Vec::with_capacity(self.cfg.n_layers);
        for (i, b) in self.blocks.iter().enumerate() {
            let t = mask.is_block_trainable(LayerId(i));
            block_ids.push(BlockLeafIds {
                ln1_g: Self::leaf(&mut tape, &b.ln1_g, t)?,
                ln1_b: Self::leaf(&mut tape, &b.ln1_b, t)?,
                wq: Self::leaf(&mut tape, &b.wq, t)?,
                wk: Self::leaf(&mut tape, &b.wk, t)?,
                wv: Self::leaf(&mut tape, &b.wv, t)?,
                wo: Self::leaf(&mut tape, &b.wo, t)?,
                ln2_g: Self::leaf(&mut tape, &b.ln2_g, t)?,
                ln2_b: Self::leaf(&mut tape, &b.ln2_b, t)?,
                fc1: Self::leaf(&mut tape, &b.fc1, t)?,
                fc2: Self::leaf(&mut tape, &b.fc2, t)?,
            });
        }
        let final_ln_g = Self::leaf(&mut tape, &self.final_ln_g, mask.head)?;
        let final_ln_b = Self::leaf(&mut tape, &self.final_ln_b, mask.head)?;
        let head = match &self.head {
            Some(h) => Some(Self::leaf(&mut tape, h, mask.head)?),
            None => None,
        };

        // Token + learned positional embeddings.
        let tok = tape.embedding(tok_emb, &batch.inputs, &[bsz, seq])?;
        let positions: Vec<u32> = (0..seq as u32).collect();
        let pos = tape.embedding(pos_emb, &positions, &[seq])?;
        let mut x = tape.add_bias(tok, pos)?;

        let attn_scale = 1.0 / libm::sqrt(d_head as f64);
        for ids in &block_ids {
            // Attention with pre-norm and residual.
            let h = tape.layernorm(x, ids.ln1_g, ids.ln1_b)?;
            let q = tape.matmul(h, ids.wq)?;
            let k = tape.matmul(h, ids.wk)?;
            let v = tape.matmul(h, ids.wv)?;
            let split = |tape: &mut Tape<E>, t: ValueId| -> Result<ValueId> {
                let r = tape.reshape(t, &[bsz, seq, n_heads, d_head])?;
                tape.permute(r, &[0, 2, 1, 3])
            };
            let qh = split(&mut tape, q)?;
            let kh = split(&mut tape, k)?;
            let vh = split(&mut tape, v)?;
            let kt = tape.transpose_last2(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, attn_scale)?;
            let att = tape.causal_softmax(scaled, self.cfg.attn_window)?;
            let ctx = tape.matmul(att, vh)?;
            let merged = tape.permute(ctx, &[0, 2, 1, 3])?;
            let flat = tape.reshape(merged, &[bsz, seq, d])?;
            let proj = tape.matmul(flat, ids.wo)?;
            x = tape.add(x, proj)?;

            // MLP with pre-norm and residual.
            let h2 = tape.layernorm(x, ids.ln2_g, ids.ln2_b)?;
            let up = tape.matmul(h2, ids.fc1)?;
            let act = tape.gelu(up)?;
            let down = tape.matmul(act, ids.fc2)?;
            x = tape.add(x, down)?;
        }

        let final_h = tape.layernorm(x, final_ln_g, final_ln_b)?;
        let logits = match head {
            Some(h) => tape.matmul(final_h, h)?,
            None => {
                let t = tape.transpose_last2(tok_emb)?;
                tape.matmul(final_h, t)?
            }
        };
        let loss = tape.cross_entropy(logits, &batch.targets)?;

        Ok(ForwardPass {
            tape,
            loss,
            tok_emb,
            pos_emb,
            blocks: block_ids,
            final_ln_g,
            final_ln_b,
            head,
            mask: mask.clone(),
        })
    }

    /// Forward without gradient bookkeeping; returns the scalar loss.
    pub fn eval_loss(&self, batch: &TokenBatch) -> Result<f64> {
        let mask = FreezeMask::all_frozen(self.cfg.n_layers);
        Ok(self.forward_loss(batch, &mask)?.loss())
    }

    /// Backward sweep collecting one flat gradient snapshot per trainable
    /// unit, in canonical order (embedding, blocks ascending, head).
    /// Frozen blocks pass activation gradients through but contribute no
    /// snapshot, and no parameter-gradient storage is allocated for them.
    pub fn backward_collect(&self, pass: &ForwardPass<E>) -> Result<Vec<LayerGrads<E>>> {
        let mut grads = pass.tape.backward(pass.loss)?;
        let mut out = Vec::new();
        let take_flat = |grads: &mut Gradients<E>, ids: &[ValueId]| -> Option<Vec<E>> {
            let mut flat = Vec::new();
            for &id in ids {
                flat.extend(grads.take(id)?);
            }
            Some(flat)
        };
        if pass.mask.embed {
            let flat = take_flat(&mut grads, &[pass.tok_emb, pass.pos_emb])
                .ok_or_else(|| CoreError::usage("missing embedding gradients"))?;
            out.push(LayerGrads::new(UnitId::Embedding, flat)?);
        }
        for (i, ids) in pass.blocks.iter().enumerate() {
            let layer = LayerId(i);
            if !pass.mask.is_block_trainable(layer) {
                continue;
            }
            let flat = take_flat(&mut grads, &ids.in_order())
                .ok_or_else(|| CoreError::usage(format!("missing gradients for block {i}")))?;
            out.push(LayerGrads::new(UnitId::Block(layer), flat)?);
        }
        if pass.mask.head {
            let mut ids = vec![pass.final_ln_g, pass.final_ln_b];
            if let Some(h) = pass.head {
                ids.push(h);
            }
            let flat = take_flat(&mut grads, &ids)
                .ok_or_else(|| CoreError::usage("missing head gradients"))?;
            out.push(LayerGrads::new(UnitId::Head, flat)?);
        }
        Ok(out)
    }
}

fn ones<E: Element>(d: usize) -> Tensor<E> {
    Tensor::new(vec![d], vec![E::ONE; d]).expect("internal shape")
}
