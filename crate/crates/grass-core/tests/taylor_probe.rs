//! First-order consistency of the gradient signal the sampler feeds on:
//! for a small step along the negative gradient, the realized loss
//! change must match the inner product predicted by the linearization.

use grass_core::model::{FreezeMask, ModelConfig, TinyTransformer, TokenBatch};
use grass_core::rng::Rng;

#[test]
fn loss_change_matches_gradient_inner_product() {
    let eta = 1e-6;
    let mut rng = Rng::new(2025);
    for instance in 0..20 {
        let cfg = ModelConfig {
            n_layers: 1 + (instance % 3),
            d_model: 8,
            n_heads: if instance % 2 == 0 { 2 } else { 4 },
            d_ff: 16,
            vocab_size: 13,
            max_seq_len: 6,
            attn_window: if instance % 5 == 0 { Some(2) } else { None },
            tie_embed_head: instance % 4 == 3,
        };
        let mut model = TinyTransformer::<f64>::init(cfg.clone(), &mut rng).unwrap();
        let inputs: Vec<u32> = (0..10)
            .map(|_| rng.next_below(cfg.vocab_size as u64) as u32)
            .collect();
        let targets: Vec<i64> = inputs
            .iter()
            .map(|&t| (t as i64 + 3) % cfg.vocab_size as i64)
            .collect();
        let batch = TokenBatch::new(inputs, targets, 2, 5).unwrap();

        let mask = FreezeMask::all_trainable(cfg.n_layers);
        let pass = model.forward_loss(&batch, &mask).unwrap();
        let loss_before = pass.loss();
        let grads = model.backward_collect(&pass).unwrap();

        // Apply theta -= eta * g and predict dL = <g, dtheta> = -eta |g|^2.
        let mut predicted = 0.0;
        for g in &grads {
            let norm_sq: f64 = g.flat.iter().map(|&x| x * x).sum();
            predicted -= eta * norm_sq;
            model
                .add_scaled_to_unit(g.unit, &g.flat, -eta)
                .unwrap();
        }
        let loss_after = model.eval_loss(&batch).unwrap();
        let realized = loss_after - loss_before;
        let rel = (realized - predicted).abs() / predicted.abs();
        assert!(
            rel < 0.01,
            "instance {instance}: realized {realized:e} vs predicted {predicted:e} (rel {rel})"
        );
    }
}
