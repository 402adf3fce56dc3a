//! Autodiff vs central finite differences, op by op and end to end.
//!
//! Every differentiable op is exercised on a batch of random small
//! instances; the analytic gradient must match the finite-difference
//! oracle to within 1e-6 relative in 64-bit.

use grass_core::gradcheck::{finite_difference_gradient, max_relative_error};
use grass_core::model::{FreezeMask, ModelConfig, TinyTransformer, TokenBatch, UnitId};
use grass_core::rng::Rng;
use grass_core::tape::{Tape, ValueId};
use grass_core::tensor::Tensor;

const FD_STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-6;

fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.next_normal() * 0.8).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Checks d(scalar build(theta))/d(theta) against finite differences.
fn check_gradient<F>(name: &str, theta: &Tensor<f64>, build: F)
where
    F: Fn(&mut Tape<f64>, ValueId) -> ValueId,
{
    let mut tape = Tape::new();
    let id = tape.leaf(theta.clone().with_grad()).unwrap();
    let loss = build(&mut tape, id);
    let grads = tape.backward(loss).unwrap();
    let analytic = grads.get(id).expect("parameter gradient");

    let estimate = finite_difference_gradient(
        |t: &Tensor<f64>| {
            let mut tape = Tape::new();
            let id = tape.leaf(t.clone()).unwrap();
            let loss = build(&mut tape, id);
            tape.value(loss).item()
        },
        theta,
        FD_STEP,
    )
    .unwrap();

    let err = max_relative_error(analytic, estimate.data());
    assert!(err < TOLERANCE, "{name}: max relative error {err}");
}

/// Reduces any tensor to a scalar with fixed pseudo-random weights so
/// the full jacobian is exercised, not just the row sums.
fn weighted_sum(tape: &mut Tape<f64>, x: ValueId, seed: u64) -> ValueId {
    let shape = tape.value(x).shape().to_vec();
    let mut wrng = Rng::new(seed);
    let w = random_tensor(&mut wrng, &shape);
    let w = tape.constant(w).unwrap();
    let prod = tape.mul(x, w).unwrap();
    tape.sum(prod).unwrap()
}

#[test]
fn elementwise_and_scale_ops_match_finite_differences() {
    let mut rng = Rng::new(101);
    for trial in 0..8 {
        let theta = random_tensor(&mut rng, &[3, 4]);
        let other = random_tensor(&mut rng, &[3, 4]);
        check_gradient("add", &theta, |tape, id| {
            let o = tape.constant(other.clone()).unwrap();
            let y = tape.add(id, o).unwrap();
            weighted_sum(tape, y, 500 + trial)
        });
        check_gradient("mul", &theta, |tape, id| {
            let o = tape.constant(other.clone()).unwrap();
            let y = tape.mul(id, o).unwrap();
            weighted_sum(tape, y, 510 + trial)
        });
        check_gradient("scale", &theta, |tape, id| {
            let y = tape.scale(id, -1.7).unwrap();
            weighted_sum(tape, y, 520 + trial)
        });
        check_gradient("gelu", &theta, |tape, id| {
            let y = tape.gelu(id).unwrap();
            weighted_sum(tape, y, 530 + trial)
        });
    }
}

#[test]
fn matmul_matches_finite_differences() {
    let mut rng = Rng::new(102);
    for trial in 0..6 {
        // Broadcast rhs over a batched lhs.
        let lhs = random_tensor(&mut rng, &[2, 3, 4]);
        let rhs = random_tensor(&mut rng, &[4, 5]);
        check_gradient("matmul lhs", &lhs, |tape, id| {
            let r = tape.constant(rhs.clone()).unwrap();
            let y = tape.matmul(id, r).unwrap();
            weighted_sum(tape, y, 600 + trial)
        });
        check_gradient("matmul rhs broadcast", &rhs, |tape, id| {
            let l = tape.constant(lhs.clone()).unwrap();
            let y = tape.matmul(l, id).unwrap();
            weighted_sum(tape, y, 610 + trial)
        });
        // Fully batched product.
        let brhs = random_tensor(&mut rng, &[2, 4, 3]);
        check_gradient("matmul rhs batched", &brhs, |tape, id| {
            let l = tape.constant(lhs.clone()).unwrap();
            let y = tape.matmul(l, id).unwrap();
            weighted_sum(tape, y, 620 + trial)
        });
    }
}

#[test]
fn bias_and_norm_ops_match_finite_differences() {
    let mut rng = Rng::new(103);
    for trial in 0..6 {
        let x = random_tensor(&mut rng, &[2, 3, 5]);
        let bias = random_tensor(&mut rng, &[3, 5]);
        check_gradient("add_bias input", &x, |tape, id| {
            let b = tape.constant(bias.clone()).unwrap();
            let y = tape.add_bias(id, b).unwrap();
            weighted_sum(tape, y, 700 + trial)
        });
        check_gradient("add_bias bias", &bias, |tape, id| {
            let xv = tape.constant(x.clone()).unwrap();
            let y = tape.add_bias(xv, id).unwrap();
            weighted_sum(tape, y, 710 + trial)
        });
        let gamma = random_tensor(&mut rng, &[5]);
        let beta = random_tensor(&mut rng, &[5]);
        check_gradient("layernorm input", &x, |tape, id| {
            let g = tape.constant(gamma.clone()).unwrap();
            let b = tape.constant(beta.clone()).unwrap();
            let y = tape.layernorm(id, g, b).unwrap();
            weighted_sum(tape, y, 720 + trial)
        });
        check_gradient("layernorm gamma", &gamma, |tape, id| {
            let xv = tape.constant(x.clone()).unwrap();
            let b = tape.constant(beta.clone()).unwrap();
            let y = tape.layernorm(xv, id, b).unwrap();
            weighted_sum(tape, y, 730 + trial)
        });
        check_gradient("layernorm beta", &beta, |tape, id| {
            let xv = tape.constant(x.clone()).unwrap();
            let g = tape.constant(gamma.clone()).unwrap();
            let y = tape.layernorm(xv, g, id).unwrap();
            weighted_sum(tape, y, 740 + trial)
        });
    }
}

#[test]
fn softmax_family_matches_finite_differences() {
    let mut rng = Rng::new(104);
    for trial in 0..6 {
        let x = random_tensor(&mut rng, &[2, 4]);
        check_gradient("softmax", &x, |tape, id| {
            let y = tape.softmax(id).unwrap();
            weighted_sum(tape, y, 800 + trial)
        });
        let scores = random_tensor(&mut rng, &[2, 5, 5]);
        check_gradient("causal_softmax", &scores, |tape, id| {
            let y = tape.causal_softmax(id, None).unwrap();
            weighted_sum(tape, y, 810 + trial)
        });
        check_gradient("windowed_softmax", &scores, |tape, id| {
            let y = tape.causal_softmax(id, Some(2)).unwrap();
            weighted_sum(tape, y, 820 + trial)
        });
        let logits = random_tensor(&mut rng, &[3, 6]);
        check_gradient("cross_entropy", &logits, |tape, id| {
            tape.cross_entropy(id, &[2, -1, 5]).unwrap()
        });
    }
}

#[test]
fn embedding_and_shape_ops_match_finite_differences() {
    let mut rng = Rng::new(105);
    for trial in 0..6 {
        let table = random_tensor(&mut rng, &[7, 3]);
        // Repeated ids exercise gradient accumulation into one row.
        check_gradient("embedding", &table, |tape, id| {
            let y = tape.embedding(id, &[1, 4, 1, 6], &[2, 2]).unwrap();
            weighted_sum(tape, y, 900 + trial)
        });
        let x = random_tensor(&mut rng, &[2, 3, 4]);
        check_gradient("transpose_last2", &x, |tape, id| {
            let y = tape.transpose_last2(id).unwrap();
            weighted_sum(tape, y, 910 + trial)
        });
        check_gradient("permute", &x, |tape, id| {
            let y = tape.permute(id, &[2, 0, 1]).unwrap();
            weighted_sum(tape, y, 920 + trial)
        });
        check_gradient("reshape", &x, |tape, id| {
            let y = tape.reshape(id, &[6, 4]).unwrap();
            weighted_sum(tape, y, 930 + trial)
        });
    }
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    // Composition check: x @ W1 -> gelu -> @ W2 -> cross-entropy.
    let mut rng = Rng::new(106);
    for trial in 0..4 {
        let x = random_tensor(&mut rng, &[3, 4]);
        let w1 = random_tensor(&mut rng, &[4, 8]);
        let w2 = random_tensor(&mut rng, &[8, 5]);
        let targets = [1i64, 4, 0];
        check_gradient("mlp w1", &w1, |tape, id| {
            let xv = tape.constant(x.clone()).unwrap();
            let w2v = tape.constant(w2.clone()).unwrap();
            let h = tape.matmul(xv, id).unwrap();
            let a = tape.gelu(h).unwrap();
            let logits = tape.matmul(a, w2v).unwrap();
            tape.cross_entropy(logits, &targets).unwrap()
        });
        check_gradient("mlp w2", &w2, |tape, id| {
            let xv = tape.constant(x.clone()).unwrap();
            let w1v = tape.constant(w1.clone()).unwrap();
            let h = tape.matmul(xv, w1v).unwrap();
            let a = tape.gelu(h).unwrap();
            let logits = tape.matmul(a, id).unwrap();
            tape.cross_entropy(logits, &targets).unwrap()
        });
        let _ = trial;
    }
}

/// Central difference of the batch loss along one parameter coordinate.
fn loss_central_diff(
    model: &TinyTransformer<f64>,
    batch: &TokenBatch,
    unit: UnitId,
    flat: &mut [f64],
    coord: usize,
    h: f64,
) -> f64 {
    let orig = flat[coord];
    let mut eval_at = |value: f64| -> f64 {
        flat[coord] = value;
        let mut probe = model.clone();
        probe.set_unit_params_flat(unit, flat).unwrap();
        probe.eval_loss(batch).unwrap()
    };
    let up = eval_at(orig + h);
    let down = eval_at(orig - h);
    flat[coord] = orig;
    (up - down) / (2.0 * h)
}

/// Richardson combination of two central differences: fourth-order
/// accurate, which keeps truncation error below the 1e-6 bar on large
/// coordinates while a larger base step keeps rounding noise down.
fn loss_richardson_diff(
    model: &TinyTransformer<f64>,
    batch: &TokenBatch,
    unit: UnitId,
    flat: &mut [f64],
    coord: usize,
    h: f64,
) -> f64 {
    let coarse = loss_central_diff(model, batch, unit, flat, coord, h);
    let fine = loss_central_diff(model, batch, unit, flat, coord, h / 2.0);
    (4.0 * fine - coarse) / 3.0
}

#[test]
fn transformer_loss_gradient_spot_check() {
    // Full-model check on a handful of coordinates per unit; the
    // acceptance suite runs the 100-coordinate version. The relative
    // error denominator is floored at 1e-4 of the unit's largest
    // gradient: below that the finite-difference oracle only measures
    // its own f64 rounding noise (~1e-12 absolute).
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 11,
        max_seq_len: 6,
        attn_window: Some(3),
        tie_embed_head: false,
    };
    let mut rng = Rng::new(107);
    let model = TinyTransformer::<f64>::init(cfg.clone(), &mut rng).unwrap();
    let inputs: Vec<u32> = (0..12).map(|_| rng.next_below(11) as u32).collect();
    let targets: Vec<i64> = inputs.iter().map(|&t| ((t + 1) % 11) as i64).collect();
    let batch = TokenBatch::new(inputs, targets, 2, 6).unwrap();

    let mask = FreezeMask::all_trainable(2);
    let pass = model.forward_loss(&batch, &mask).unwrap();
    let grads = model.backward_collect(&pass).unwrap();

    let mut worst = 0.0f64;
    for layer_grads in &grads {
        let unit: UnitId = layer_grads.unit;
        let mut flat = model.unit_params_flat(unit);
        let gmax = layer_grads
            .flat
            .iter()
            .fold(0.0f64, |acc, g| acc.max(g.abs()));
        for _ in 0..6 {
            let coord = (rng.next_below(flat.len() as u64)) as usize;
            let estimate = loss_richardson_diff(&model, &batch, unit, &mut flat, coord, 1e-3);
            let analytic = layer_grads.flat[coord];
            let denom = analytic.abs().max(estimate.abs()).max(1e-4 * gmax);
            worst = worst.max((analytic - estimate).abs() / denom);
        }
    }
    assert!(worst < TOLERANCE, "worst relative error {worst}");
}
