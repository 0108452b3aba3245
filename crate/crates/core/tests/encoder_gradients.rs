//! Analytic MLM gradients against central finite differences.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wordprobe::encoder::{Encoder, MaskedSequence, ModelConfig};

const STEP: f64 = 1e-3;

fn analytic(model: &Encoder<f64>, masked: &MaskedSequence) -> Vec<f64> {
    let mut g = vec![0.0; model.param_count()];
    model.mlm_sentence_grad(masked, None, &mut g).unwrap();
    let n = masked.positions.len() as f64;
    g.iter().map(|x| x / n).collect()
}

fn loss(model: &Encoder<f64>, masked: &MaskedSequence) -> f64 {
    model.mlm_loss(&masked.input_ids, &masked.positions, &masked.original_ids).unwrap()
}

/// Returns the worst relative error over `indices`.
fn worst_relative_error(model: &Encoder<f64>, masked: &MaskedSequence, indices: &[usize], step: f64) -> f64 {
    let grads = analytic(model, masked);
    let mut worst: f64 = 0.0;
    for &i in indices {
        let mut plus = model.clone();
        plus.params_mut()[i] += step;
        let mut minus = model.clone();
        minus.params_mut()[i] -= step;
        let numeric = (loss(&plus, masked) - loss(&minus, masked)) / (2.0 * step);
        let diff = (grads[i] - numeric).abs();
        let scale = grads[i].abs().max(numeric.abs());
        // gradients this small are at the rounding floor of the difference
        if scale >= 1e-8 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

fn sample_indices(total: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let k = ((total as f64 * fraction).ceil() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, total, k).into_vec();
    idx.sort_unstable();
    idx
}

#[test]
fn one_layer_two_heads_width_eight() {
    let cfg = ModelConfig { layers: 1, heads: 2, dim: 8, vocab_size: 12, max_len: 8, dropout: 0.0, seed: 17 };
    let model = Encoder::<f64>::new(cfg).unwrap();
    // n = 5: [CLS] c c c [SEP] with two masked characters
    let masked = MaskedSequence { input_ids: vec![2, 7, 4, 9, 3], positions: vec![1, 2], original_ids: vec![7, 11] };
    let idx = sample_indices(model.param_count(), 0.01, 1);
    let worst = worst_relative_error(&model, &masked, &idx, STEP);
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn every_parameter_of_a_small_model() {
    let cfg = ModelConfig { layers: 2, heads: 2, dim: 4, vocab_size: 8, max_len: 6, dropout: 0.0, seed: 3 };
    let mut model = Encoder::<f64>::new(cfg).unwrap();
    // larger weights make every path (softmax, GELU, layer norm) non-trivial;
    // the curvature grows with them, so the difference step shrinks
    for p in model.params_mut() {
        *p *= 10.0;
    }
    let masked =
        MaskedSequence { input_ids: vec![2, 5, 4, 6, 3], positions: vec![1, 2, 3], original_ids: vec![5, 7, 6] };
    let all: Vec<usize> = (0..model.param_count()).collect();
    let worst = worst_relative_error(&model, &masked, &all, STEP / 100.0);
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn segment_embeddings_receive_gradient_for_pairs() {
    let cfg = ModelConfig { layers: 1, heads: 1, dim: 4, vocab_size: 8, max_len: 8, dropout: 0.0, seed: 4 };
    let model = Encoder::<f64>::new(cfg).unwrap();
    let masked = MaskedSequence { input_ids: vec![2, 5, 3, 6, 3], positions: vec![3], original_ids: vec![6] };
    let mut g = vec![0.0; model.param_count()];
    // segment ids are all zero through mlm_sentence_grad, so row 1 stays zero
    model.mlm_sentence_grad(&masked, None, &mut g).unwrap();
    let seg = model.layout().seg_emb;
    assert!(g[seg.range()][..4].iter().any(|&x| x != 0.0));
    assert!(g[seg.range()][4..].iter().all(|&x| x == 0.0));
}
