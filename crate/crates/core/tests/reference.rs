mod support;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::oracle::{brute_keep_count, brute_mask, brute_topk, reference_forward, tiny_configs};
use vitprune_core::engine::{Ffn2Mode, RunOptions};
use vitprune_core::model::synth_input;
use vitprune_core::pruning::{
    ffn2_accumulate_and_mask, keep_count, topk_select, ClassAttentionScores,
};
use vitprune_core::{Engine, Model, Registry};

const CONFIGS: usize = 128;

#[test]
fn engine_matches_float_reference() {
    let reg = Registry::builtin();
    let mut worst = 0i32;
    let (mut pruned, mut skipped) = (0, 0);
    for (i, (cfg, seed)) in tiny_configs(CONFIGS, 0x5eed).into_iter().enumerate() {
        let model = Model::synthesize(&cfg, seed, &reg).unwrap();
        let x = synth_input(&cfg, seed);
        let got = Engine::new(&model, &reg).unwrap().run(&x).unwrap();
        let want = reference_forward(&model, &x);
        assert_eq!(got.token_origin, want.origin, "config {i}");
        for (t, (kept, mask)) in got
            .traces
            .iter()
            .zip(want.kept_tokens.iter().zip(&want.masks))
        {
            assert_eq!(&t.kept_tokens, kept, "config {i} layer {}", t.layer_index);
            assert_eq!(&t.ffn2_mask, mask, "config {i} layer {}", t.layer_index);
        }
        for (a, b) in got.tokens.data().iter().zip(&want.tokens) {
            worst = worst.max((*a as i32 - *b as i32).abs());
        }
        assert!(worst <= 3, "config {i}: {worst} LSB");
        pruned += usize::from(got.token_origin.len() < cfg.num_tokens);
        skipped += got
            .traces
            .iter()
            .filter(|t| t.ffn2_kept_dims < cfg.ffn_dim)
            .count();
    }
    assert!(
        pruned > 20 && skipped > 20,
        "{pruned} pruned runs, {skipped} layers with skips"
    );
}

#[test]
fn skipping_equals_dense_zeroed() {
    let reg = Registry::builtin();
    for (i, (cfg, seed)) in tiny_configs(CONFIGS, 0xd15c).into_iter().enumerate() {
        let model = Model::synthesize(&cfg, seed, &reg).unwrap();
        let x = synth_input(&cfg, seed);
        let run = |mode| {
            let opts = RunOptions {
                ffn2_mode: mode,
                keep_layer_outputs: true,
            };
            Engine::new(&model, &reg)
                .unwrap()
                .with_options(opts)
                .run(&x)
                .unwrap()
        };
        assert_eq!(
            run(Ffn2Mode::Skip),
            run(Ffn2Mode::DenseZeroed),
            "config {i}"
        );
    }
}

#[test]
fn topk_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let n = rng.random_range(2..=24usize);
        let rho = [0.1, 0.25, 0.5, 2.0 / 3.0, 0.7, 1.0][rng.random_range(0..6)];
        // coarse scores force ties
        let scores: Vec<f64> = (0..n - 1)
            .map(|_| rng.random_range(0..6) as f64 / 8.0)
            .collect();
        let s = ClassAttentionScores {
            scores: scores.clone(),
            source_layer: 1,
        };
        let got = topk_select(&s, rho, n).unwrap();
        assert_eq!(got.k, brute_keep_count(n, rho));
        assert_eq!(keep_count(n, rho), got.k);
        assert_eq!(got.kept_indices, brute_topk(&scores, got.k));
    }
}

#[test]
fn ffn2_mask_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..500 {
        let rows = rng.random_range(1..=8usize);
        let cols = rng.random_range(1..=32usize);
        // dyadic values keep every column sum exact, so equality with the
        // threshold is exercised
        let post: Vec<f64> = (0..rows * cols)
            .map(|_| rng.random_range(0..4) as f64 / 4.0)
            .collect();
        let theta = rng.random_range(0..12) as f64 / 4.0;
        let got = ffn2_accumulate_and_mask(&post, rows, cols, theta).unwrap();
        assert_eq!(got.mask, brute_mask(&post, rows, cols, theta));
    }
}
