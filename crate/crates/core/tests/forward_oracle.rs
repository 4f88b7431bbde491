// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::collections::BTreeMap;

use common::reference::{erf_series, reference_forward, scaled_err};
use common::*;
use typolens::container::{Metadata, TensorMap};
use typolens::vit::{self, BlockWeights, CaptureFlags, InterventionSpec, ModelConfig, VitWeights};
use typolens::{Error, Tensor};

#[test]
fn erf_series_reference_points() {
    // erf(0.5), erf(1), erf(2) from standard tables
    assert!((erf_series(0.5) - 0.520_499_877_813_046_5).abs() < 1e-13);
    assert!((erf_series(1.0) - 0.842_700_792_949_714_9).abs() < 1e-13);
    assert!((erf_series(2.0) - 0.995_322_265_018_952_7).abs() < 1e-12);
}

#[test]
fn engine_matches_naive_reference_on_random_tiny_models() {
    let start = std::time::Instant::now();
    let mut r = rng(7);
    use rand::Rng;
    for case in 0..20u64 {
        let layers = r.random_range(1..=3);
        let heads = [1, 2, 4][r.random_range(0..3)];
        let width = heads * r.random_range(1..=32 / heads);
        let grid = r.random_range(1..=3);
        let patch = r.random_range(1..=3);
        let cfg = config(layers, heads, width.max(heads), grid, patch);
        assert!(cfg.tokens <= 16 && cfg.width <= 32 && cfg.layers <= 3);
        let w = random_weights(cfg, 100 + case);
        let img = random_image(&cfg, 200 + case);
        let reference = reference_forward(&w, &img);
        let trace = w.forward(&img, &InterventionSpec::none(), CaptureFlags::all()).unwrap();
        for l in 0..layers {
            let att = trace.attention(l).unwrap();
            let flat: Vec<f64> = reference.attention[l].iter().flatten().flatten().copied().collect();
            let e = scaled_err(att.data(), &flat);
            assert!(e < 1e-5, "case {case} layer {l} attention err {e}");
            let res = trace.residual_post_block(l).unwrap();
            let flat: Vec<f64> = reference.residual[l].iter().flatten().copied().collect();
            let e = scaled_err(res.data(), &flat);
            assert!(e < 1e-5, "case {case} layer {l} residual err {e}");
        }
        let e = scaled_err(&trace.final_ln_cls, &reference.final_ln);
        assert!(e < 1e-5, "case {case} final ln err {e}");
        let e = scaled_err(&trace.final_cls_embedding, &reference.embedding);
        assert!(e < 1e-5, "case {case} embedding err {e}");
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

/// One layer, one head, width 2, one 1x1 patch: two tokens.
///
/// Worksheet:
/// - Q/K are zero, so both attention rows are `[1/2, 1/2]`.
/// - cls = `[1, 0]`; the patch token is the pixel sum `3` on both
///   coordinates plus positional row `[0, 2]`, giving `[3, 5]`.
/// - LN of `[a, b]` is `[−δ, δ]/sqrt(δ² + ε)` with `δ = (b − a)/2`.
/// - V and out are the identity and the MLP is zero, so the cls row after
///   the block is `cls + (ln(cls) + ln(patch))/2`.
#[test]
fn hand_worksheet_two_tokens() {
    let cfg = ModelConfig {
        layers: 1,
        heads: 1,
        width: 2,
        patch_size: 1,
        image_size: 1,
        tokens: 1,
        embed_dim: 2,
        logit_scale: 100.0,
    };
    let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let mut block = BlockWeights::zeros(2);
    block.v_weight = eye.clone();
    block.out_weight = eye.clone();
    let w = VitWeights {
        config: cfg,
        cls_token: Tensor::new(vec![2], vec![1.0, 0.0]).unwrap(),
        pos_embed: Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 2.0]).unwrap(),
        patch_weight: Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap(),
        patch_bias: Tensor::zeros(vec![2]),
        blocks: vec![block],
        ln_final_weight: Tensor::new(vec![2], vec![1.0, 1.0]).unwrap(),
        ln_final_bias: Tensor::zeros(vec![2]),
        proj: eye,
    };
    let img = Tensor::new(vec![3, 1, 1], vec![1.0, 1.0, 1.0]).unwrap();
    let trace = w.forward(&img, &InterventionSpec::none(), CaptureFlags::all()).unwrap();
    assert_eq!(trace.attention(0).unwrap().data(), &[0.5, 0.5, 0.5, 0.5]);

    // ln([a, b]) = [−δ, δ]/sqrt(δ² + ε) with δ = (b − a)/2
    let s = |delta: f64| delta / (delta * delta + 1e-5).sqrt();
    let s_cls = s(-0.5); // cls [1, 0]
    let s_patch = s(1.0); // patch [3, 5]
    let mix = 0.5 * (s_cls + s_patch);
    let cls_after = [1.0 - mix, mix];
    let got = trace.residual_post_block(0).unwrap().row(0).to_vec();
    for (g, e) in got.iter().zip(cls_after) {
        assert!((f64::from(*g) - e).abs() < 1e-6, "{got:?} vs {cls_after:?}");
    }
    // projection is the identity, so the embedding is the final LN output
    assert_eq!(trace.final_cls_embedding, trace.final_ln_cls);
}

#[test]
fn forward_is_deterministic_and_batch_matches_single() {
    let cfg = config(2, 2, 8, 3, 2);
    let w = random_weights(cfg, 1);
    let imgs: Vec<Tensor> = (0..6).map(|i| random_image(&cfg, i)).collect();
    let batch = w.forward_batch(&imgs, &InterventionSpec::none(), CaptureFlags::all()).unwrap();
    for (img, t) in imgs.iter().zip(&batch) {
        let single = w.forward(img, &InterventionSpec::none(), CaptureFlags::all()).unwrap();
        assert_eq!(&single, t);
    }
}

#[test]
fn save_load_round_trip_is_bit_exact() {
    let cfg = config(2, 4, 16, 2, 2);
    let w = random_weights(cfg, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    w.save(&path).unwrap();
    let back = vit::load_weights(&path).unwrap();
    assert_eq!(back, w);
    assert_eq!(back.model_hash(), w.model_hash());
}

#[test]
fn loader_rejects_missing_and_misshapen_tensors() {
    let w = random_weights(config(1, 2, 8, 2, 2), 4);
    let (map, meta) = w.to_tensors();

    let mut missing: TensorMap = map.clone();
    missing.remove("blocks.0.attn.v.weight");
    assert!(matches!(
        VitWeights::from_tensors(missing, &meta),
        Err(Error::MissingTensor(name)) if name == "blocks.0.attn.v.weight"
    ));

    let mut bad = map.clone();
    bad.insert("blocks.0.attn.q.weight".into(), Tensor::zeros(vec![8, 7]));
    assert!(matches!(
        VitWeights::from_tensors(bad, &meta),
        Err(Error::TensorShape { .. })
    ));

    let mut nan = map;
    let mut t = Tensor::zeros(vec![8]);
    t.data_mut()[0] = f32::NAN;
    nan.insert("blocks.0.ln1.bias".into(), t);
    assert!(VitWeights::from_tensors(nan, &meta).is_err());
}

#[test]
fn head_count_comes_from_metadata_with_fallback() {
    let w = random_weights(config(1, 2, 8, 2, 2), 5);
    let (map, meta) = w.to_tensors();
    assert_eq!(VitWeights::from_tensors(map.clone(), &meta).unwrap().config.heads, 2);

    // without metadata a width-128 model falls back to 64-wide heads
    let wide = random_weights(config(1, 2, 128, 1, 1), 6);
    let (map, _) = wide.to_tensors();
    let cfg = VitWeights::from_tensors(map, &Metadata::new()).unwrap().config;
    assert_eq!(cfg.heads, 2);

    let (map, _) = w.to_tensors();
    let bad: Metadata = BTreeMap::from([("num_heads".to_string(), "3".to_string())]);
    assert!(VitWeights::from_tensors(map, &bad).is_err());
}

#[test]
fn wrong_image_shape_is_a_shape_error() {
    let cfg = config(1, 1, 4, 2, 2);
    let w = random_weights(cfg, 8);
    let img = Tensor::zeros(vec![3, 5, 4]);
    assert!(matches!(
        w.forward(&img, &InterventionSpec::none(), CaptureFlags::default()),
        Err(Error::Shape { .. })
    ));
}
