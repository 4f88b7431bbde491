// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

pub mod reference;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use typolens::datakit::{ClassPrototypes, Dataset, DatasetManifest, ManifestEntry};
use typolens::vit::{BlockWeights, ModelConfig, VitWeights};
use typolens::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0) * scale).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn config(layers: usize, heads: usize, width: usize, grid: usize, patch: usize) -> ModelConfig {
    ModelConfig {
        layers,
        heads,
        width,
        patch_size: patch,
        image_size: grid * patch,
        tokens: grid * grid,
        embed_dim: width / 2 + 1,
        logit_scale: 100.0,
    }
}

/// Every tensor drawn uniformly; layer-norm gains near 1.
pub fn random_weights(cfg: ModelConfig, seed: u64) -> VitWeights {
    let mut r = rng(seed);
    let d = cfg.width;
    let pdim = 3 * cfg.patch_size * cfg.patch_size;
    let gain = |r: &mut ChaCha8Rng| {
        let data = (0..d).map(|_| 1.0 + r.random_range(-0.2f32..0.2)).collect();
        Tensor::new(vec![d], data).unwrap()
    };
    let blocks = (0..cfg.layers)
        .map(|_| BlockWeights {
            ln1_weight: gain(&mut r),
            ln1_bias: rand_tensor(&mut r, vec![d], 0.1),
            q_weight: rand_tensor(&mut r, vec![d, d], 0.5),
            q_bias: rand_tensor(&mut r, vec![d], 0.1),
            k_weight: rand_tensor(&mut r, vec![d, d], 0.5),
            k_bias: rand_tensor(&mut r, vec![d], 0.1),
            v_weight: rand_tensor(&mut r, vec![d, d], 0.5),
            v_bias: rand_tensor(&mut r, vec![d], 0.1),
            out_weight: rand_tensor(&mut r, vec![d, d], 0.5),
            out_bias: rand_tensor(&mut r, vec![d], 0.1),
            ln2_weight: gain(&mut r),
            ln2_bias: rand_tensor(&mut r, vec![d], 0.1),
            fc1_weight: rand_tensor(&mut r, vec![4 * d, d], 0.5),
            fc1_bias: rand_tensor(&mut r, vec![4 * d], 0.1),
            fc2_weight: rand_tensor(&mut r, vec![d, 4 * d], 0.3),
            fc2_bias: rand_tensor(&mut r, vec![d], 0.1),
        })
        .collect();
    VitWeights {
        cls_token: rand_tensor(&mut r, vec![d], 1.0),
        pos_embed: rand_tensor(&mut r, vec![cfg.tokens + 1, d], 0.5),
        patch_weight: rand_tensor(&mut r, vec![d, pdim], 0.5),
        patch_bias: rand_tensor(&mut r, vec![d], 0.1),
        blocks,
        ln_final_weight: gain(&mut r),
        ln_final_bias: rand_tensor(&mut r, vec![d], 0.1),
        proj: rand_tensor(&mut r, vec![cfg.embed_dim, d], 0.5),
        config: cfg,
    }
}

/// Random weights with every Q/K projection and bias zeroed.
pub fn uniform_attention_weights(cfg: ModelConfig, seed: u64) -> VitWeights {
    let mut w = random_weights(cfg, seed);
    for b in &mut w.blocks {
        let d = b.q_bias.len();
        b.q_weight = Tensor::zeros(vec![d, d]);
        b.k_weight = Tensor::zeros(vec![d, d]);
        b.q_bias = Tensor::zeros(vec![d]);
        b.k_bias = Tensor::zeros(vec![d]);
    }
    w
}

pub fn random_image(cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut r = rng(seed);
    rand_tensor(&mut r, vec![3, cfg.image_size, cfg.image_size], 1.0)
}

/// `n` random images; sample `i` has class `i % classes` and, when `typo`,
/// typo class `(i + 1) % classes` on `mask`.
pub fn random_dataset(cfg: &ModelConfig, n: usize, classes: usize, mask: &[usize], seed: u64) -> Dataset {
    let names: Vec<String> = (0..classes).map(|c| format!("k{c}")).collect();
    let entries = (0..n)
        .map(|i| ManifestEntry {
            id: format!("s{i:04}"),
            tensor_path: String::new(),
            y_image: i % classes,
            y_typo: (!mask.is_empty()).then_some((i + 1) % classes),
            mask: mask.to_vec(),
            tokens: cfg.tokens,
        })
        .collect();
    let images = (0..n).map(|i| random_image(cfg, seed * 1000 + i as u64)).collect();
    Dataset::new(
        DatasetManifest {
            entries,
            class_names: names.clone(),
            typo_class_names: names,
        },
        images,
    )
    .unwrap()
}

pub fn random_prototypes(classes: usize, width: usize, seed: u64) -> ClassPrototypes {
    let mut r = rng(seed);
    let rows: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..width).map(|_| r.random_range(-1.0f32..1.0)).collect())
        .collect();
    ClassPrototypes::new(&rows, (0..classes).map(|c| format!("k{c}")).collect()).unwrap()
}

pub fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}
