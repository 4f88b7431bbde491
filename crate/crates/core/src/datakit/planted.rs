// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-built encoders with a known typographic circuit.
//!
//! The residual stream is split into reserved coordinate blocks
//! ([`PlantedLayout`]). The patch embedding reads the textures of the
//! [`PatternBank`] into the object, typo and ink coordinates of each patch
//! token. Then:
//!
//! - a *gatherer* head with uniform attention copies the averaged object
//!   block of the patches into the cls object block;
//! - each *planted* head queries from the cls flag and keys on the ink
//!   coordinate, so its cls row concentrates on overlay patches when text
//!   is present and parks on the cls position (an attention sink)
//!   otherwise; its value/output path copies the typo block of the
//!   attended patches into the cls typo block;
//! - every other head has small random Q/K and zero V;
//! - MLPs are small random maps that never touch the anchor coordinate.
//!
//! Every read goes through `(x_i - x_anchor)` with an always-zero anchor
//! coordinate, which cancels the mean subtraction of layer norm. The
//! remaining per-token `1/σ` scale is measured on reference renders and the
//! head gains are solved so the planted attention logits and the written
//! signal sizes hit fixed targets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::ClassPrototypes;
use super::synth::{class_names, region_tokens, render_sample, PatternBank};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};
use crate::vit::{BlockWeights, HeadId, InterventionSpec, ModelConfig, VitWeights, LN_EPS};

/// cls→cls attention logit of a planted head.
const SINK_LOGIT: f64 = 10.0;
/// cls→overlay-patch attention logit of a planted head.
const TYPO_LOGIT: f64 = 20.0;
/// Extra logit for tokens inside a planted head's positional region.
const REGION_LOGIT: f64 = 2.0;
/// Size of the object signal the gatherer writes into cls.
const OBJECT_SIGNAL: f64 = 1.0;
/// Size of the typo signal a planted head writes into cls. Larger than
/// the object signal so typographic inputs flip the zero-shot prediction.
const TYPO_SIGNAL: f64 = 3.0;
const NOISE_QK: f32 = 0.02;
const NOISE_MLP: f32 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "rows")]
pub enum PlantedRegion {
    /// Content-driven only: attends to overlay patches wherever they are.
    Anywhere,
    /// Adds a positional preference for the bottom `n` grid rows.
    BottomRows(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedHead {
    pub head: HeadId,
    pub region: PlantedRegion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub classes: usize,
    pub typo_classes: usize,
    pub planted: Vec<PlantedHead>,
    /// Head carrying object information to cls; defaults to the first
    /// non-planted head of layer 0.
    pub gatherer: Option<HeadId>,
    /// Defaults to `classes + typo_classes`.
    pub embed_dim: Option<usize>,
    pub logit_scale: f32,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            width: 32,
            image_size: 32,
            patch_size: 4,
            classes: 6,
            typo_classes: 6,
            planted: vec![PlantedHead {
                head: HeadId::new(1, 2),
                region: PlantedRegion::Anywhere,
            }],
            gatherer: None,
            embed_dim: None,
            logit_scale: 100.0,
            seed: 0,
        }
    }
}

/// Reserved residual coordinates of a planted model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedLayout {
    pub anchor: usize,
    pub cls_flag: usize,
    pub ink: usize,
    /// First positional-region coordinate (one per `BottomRows` head).
    pub region: usize,
    pub object_patch: usize,
    pub object_cls: usize,
    pub typo_patch: usize,
    pub typo_cls: usize,
    pub used: usize,
}

impl PlantedLayout {
    fn new(classes: usize, typo_classes: usize, regions: usize) -> Self {
        let region = 3;
        let object_patch = region + regions;
        let object_cls = object_patch + classes;
        let typo_patch = object_cls + classes;
        let typo_cls = typo_patch + typo_classes;
        Self {
            anchor: 0,
            cls_flag: 1,
            ink: 2,
            region,
            object_patch,
            object_cls,
            typo_patch,
            typo_cls,
            used: typo_cls + typo_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedModel {
    pub weights: VitWeights,
    pub prototypes: ClassPrototypes,
    pub layout: PlantedLayout,
    pub gatherer: HeadId,
    pub config: PlantedConfig,
}

impl PlantedModel {
    pub fn planted_heads(&self) -> Vec<HeadId> {
        self.config.planted.iter().map(|p| p.head).collect()
    }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std > 0");
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

fn set(t: &mut Tensor, row: usize, col: usize, v: f64) {
    let w = t.cols();
    t.data_mut()[row * w + col] = v as f32;
}

/// Adds `gain · (x_coord − x_anchor)` to output row `row` of a `[out, in]` map.
fn read_coord(t: &mut Tensor, row: usize, coord: usize, anchor: usize, gain: f64) {
    let w = t.cols();
    let d = t.data_mut();
    d[row * w + coord] += gain as f32;
    d[row * w + anchor] -= gain as f32;
}

/// Residual entering block `layer` for one image.
fn residual_at(w: &VitWeights, image: &Tensor, layer: usize) -> Result<Tensor> {
    let mut x = w.embed(image)?;
    let none = InterventionSpec::none();
    for l in 0..layer {
        let a = w.attention_sublayer(l, &x, &none)?;
        for (v, d) in x.data_mut().iter_mut().zip(a.output.data()) {
            *v += d;
        }
        let m = w.mlp_sublayer(l, &x)?;
        for (v, d) in x.data_mut().iter_mut().zip(m.data()) {
            *v += d;
        }
    }
    let b = &w.blocks[layer];
    tensor::layer_norm(&x, &b.ln1_weight, &b.ln1_bias, LN_EPS)
}

fn centered(h: &Tensor, row: usize, coord: usize, anchor: usize) -> f64 {
    f64::from(h.row(row)[coord]) - f64::from(h.row(row)[anchor])
}

/// Builds a planted encoder and matching class prototypes.
pub fn gen_planted_model(cfg: &PlantedConfig) -> Result<PlantedModel> {
    let grid = cfg.image_size / cfg.patch_size.max(1);
    let config = ModelConfig {
        layers: cfg.layers,
        heads: cfg.heads,
        width: cfg.width,
        patch_size: cfg.patch_size,
        image_size: cfg.image_size,
        tokens: grid * grid,
        embed_dim: cfg.embed_dim.unwrap_or(cfg.classes + cfg.typo_classes),
        logit_scale: cfg.logit_scale,
    };
    config.validate()?;
    if cfg.typo_classes > cfg.classes || cfg.typo_classes == 0 {
        return Err(Error::invalid(format!(
            "typo classes ({}) must be between 1 and the number of classes ({})",
            cfg.typo_classes, cfg.classes
        )));
    }
    if config.embed_dim < cfg.classes + cfg.typo_classes {
        return Err(Error::invalid(format!(
            "embed_dim {} < classes + typo classes ({})",
            config.embed_dim,
            cfg.classes + cfg.typo_classes
        )));
    }
    if cfg.planted.is_empty() {
        return Err(Error::invalid("at least one planted head is required"));
    }
    for p in &cfg.planted {
        config.check_head(p.head)?;
        if let PlantedRegion::BottomRows(n) = p.region {
            if n == 0 || n > grid {
                return Err(Error::invalid(format!(
                    "planted region of {n} rows does not fit a {grid}-row grid"
                )));
            }
        }
    }
    let planted_ids: Vec<HeadId> = cfg.planted.iter().map(|p| p.head).collect();
    if planted_ids
        .iter()
        .enumerate()
        .any(|(i, h)| planted_ids[..i].contains(h))
    {
        return Err(Error::invalid("planted heads must be distinct"));
    }
    let gatherer = match cfg.gatherer {
        Some(g) => {
            config.check_head(g)?;
            if planted_ids.contains(&g) {
                return Err(Error::invalid(format!("gatherer {g} is also planted")));
            }
            g
        }
        None => config
            .all_heads()
            .into_iter()
            .find(|h| !planted_ids.contains(h))
            .ok_or_else(|| Error::invalid("no head left for the object gatherer"))?,
    };
    let regions = cfg
        .planted
        .iter()
        .filter(|p| matches!(p.region, PlantedRegion::BottomRows(_)))
        .count();
    let layout = PlantedLayout::new(cfg.classes, cfg.typo_classes, regions);
    if layout.used > cfg.width {
        return Err(Error::invalid(format!(
            "reserved coordinate blocks need width {}, model width is {}",
            layout.used, cfg.width
        )));
    }
    let dh = config.head_dim();
    if dh < cfg.classes.max(cfg.typo_classes) {
        return Err(Error::invalid(format!(
            "head dim {dh} cannot carry {} class channels",
            cfg.classes.max(cfg.typo_classes)
        )));
    }
    let bank = PatternBank::new(cfg.classes, cfg.typo_classes, cfg.patch_size)?;

    let d = cfg.width;
    let t = config.tokens;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut cls_token = Tensor::zeros(vec![d]);
    cls_token.data_mut()[layout.cls_flag] = 1.0;
    let mut pos_embed = Tensor::zeros(vec![t + 1, d]);
    let mut region_coord = Vec::with_capacity(cfg.planted.len());
    let mut next_region = layout.region;
    for p in &cfg.planted {
        if let PlantedRegion::BottomRows(n) = p.region {
            for tok in region_tokens(grid, grid - n, 0, n, grid) {
                set(&mut pos_embed, tok + 1, next_region, 1.0);
            }
            region_coord.push(Some(next_region));
            next_region += 1;
        } else {
            region_coord.push(None);
        }
    }
    let mut patch_weight = Tensor::zeros(vec![d, 3 * cfg.patch_size * cfg.patch_size]);
    for (c, pat) in bank.object.iter().enumerate() {
        patch_weight.row_mut(layout.object_patch + c).copy_from_slice(pat);
    }
    for (k, pat) in bank.typo.iter().enumerate() {
        patch_weight.row_mut(layout.typo_patch + k).copy_from_slice(pat);
    }
    patch_weight.row_mut(layout.ink).copy_from_slice(&bank.ink);

    let mut blocks = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let mut b = BlockWeights::zeros(d);
        for h in 0..cfg.heads {
            let id = HeadId::new(l, h);
            if id == gatherer || planted_ids.contains(&id) {
                continue;
            }
            let q = gaussian(&mut rng, vec![dh, d], NOISE_QK);
            let k = gaussian(&mut rng, vec![dh, d], NOISE_QK);
            for r in 0..dh {
                b.q_weight.row_mut(h * dh + r).copy_from_slice(q.row(r));
                b.k_weight.row_mut(h * dh + r).copy_from_slice(k.row(r));
            }
        }
        b.fc1_weight = gaussian(&mut rng, vec![4 * d, d], NOISE_MLP);
        b.fc2_weight = gaussian(&mut rng, vec![d, 4 * d], NOISE_MLP);
        b.fc2_weight.row_mut(layout.anchor).fill(0.0);
        blocks.push(b);
    }

    let mut w = VitWeights {
        config,
        cls_token,
        pos_embed,
        patch_weight,
        patch_bias: Tensor::zeros(vec![d]),
        blocks,
        ln_final_weight: Tensor::new(vec![d], vec![1.0; d])?,
        ln_final_bias: Tensor::zeros(vec![d]),
        proj: Tensor::zeros(vec![config.embed_dim, d]),
    };

    // Reference renders for gain calibration: class 0, written class 1 on
    // the bottom row, no pixel noise.
    let mut ref_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let overlay = region_tokens(grid, grid - 1, 0, 1, grid);
    let ref_typo_class = 1 % cfg.typo_classes;
    let (clean_img, typo_img) = render_sample(
        &bank,
        grid,
        0,
        Some((ref_typo_class, &overlay)),
        0.0,
        &mut ref_rng,
    );
    let typo_img = typo_img.expect("overlay requested");
    let scale = (dh as f64).sqrt();
    let a = layout.anchor;

    for l in 0..cfg.layers {
        let hc = residual_at(&w, &clean_img, l)?;
        let ht = residual_at(&w, &typo_img, l)?;
        let b = &mut w.blocks[l];
        if gatherer.layer == l {
            let off = gatherer.head * dh;
            let object_level = (1..=t)
                .map(|row| centered(&hc, row, layout.object_patch, a))
                .sum::<f64>()
                / t as f64;
            if object_level <= 0.0 {
                return Err(Error::invalid("object signal vanished before the gatherer"));
            }
            let gain = OBJECT_SIGNAL / (object_level * t as f64 / (t + 1) as f64);
            for c in 0..cfg.classes {
                read_coord(&mut b.v_weight, off + c, layout.object_patch + c, a, 1.0);
                set(&mut b.out_weight, layout.object_cls + c, off + c, gain);
            }
        }
        for (p, region) in cfg.planted.iter().zip(&region_coord) {
            if p.head.layer != l {
                continue;
            }
            let off = p.head.head * dh;
            let cls_clean = centered(&hc, 0, layout.cls_flag, a);
            let cls_typo = centered(&ht, 0, layout.cls_flag, a);
            let ink = centered(&ht, overlay[0] + 1, layout.ink, a);
            let typo_level = centered(&ht, overlay[0] + 1, layout.typo_patch + ref_typo_class, a);
            if cls_clean <= 0.0 || cls_typo <= 0.0 || ink <= 0.0 || typo_level <= 0.0 {
                return Err(Error::invalid(format!(
                    "planted head {} cannot read its inputs at layer {l}",
                    p.head
                )));
            }
            read_coord(&mut b.q_weight, off, layout.cls_flag, a, 1.0);
            read_coord(&mut b.k_weight, off, layout.cls_flag, a, SINK_LOGIT * scale / (cls_clean * cls_clean));
            read_coord(&mut b.k_weight, off, layout.ink, a, TYPO_LOGIT * scale / (cls_typo * ink));
            if let Some(rc) = region {
                let last = t; // bottom-right token is inside any bottom band
                let level = centered(&hc, last, *rc, a);
                if level > 0.0 {
                    read_coord(&mut b.k_weight, off, *rc, a, REGION_LOGIT * scale / (cls_clean * level));
                }
            }
            for k in 0..cfg.typo_classes {
                read_coord(&mut b.v_weight, off + k, layout.typo_patch + k, a, 1.0);
                set(&mut b.out_weight, layout.typo_cls + k, off + k, TYPO_SIGNAL / typo_level);
            }
        }
    }

    for c in 0..cfg.classes {
        read_coord(&mut w.proj, c, layout.object_cls + c, a, 1.0);
    }
    for k in 0..cfg.typo_classes {
        read_coord(&mut w.proj, cfg.classes + k, layout.typo_cls + k, a, 1.0);
    }
    let e = config.embed_dim;
    let rows: Vec<Vec<f32>> = (0..cfg.classes)
        .map(|c| {
            let mut r = vec![0.0f32; e];
            r[c] = 1.0;
            if c < cfg.typo_classes {
                r[cfg.classes + c] = 1.0;
            }
            r
        })
        .collect();
    let prototypes = ClassPrototypes::new(&rows, class_names(cfg.classes))?;
    for (name, t) in w.to_tensors().0 {
        t.check_finite(&name)?;
    }
    Ok(PlantedModel {
        weights: w,
        prototypes,
        layout,
        gatherer,
        config: cfg.clone(),
    })
}
