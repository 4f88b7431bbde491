// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-norm ViT vision encoder with hook points.
//!
//! The forward pass follows the CLIP vision tower: patch embedding, a
//! prepended cls token and learned positional embedding, `L` blocks of
//! `x + attn(ln1(x))` then `x + mlp(ln2(x))`, a final layer norm on the cls
//! row and a linear projection into the joint embedding space.
//!
//! Two interventions act on the cls query row only:
//!
//! - **ablation** zeroes a head's value aggregate for the cls row before the
//!   output projection, removing exactly that head's additive term from the
//!   cls residual update. Spatial rows are computed as usual.
//! - **alpha override** replaces the cls row of a head's attention pattern
//!   by `[α, A* · (1 − α) / ‖A*‖₁]` before value aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{self, Metadata, TensorMap};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub const LN_EPS: f64 = 1e-5;
pub const DEFAULT_LOGIT_SCALE: f32 = 100.0;
/// Metadata key carrying the head count, which tensor shapes cannot reveal.
pub const META_NUM_HEADS: &str = "num_heads";
/// CLIP towers use 64-wide heads; used when the metadata key is absent.
pub const FALLBACK_HEAD_DIM: usize = 64;

// ---------------------------------------------------------------------------
// Config and head ids
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub patch_size: usize,
    pub image_size: usize,
    /// Spatial tokens, `(image_size / patch_size)^2`.
    pub tokens: usize,
    pub embed_dim: usize,
    pub logit_scale: f32,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Side length of the square patch grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn total_heads(&self) -> usize {
        self.layers * self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::invalid(format!(
                "image size {} not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.grid() * self.grid() != self.tokens {
            return Err(Error::invalid(format!(
                "{} tokens do not match a {}x{} grid",
                self.tokens,
                self.grid(),
                self.grid()
            )));
        }
        if !(self.logit_scale.is_finite() && self.logit_scale > 0.0) {
            return Err(Error::invalid(format!(
                "logit_scale must be positive, got {}",
                self.logit_scale
            )));
        }
        Ok(())
    }

    pub fn check_head(&self, head: HeadId) -> Result<()> {
        if head.layer >= self.layers || head.head >= self.heads {
            return Err(Error::InvalidHead {
                head,
                layers: self.layers,
                heads: self.heads,
            });
        }
        Ok(())
    }

    /// All heads in (layer, head) order.
    pub fn all_heads(&self) -> Vec<HeadId> {
        (0..self.layers)
            .flat_map(|layer| (0..self.heads).map(move |head| HeadId { layer, head }))
            .collect()
    }
}

/// Attention head `head` of block `layer`, both 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.layer, self.head)
    }
}

impl FromStr for HeadId {
    type Err = Error;

    /// Parses `layer:head`.
    fn from_str(s: &str) -> Result<Self> {
        let (l, h) = s
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("head `{s}` is not `layer:head`")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("head `{s}` is not `layer:head`")))
        };
        Ok(HeadId::new(parse(l)?, parse(h)?))
    }
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_weight: Tensor,
    pub ln1_bias: Tensor,
    pub q_weight: Tensor,
    pub q_bias: Tensor,
    pub k_weight: Tensor,
    pub k_bias: Tensor,
    pub v_weight: Tensor,
    pub v_bias: Tensor,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
    pub ln2_weight: Tensor,
    pub ln2_bias: Tensor,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

impl BlockWeights {
    /// Identity block: unit layer norms, every projection and bias zero.
    pub fn zeros(d: usize) -> Self {
        Self {
            ln1_weight: Tensor::new(vec![d], vec![1.0; d]).expect("len"),
            ln1_bias: Tensor::zeros(vec![d]),
            q_weight: Tensor::zeros(vec![d, d]),
            q_bias: Tensor::zeros(vec![d]),
            k_weight: Tensor::zeros(vec![d, d]),
            k_bias: Tensor::zeros(vec![d]),
            v_weight: Tensor::zeros(vec![d, d]),
            v_bias: Tensor::zeros(vec![d]),
            out_weight: Tensor::zeros(vec![d, d]),
            out_bias: Tensor::zeros(vec![d]),
            ln2_weight: Tensor::new(vec![d], vec![1.0; d]).expect("len"),
            ln2_bias: Tensor::zeros(vec![d]),
            fc1_weight: Tensor::zeros(vec![4 * d, d]),
            fc1_bias: Tensor::zeros(vec![4 * d]),
            fc2_weight: Tensor::zeros(vec![d, 4 * d]),
            fc2_bias: Tensor::zeros(vec![d]),
        }
    }

    fn named(&self, layer: usize) -> Vec<(String, &Tensor)> {
        let p = |s: &str| format!("blocks.{layer}.{s}");
        vec![
            (p("ln1.weight"), &self.ln1_weight),
            (p("ln1.bias"), &self.ln1_bias),
            (p("attn.q.weight"), &self.q_weight),
            (p("attn.q.bias"), &self.q_bias),
            (p("attn.k.weight"), &self.k_weight),
            (p("attn.k.bias"), &self.k_bias),
            (p("attn.v.weight"), &self.v_weight),
            (p("attn.v.bias"), &self.v_bias),
            (p("attn.out.weight"), &self.out_weight),
            (p("attn.out.bias"), &self.out_bias),
            (p("ln2.weight"), &self.ln2_weight),
            (p("ln2.bias"), &self.ln2_bias),
            (p("mlp.fc1.weight"), &self.fc1_weight),
            (p("mlp.fc1.bias"), &self.fc1_bias),
            (p("mlp.fc2.weight"), &self.fc2_weight),
            (p("mlp.fc2.bias"), &self.fc2_bias),
        ]
    }
}

/// A frozen encoder. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct VitWeights {
    pub config: ModelConfig,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub ln_final_weight: Tensor,
    pub ln_final_bias: Tensor,
    pub proj: Tensor,
}

struct Loader<'a> {
    map: &'a mut TensorMap,
}

impl Loader<'_> {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self
            .map
            .remove(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if t.shape() != shape {
            return Err(Error::TensorShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                got: t.shape().to_vec(),
            });
        }
        t.check_finite(name)?;
        Ok(t)
    }

    fn peek(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }
}

impl VitWeights {
    /// Validates a tensor map against the naming contract and infers the
    /// model configuration from the shapes.
    pub fn from_tensors(mut map: TensorMap, metadata: &Metadata) -> Result<Self> {
        let mut ld = Loader { map: &mut map };
        let d = ld.peek("cls_token")?.len();
        let positions = ld.peek("pos_embed")?.rows();
        if positions < 2 {
            return Err(Error::TensorShape {
                name: "pos_embed".into(),
                expected: vec![2, d],
                got: ld.peek("pos_embed")?.shape().to_vec(),
            });
        }
        let tokens = positions - 1;
        let patch_in = ld.peek("patch_embed.weight")?.cols();
        let patch_size = ((patch_in / 3) as f64).sqrt().round() as usize;
        if 3 * patch_size * patch_size != patch_in {
            return Err(Error::TensorShape {
                name: "patch_embed.weight".into(),
                expected: vec![d, 3 * patch_size * patch_size],
                got: ld.peek("patch_embed.weight")?.shape().to_vec(),
            });
        }
        let grid = (tokens as f64).sqrt().round() as usize;
        let embed_dim = ld.peek("proj")?.rows();
        let mut layers = 0;
        while ld.map.contains_key(&format!("blocks.{layers}.ln1.weight")) {
            layers += 1;
        }
        let heads = match metadata.get(META_NUM_HEADS) {
            Some(v) => v.parse::<usize>().map_err(|_| {
                Error::invalid(format!("metadata `{META_NUM_HEADS}` = `{v}` is not a count"))
            })?,
            None if d % FALLBACK_HEAD_DIM == 0 => d / FALLBACK_HEAD_DIM,
            None => {
                return Err(Error::invalid(format!(
                    "metadata `{META_NUM_HEADS}` missing and width {d} is not a multiple of {FALLBACK_HEAD_DIM}"
                )))
            }
        };
        let logit_scale = match ld.map.remove("logit_scale") {
            Some(t) if t.len() == 1 && t.data()[0].is_finite() => t.data()[0],
            Some(t) => {
                return Err(Error::TensorShape {
                    name: "logit_scale".into(),
                    expected: vec![],
                    got: t.shape().to_vec(),
                })
            }
            None => DEFAULT_LOGIT_SCALE,
        };
        let config = ModelConfig {
            layers,
            heads,
            width: d,
            patch_size,
            image_size: grid * patch_size,
            tokens,
            embed_dim,
            logit_scale,
        };
        config.validate()?;

        let cls_token = ld.take("cls_token", &[d])?;
        let pos_embed = ld.take("pos_embed", &[tokens + 1, d])?;
        let patch_weight = ld.take("patch_embed.weight", &[d, patch_in])?;
        let patch_bias = ld.take("patch_embed.bias", &[d])?;
        let mut blocks = Vec::with_capacity(layers);
        for l in 0..layers {
            let mut t = |s: &str, shape: &[usize]| ld.take(&format!("blocks.{l}.{s}"), shape);
            blocks.push(BlockWeights {
                ln1_weight: t("ln1.weight", &[d])?,
                ln1_bias: t("ln1.bias", &[d])?,
                q_weight: t("attn.q.weight", &[d, d])?,
                q_bias: t("attn.q.bias", &[d])?,
                k_weight: t("attn.k.weight", &[d, d])?,
                k_bias: t("attn.k.bias", &[d])?,
                v_weight: t("attn.v.weight", &[d, d])?,
                v_bias: t("attn.v.bias", &[d])?,
                out_weight: t("attn.out.weight", &[d, d])?,
                out_bias: t("attn.out.bias", &[d])?,
                ln2_weight: t("ln2.weight", &[d])?,
                ln2_bias: t("ln2.bias", &[d])?,
                fc1_weight: t("mlp.fc1.weight", &[4 * d, d])?,
                fc1_bias: t("mlp.fc1.bias", &[4 * d])?,
                fc2_weight: t("mlp.fc2.weight", &[d, 4 * d])?,
                fc2_bias: t("mlp.fc2.bias", &[d])?,
            });
        }
        let ln_final_weight = ld.take("ln_final.weight", &[d])?;
        let ln_final_bias = ld.take("ln_final.bias", &[d])?;
        let proj = ld.take("proj", &[embed_dim, d])?;
        if let Some(extra) = map.keys().next() {
            return Err(Error::invalid(format!("unexpected tensor `{extra}` in weights")));
        }
        Ok(Self {
            config,
            cls_token,
            pos_embed,
            patch_weight,
            patch_bias,
            blocks,
            ln_final_weight,
            ln_final_bias,
            proj,
        })
    }

    /// Named tensors following the container naming contract.
    pub fn to_tensors(&self) -> (TensorMap, Metadata) {
        let mut map = TensorMap::new();
        let mut put = |n: &str, t: &Tensor| {
            map.insert(n.to_string(), t.clone());
        };
        put("cls_token", &self.cls_token);
        put("pos_embed", &self.pos_embed);
        put("patch_embed.weight", &self.patch_weight);
        put("patch_embed.bias", &self.patch_bias);
        for (l, b) in self.blocks.iter().enumerate() {
            for (n, t) in b.named(l) {
                put(&n, t);
            }
        }
        put("ln_final.weight", &self.ln_final_weight);
        put("ln_final.bias", &self.ln_final_bias);
        put("proj", &self.proj);
        put(
            "logit_scale",
            &Tensor::new(vec![], vec![self.config.logit_scale]).expect("scalar"),
        );
        let mut meta = Metadata::new();
        meta.insert(META_NUM_HEADS.into(), self.config.heads.to_string());
        (map, meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (map, meta) = self.to_tensors();
        container::write_tensors(path, &map, &meta)
    }

    /// Content hash over tensor names, shapes and values (hex SHA-256).
    pub fn model_hash(&self) -> String {
        let (map, meta) = self.to_tensors();
        let mut h = Sha256::new();
        for (k, v) in &meta {
            h.update(k.as_bytes());
            h.update(v.as_bytes());
        }
        for (name, t) in &map {
            h.update(name.as_bytes());
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Reads and validates a weight container.
pub fn load_weights(path: &Path) -> Result<VitWeights> {
    let (map, meta) = container::read_tensors(path)?;
    VitWeights::from_tensors(map, &meta)
}

// ---------------------------------------------------------------------------
// Interventions
// ---------------------------------------------------------------------------

/// Heads whose cls attention row is replaced by `[α, A*·(1−α)/‖A*‖₁]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlphaOverride {
    pub alphas: BTreeMap<HeadId, f32>,
}

impl AlphaOverride {
    pub fn uniform(heads: impl IntoIterator<Item = HeadId>, alpha: f32) -> Self {
        Self {
            alphas: heads.into_iter().map(|h| (h, alpha)).collect(),
        }
    }
}

/// Activation-level edits applied during a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    /// Circuit whose cls contributions are zeroed.
    pub ablate: BTreeSet<HeadId>,
    pub alpha_override: Option<AlphaOverride>,
}

impl InterventionSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn ablate(heads: impl IntoIterator<Item = HeadId>) -> Self {
        Self {
            ablate: heads.into_iter().collect(),
            alpha_override: None,
        }
    }

    pub fn with_alpha(mut self, alpha: AlphaOverride) -> Self {
        self.alpha_override = Some(alpha);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.ablate.is_empty()
            && self
                .alpha_override
                .as_ref()
                .is_none_or(|a| a.alphas.is_empty())
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for &h in &self.ablate {
            config.check_head(h)?;
        }
        if let Some(a) = &self.alpha_override {
            for (&h, &alpha) in &a.alphas {
                config.check_head(h)?;
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::InvalidAlpha(alpha));
                }
            }
        }
        Ok(())
    }

    fn ablated(&self, layer: usize, head: usize) -> bool {
        self.ablate.contains(&HeadId::new(layer, head))
    }

    fn alpha(&self, layer: usize, head: usize) -> Option<f32> {
        self.alpha_override
            .as_ref()
            .and_then(|a| a.alphas.get(&HeadId::new(layer, head)).copied())
    }
}

/// Rewrites an attention row as `[α, A*·(1−α)/‖A*‖₁]`.
///
/// When the spatial mass has underflowed to zero the `1 − α` mass is spread
/// uniformly over the spatial positions.
pub fn alpha_row(row: &[f32], alpha: f32) -> Vec<f32> {
    let spatial = &row[1..];
    let norm: f64 = spatial.iter().map(|&v| f64::from(v)).sum();
    let rest = 1.0 - f64::from(alpha);
    let mut out = Vec::with_capacity(row.len());
    out.push(alpha);
    if norm > 0.0 {
        out.extend(spatial.iter().map(|&v| (f64::from(v) * rest / norm) as f32));
    } else {
        let u = (rest / spatial.len() as f64) as f32;
        out.extend(std::iter::repeat_n(u, spatial.len()));
    }
    out
}

// ---------------------------------------------------------------------------
// Trace
// ---------------------------------------------------------------------------

/// Which intermediate values a forward pass records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CaptureFlags {
    pub attention: bool,
    pub head_contrib: bool,
    pub residuals: bool,
}

impl CaptureFlags {
    pub fn all() -> Self {
        Self {
            attention: true,
            head_contrib: true,
            residuals: true,
        }
    }

    pub fn attention() -> Self {
        Self {
            attention: true,
            ..Self::default()
        }
    }

    pub fn residuals() -> Self {
        Self {
            residuals: true,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerTrace {
    /// `[I, T+1, T+1]`, rows are query positions.
    pub attention: Option<Tensor>,
    /// `[I, d]`, each head's additive term in the cls residual update.
    pub cls_head_contrib: Option<Tensor>,
    pub residual_post_attn: Option<Tensor>,
    pub residual_post_block: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub embed_in: Option<Tensor>,
    pub layers: Vec<LayerTrace>,
    /// cls row after the final layer norm (the projection input).
    pub final_ln_cls: Vec<f32>,
    pub final_cls_embedding: Vec<f32>,
}

impl RunTrace {
    fn layer(&self, layer: usize) -> Result<&LayerTrace> {
        self.layers
            .get(layer)
            .ok_or_else(|| Error::MissingCapture(format!("layer {layer}")))
    }

    pub fn attention(&self, layer: usize) -> Result<&Tensor> {
        self.layer(layer)?
            .attention
            .as_ref()
            .ok_or_else(|| Error::MissingCapture(format!("attention of layer {layer}")))
    }

    /// The cls query row of one head's attention pattern, length `T+1`.
    pub fn cls_attention(&self, h: HeadId) -> Result<&[f32]> {
        let att = self.attention(h.layer)?;
        let n = att.shape()[1];
        if h.head >= att.shape()[0] {
            return Err(Error::MissingCapture(format!("head {h}")));
        }
        let start = h.head * n * n;
        Ok(&att.data()[start..start + n])
    }

    pub fn residual_post_attn(&self, layer: usize) -> Result<&Tensor> {
        self.layer(layer)?
            .residual_post_attn
            .as_ref()
            .ok_or_else(|| Error::MissingCapture(format!("post-attention residual {layer}")))
    }

    pub fn residual_post_block(&self, layer: usize) -> Result<&Tensor> {
        self.layer(layer)?
            .residual_post_block
            .as_ref()
            .ok_or_else(|| Error::MissingCapture(format!("post-block residual {layer}")))
    }

    /// Residual entering block `layer` (the embedding for block 0).
    pub fn residual_pre_attn(&self, layer: usize) -> Result<&Tensor> {
        if layer == 0 {
            self.embed_in
                .as_ref()
                .ok_or_else(|| Error::MissingCapture("embedding".into()))
        } else {
            self.residual_post_block(layer - 1)
        }
    }

    pub fn cls_head_contrib(&self, layer: usize) -> Result<&Tensor> {
        self.layer(layer)?
            .cls_head_contrib
            .as_ref()
            .ok_or_else(|| Error::MissingCapture(format!("head contributions of layer {layer}")))
    }
}

/// Splits a head's cls attention row into `(A_cls, A*)`.
pub fn spatial_pattern(trace: &RunTrace, h: HeadId) -> Result<(f32, Vec<f32>)> {
    let row = trace.cls_attention(h)?;
    Ok((row[0], row[1..].to_vec()))
}

/// Result of one attention sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// `[T+1, d]`, the sublayer output before the residual add.
    pub output: Tensor,
    /// `[I, T+1, T+1]`, after any alpha override.
    pub pattern: Tensor,
    /// `[I, d]`.
    pub cls_head_contrib: Tensor,
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Cuts `[3, H, W]` into `[T, 3·P·P]` patch rows, channel-major within each
/// patch and patches in row-major grid order.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || !s[1].is_multiple_of(patch) || !s[2].is_multiple_of(patch) {
        return Err(Error::shape(
            "patchify",
            format!("image {s:?} with patch size {patch}"),
        ));
    }
    let (h, w) = (s[1], s[2]);
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(image.len());
    for gy in 0..gh {
        for gx in 0..gw {
            for c in 0..3 {
                for py in 0..patch {
                    let y = gy * patch + py;
                    let base = (c * h + y) * w + gx * patch;
                    out.extend_from_slice(&image.data()[base..base + patch]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, 3 * patch * patch], out)
}

impl VitWeights {
    /// Patch + cls + positional embedding, `[T+1, d]`.
    pub fn embed(&self, image: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        if image.shape() != [3, c.image_size, c.image_size] {
            return Err(Error::shape(
                "forward",
                format!(
                    "image {:?} vs expected [3, {}, {}]",
                    image.shape(),
                    c.image_size,
                    c.image_size
                ),
            ));
        }
        let patches = patchify(image, c.patch_size)?;
        let tokens = tensor::linear(&patches, &self.patch_weight, Some(&self.patch_bias))?;
        let d = c.width;
        let mut x = Vec::with_capacity((c.tokens + 1) * d);
        x.extend_from_slice(self.cls_token.data());
        x.extend_from_slice(tokens.data());
        for (v, &p) in x.iter_mut().zip(self.pos_embed.data()) {
            *v += p;
        }
        Tensor::new(vec![c.tokens + 1, d], x)
    }

    /// Multi-head attention sublayer of block `layer` applied to the
    /// residual `x` (layer norm included), with interventions.
    pub fn attention_sublayer(
        &self,
        layer: usize,
        x: &Tensor,
        iv: &InterventionSpec,
    ) -> Result<AttentionOutput> {
        let c = &self.config;
        let b = self
            .blocks
            .get(layer)
            .ok_or_else(|| Error::invalid(format!("layer {layer} out of range")))?;
        let h = tensor::layer_norm(x, &b.ln1_weight, &b.ln1_bias, LN_EPS)?;
        let q = tensor::linear(&h, &b.q_weight, Some(&b.q_bias))?;
        let k = tensor::linear(&h, &b.k_weight, Some(&b.k_bias))?;
        let v = tensor::linear(&h, &b.v_weight, Some(&b.v_bias))?;
        let n = x.rows();
        let (nh, dh, d) = (c.heads, c.head_dim(), c.width);
        let scale = 1.0 / (dh as f64).sqrt();

        let mut pattern = vec![0.0f32; nh * n * n];
        let mut z = vec![0.0f32; n * d];
        for head in 0..nh {
            let off = head * dh;
            let att = &mut pattern[head * n * n..(head + 1) * n * n];
            for i in 0..n {
                let qi = &q.row(i)[off..off + dh];
                let row = &mut att[i * n..(i + 1) * n];
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot = (tensor::dot(qi, &k.row(j)[off..off + dh]) * scale) as f32;
                }
                if row.iter().any(|s| !s.is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!("attention logits layer {layer} head {head} row {i}"),
                    });
                }
                tensor::softmax_in_place(row);
            }
            if let Some(alpha) = iv.alpha(layer, head) {
                let replaced = alpha_row(&att[..n], alpha);
                att[..n].copy_from_slice(&replaced);
            }
            for i in 0..n {
                if i == 0 && iv.ablated(layer, head) {
                    continue;
                }
                let row = &att[i * n..(i + 1) * n];
                for e in 0..dh {
                    let acc: f64 = row
                        .iter()
                        .enumerate()
                        .map(|(j, &a)| f64::from(a) * f64::from(v.row(j)[off + e]))
                        .sum();
                    z[i * d + off + e] = acc as f32;
                }
            }
        }
        let z = Tensor::new(vec![n, d], z)?;
        let output = tensor::linear(&z, &b.out_weight, Some(&b.out_bias))?;

        let mut contrib = vec![0.0f32; nh * d];
        let zc = z.row(0);
        for head in 0..nh {
            let off = head * dh;
            for o in 0..d {
                let wrow = &b.out_weight.row(o)[off..off + dh];
                contrib[head * d + o] = tensor::dot(&zc[off..off + dh], wrow) as f32;
            }
        }
        Ok(AttentionOutput {
            output,
            pattern: Tensor::new(vec![nh, n, n], pattern)?,
            cls_head_contrib: Tensor::new(vec![nh, d], contrib)?,
        })
    }

    /// MLP sublayer of block `layer` (layer norm included).
    pub fn mlp_sublayer(&self, layer: usize, x: &Tensor) -> Result<Tensor> {
        let b = &self.blocks[layer];
        let h = tensor::layer_norm(x, &b.ln2_weight, &b.ln2_bias, LN_EPS)?;
        let a = tensor::gelu_tensor(&tensor::linear(&h, &b.fc1_weight, Some(&b.fc1_bias))?);
        tensor::linear(&a, &b.fc2_weight, Some(&b.fc2_bias))
    }

    /// Full instrumented forward pass of one pre-normalized image `[3, H, W]`.
    pub fn forward(
        &self,
        image: &Tensor,
        iv: &InterventionSpec,
        capture: CaptureFlags,
    ) -> Result<RunTrace> {
        iv.validate(&self.config)?;
        let mut x = self.embed(image)?;
        let embed_in = capture.residuals.then(|| x.clone());
        let mut layers = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let att = self.attention_sublayer(l, &x, iv)?;
            add_in_place(&mut x, &att.output);
            let post_attn = capture.residuals.then(|| x.clone());
            let mlp = self.mlp_sublayer(l, &x)?;
            add_in_place(&mut x, &mlp);
            x.check_finite(&format!("residual after block {l}"))?;
            layers.push(LayerTrace {
                attention: capture.attention.then_some(att.pattern),
                cls_head_contrib: capture.head_contrib.then_some(att.cls_head_contrib),
                residual_post_attn: post_attn,
                residual_post_block: capture.residuals.then(|| x.clone()),
            });
        }
        let cls = Tensor::new(vec![1, self.config.width], x.row(0).to_vec())?;
        let ln = tensor::layer_norm(&cls, &self.ln_final_weight, &self.ln_final_bias, LN_EPS)?;
        let emb = tensor::linear(&ln, &self.proj, None)?;
        Ok(RunTrace {
            embed_in,
            layers,
            final_ln_cls: ln.into_data(),
            final_cls_embedding: emb.into_data(),
        })
    }

    /// Forward over many images in parallel; results keep input order.
    pub fn forward_batch(
        &self,
        images: &[Tensor],
        iv: &InterventionSpec,
        capture: CaptureFlags,
    ) -> Result<Vec<RunTrace>> {
        images
            .par_iter()
            .map(|img| self.forward(img, iv, capture))
            .collect()
    }
}

fn add_in_place(x: &mut Tensor, delta: &Tensor) {
    for (a, &b) in x.data_mut().iter_mut().zip(delta.data()) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_id_parses_and_prints() {
        let h: HeadId = "3:7".parse().unwrap();
        assert_eq!(h, HeadId::new(3, 7));
        assert_eq!(h.to_string(), "3:7");
        assert!("3-7".parse::<HeadId>().is_err());
    }

    #[test]
    fn alpha_row_sums_to_one() {
        let row = [0.2f32, 0.5, 0.3];
        for k in 0..=10 {
            let a = k as f32 / 10.0;
            let r = alpha_row(&row, a);
            assert_eq!(r[0], a);
            let s: f64 = r.iter().map(|&v| f64::from(v)).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn alpha_row_with_no_spatial_mass_spreads_uniformly() {
        let r = alpha_row(&[1.0, 0.0, 0.0], 0.5);
        assert_eq!(r, vec![0.5, 0.25, 0.25]);
    }

    #[test]
    fn patchify_orders_channels_then_rows() {
        // 3x4x4 image, patch 2: value encodes (c, y, x).
        let data: Vec<f32> = (0..3)
            .flat_map(|c| (0..4).flat_map(move |y| (0..4).map(move |x| (c * 100 + y * 10 + x) as f32)))
            .collect();
        let img = Tensor::new(vec![3, 4, 4], data).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 12]);
        // second patch (gy=0, gx=1)
        assert_eq!(
            p.row(1),
            &[2.0, 3.0, 12.0, 13.0, 102.0, 103.0, 112.0, 113.0, 202.0, 203.0, 212.0, 213.0]
        );
    }

    #[test]
    fn invalid_alpha_is_rejected() {
        let cfg = ModelConfig {
            layers: 1,
            heads: 1,
            width: 4,
            patch_size: 1,
            image_size: 1,
            tokens: 1,
            embed_dim: 2,
            logit_scale: 100.0,
        };
        let iv = InterventionSpec::none().with_alpha(AlphaOverride::uniform([HeadId::new(0, 0)], 1.5));
        assert!(matches!(iv.validate(&cfg), Err(Error::InvalidAlpha(_))));
        let iv = InterventionSpec::ablate([HeadId::new(1, 0)]);
        assert!(matches!(iv.validate(&cfg), Err(Error::InvalidHead { .. })));
    }
}
