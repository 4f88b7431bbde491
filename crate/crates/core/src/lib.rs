// SPDX-License-Identifier: MIT OR Apache-2.0

//! Instrumented ViT inference for locating and removing typographic
//! attention circuits.
//!
//! The pieces, bottom up:
//!
//! - [`tensor`]: dense f32 kernels with f64 accumulation.
//! - [`vit`]: a pre-norm CLIP-style vision encoder with attention and
//!   residual capture, head ablation and cls-attention overrides.
//! - [`datakit`]: manifests, prototypes, zero-shot scoring, and the
//!   synthetic dataset and planted model used as ground truth.
//! - [`score`]: per-head typographic attention scores.
//! - [`circuit`]: greedy circuit search, α sweeps and dyslexic export.
//! - [`probe`] and [`analysis`]: linear probes, intrinsic dimensionality
//!   and the attention-sink detector.

pub mod analysis;
pub mod circuit;
pub mod container;
pub mod datakit;
pub mod error;
pub mod probe;
pub mod score;
pub mod tensor;
pub mod vit;

pub use circuit::{
    alpha_sweep, build_circuit, export_dyslexic, load_dyslexic, Circuit, CircuitBuild, CircuitHead,
    DyslexicModel,
};
pub use datakit::{
    gen_planted_model, gen_synthetic_dataset, zero_shot_classify, ClassPrototypes, Dataset,
    DatasetManifest, PlantedConfig, PlantedModel, RegionMask, SynthConfig,
};
pub use error::{Error, Result};
pub use score::{typo_attention_score, ScoreMatrix};
pub use tensor::Tensor;
pub use vit::{
    load_weights, AlphaOverride, CaptureFlags, HeadId, InterventionSpec, ModelConfig, RunTrace,
    VitWeights,
};
