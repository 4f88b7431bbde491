// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic typographic datasets, manifests, the zero-shot harness and the
//! planted-model generator.

pub mod manifest;
pub mod planted;
pub mod synth;
pub mod zeroshot;

pub use manifest::{ClassPrototypes, Dataset, DatasetManifest, ManifestEntry, RegionMask};
pub use planted::{gen_planted_model, PlantedConfig, PlantedHead, PlantedLayout, PlantedModel, PlantedRegion};
pub use synth::{gen_synthetic_dataset, PatternBank, RegionPlacement, SynthConfig, SynthDataset};
pub use zeroshot::{classify_embedding, zero_shot_classify, Classification, ZeroShotResult, ZeroShotSummary};
