// SPDX-License-Identifier: MIT OR Apache-2.0

//! Procedural typographic-attack datasets.
//!
//! Every patch of a clean image is its class texture (a fixed pattern
//! vector in patch-pixel space, with a per-patch amplitude jitter) plus
//! Gaussian pixel noise. The typographic variant of the same sample
//! overwrites the patches of a rectangular region with the "ink" pattern
//! plus the texture of the written class. Masks are exact at patch
//! granularity because overlays are patch-aligned.
//!
//! Textures come from a [`PatternBank`] derived from a fixed seed, so a
//! planted model built for the same class counts and patch size can read
//! them without sharing any dataset state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{Dataset, DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PATTERN_SEED: u64 = 0x7479_706f_6c65_6e73;

/// Orthonormal texture vectors in the `3·P·P` patch-pixel space.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternBank {
    pub patch_size: usize,
    /// One texture per image class.
    pub object: Vec<Vec<f32>>,
    /// One texture per typo class.
    pub typo: Vec<Vec<f32>>,
    /// Shared "text is present here" component of every overlay.
    pub ink: Vec<f32>,
}

impl PatternBank {
    pub fn new(classes: usize, typo_classes: usize, patch_size: usize) -> Result<Self> {
        let dim = 3 * patch_size * patch_size;
        let needed = classes + typo_classes + 1;
        if needed > dim {
            return Err(Error::invalid(format!(
                "{classes} classes + {typo_classes} typo classes need {needed} orthogonal \
                 patterns but patches only have {dim} pixels"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(PATTERN_SEED);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(needed);
        while basis.len() < needed {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                basis.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        let to_f32 = |v: &Vec<f64>| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        Ok(Self {
            patch_size,
            object: basis[..classes].iter().map(to_f32).collect(),
            typo: basis[classes..classes + typo_classes].iter().map(to_f32).collect(),
            ink: to_f32(&basis[needed - 1]),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegionPlacement {
    /// Horizontally centered band on the bottom rows of the grid.
    FixedBottom,
    /// Rectangle at a uniformly random grid position.
    Random,
}

impl std::str::FromStr for RegionPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed-bottom" => Ok(Self::FixedBottom),
            "random" => Ok(Self::Random),
            _ => Err(Error::invalid(format!(
                "region `{s}` is not `fixed-bottom` or `random`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub classes: usize,
    pub typo_classes: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub region: RegionPlacement,
    /// Region height in patches.
    pub region_rows: usize,
    /// Region width in patches; `None` spans the whole grid width.
    pub region_cols: Option<usize>,
    /// Per-pixel Gaussian noise standard deviation.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 200,
            classes: 6,
            typo_classes: 6,
            image_size: 32,
            patch_size: 4,
            region: RegionPlacement::FixedBottom,
            region_rows: 1,
            region_cols: None,
            noise: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    fn region_size(&self) -> (usize, usize) {
        (self.region_rows, self.region_cols.unwrap_or(self.grid()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::invalid(format!(
                "image size {} not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        let g = self.grid();
        let (rh, rw) = self.region_size();
        if rh == 0 || rw == 0 || rh > g || rw > g {
            return Err(Error::invalid(format!(
                "region {rh}x{rw} patches does not fit a {g}x{g} grid"
            )));
        }
        if self.classes == 0 || self.typo_classes < 2 {
            return Err(Error::invalid(
                "need at least one class and two typo classes".to_string(),
            ));
        }
        if self.typo_classes > self.classes {
            return Err(Error::invalid(format!(
                "typo classes ({}) must name image classes ({})",
                self.typo_classes, self.classes
            )));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::invalid(format!("noise {} must be >= 0", self.noise)));
        }
        Ok(())
    }
}

/// The clean and typographic variants of one generated dataset. Entry `i`
/// of both manifests comes from the same base image.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub clean: Dataset,
    pub typo: Dataset,
}

pub fn class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class_{i}")).collect()
}

/// Flagged token indices of a `rows × cols` region with top-left corner
/// `(top, left)` on a `grid × grid` token layout.
pub fn region_tokens(grid: usize, top: usize, left: usize, rows: usize, cols: usize) -> Vec<usize> {
    (top..top + rows)
        .flat_map(|y| (left..left + cols).map(move |x| y * grid + x))
        .collect()
}

/// Writes `pattern` (channel-major patch vector) plus optional
/// Gaussian noise into token `t` of `image`.
fn paint_patch(
    image: &mut Tensor,
    grid: usize,
    patch: usize,
    t: usize,
    pattern: &[f32],
    rng: &mut ChaCha8Rng,
    noise: Option<Normal<f32>>,
) {
    let size = grid * patch;
    let (gy, gx) = (t / grid, t % grid);
    let data = image.data_mut();
    let mut k = 0;
    for c in 0..3 {
        for py in 0..patch {
            for px in 0..patch {
                let y = gy * patch + py;
                let x = gx * patch + px;
                let n = noise.map_or(0.0, |d| d.sample(rng));
                data[(c * size + y) * size + x] = pattern[k] + n;
                k += 1;
            }
        }
    }
}

/// Renders one sample: the clean image and, when `overlay` is given as
/// `(typo_class, tokens)`, the typographic variant.
pub fn render_sample(
    bank: &PatternBank,
    grid: usize,
    class: usize,
    overlay: Option<(usize, &[usize])>,
    noise: f32,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Option<Tensor>) {
    let p = bank.patch_size;
    let size = grid * p;
    let dist = (noise > 0.0).then(|| Normal::new(0.0, noise).expect("noise >= 0"));
    let mut clean = Tensor::zeros(vec![3, size, size]);
    for t in 0..grid * grid {
        let amp: f32 = rng.random_range(0.8..1.2);
        let pat: Vec<f32> = bank.object[class].iter().map(|v| v * amp).collect();
        paint_patch(&mut clean, grid, p, t, &pat, rng, dist);
    }
    let typo = overlay.map(|(k, tokens)| {
        let mut img = clean.clone();
        let pat: Vec<f32> = bank.typo[k]
            .iter()
            .zip(&bank.ink)
            .map(|(a, b)| a + b)
            .collect();
        for &t in tokens {
            paint_patch(&mut img, grid, p, t, &pat, rng, dist);
        }
        img
    });
    (clean, typo)
}

/// Generates `n` base samples and both of their variants.
///
/// Sample `i` has image class `i mod classes`; its typo class is drawn
/// uniformly from the typo classes other than its own class. Each sample
/// uses its own RNG stream so generation is order-independent.
pub fn gen_synthetic_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let bank = PatternBank::new(cfg.classes, cfg.typo_classes, cfg.patch_size)?;
    let g = cfg.grid();
    let (rh, rw) = cfg.region_size();
    let samples: Vec<_> = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let y = i % cfg.classes;
            let choices: Vec<usize> = (0..cfg.typo_classes).filter(|&k| k != y).collect();
            let yt = choices[rng.random_range(0..choices.len())];
            let (top, left) = match cfg.region {
                RegionPlacement::FixedBottom => (g - rh, (g - rw) / 2),
                RegionPlacement::Random => {
                    (rng.random_range(0..=g - rh), rng.random_range(0..=g - rw))
                }
            };
            let tokens = region_tokens(g, top, left, rh, rw);
            let (clean, typo) = render_sample(&bank, g, y, Some((yt, &tokens)), cfg.noise, &mut rng);
            (y, yt, tokens, clean, typo.expect("overlay requested"))
        })
        .collect();

    let names = class_names(cfg.classes);
    let typo_names = names[..cfg.typo_classes].to_vec();
    let mut clean_entries = Vec::with_capacity(cfg.n);
    let mut typo_entries = Vec::with_capacity(cfg.n);
    let mut clean_images = Vec::with_capacity(cfg.n);
    let mut typo_images = Vec::with_capacity(cfg.n);
    for (i, (y, yt, tokens, clean, typo)) in samples.into_iter().enumerate() {
        clean_entries.push(ManifestEntry {
            id: format!("c{i:05}"),
            tensor_path: String::new(),
            y_image: y,
            y_typo: None,
            mask: Vec::new(),
            tokens: g * g,
        });
        typo_entries.push(ManifestEntry {
            id: format!("t{i:05}"),
            tensor_path: String::new(),
            y_image: y,
            y_typo: Some(yt),
            mask: tokens,
            tokens: g * g,
        });
        clean_images.push(clean);
        typo_images.push(typo);
    }
    let manifest = |entries| DatasetManifest {
        entries,
        class_names: names.clone(),
        typo_class_names: typo_names.clone(),
    };
    Ok(SynthDataset {
        clean: Dataset::new(manifest(clean_entries), clean_images)?,
        typo: Dataset::new(manifest(typo_entries), typo_images)?,
    })
}

/// Tokens whose patch pixels differ between two images of the same size.
pub fn changed_tokens(a: &Tensor, b: &Tensor, patch: usize) -> Result<Vec<usize>> {
    let pa = crate::vit::patchify(a, patch)?;
    let pb = crate::vit::patchify(b, patch)?;
    Ok((0..pa.rows())
        .filter(|&t| pa.row(t) != pb.row(t))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor;
    use crate::score::expected_uniform_score;

    #[test]
    fn pattern_bank_is_orthonormal() {
        let b = PatternBank::new(4, 3, 3).unwrap();
        let all: Vec<&Vec<f32>> = b.object.iter().chain(&b.typo).chain([&b.ink]).collect();
        for (i, u) in all.iter().enumerate() {
            for (j, v) in all.iter().enumerate() {
                let d = tensor::dot(u, v);
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-5, "{i},{j}: {d}");
            }
        }
    }

    #[test]
    fn too_many_classes_for_patch() {
        assert!(PatternBank::new(2, 2, 1).is_err());
    }

    #[test]
    fn fixed_bottom_band_on_14_grid_has_42_tokens() {
        let cfg = SynthConfig {
            n: 4,
            image_size: 56,
            patch_size: 4,
            region_rows: 3,
            ..SynthConfig::default()
        };
        let ds = gen_synthetic_dataset(&cfg).unwrap();
        for e in ds.typo.entries() {
            assert_eq!(e.mask.len(), 42);
            assert!(e.mask.iter().all(|&t| t >= 11 * 14));
        }
        let masks: Vec<_> = ds.typo.entries().iter().map(|e| e.region_mask().unwrap()).collect();
        let u = expected_uniform_score(&masks).unwrap();
        assert!((u - 42.0 / 196.0).abs() < 1e-12);
        assert!((u - 0.2143).abs() < 1e-4);
    }

    #[test]
    fn clean_variant_has_no_typo() {
        let ds = gen_synthetic_dataset(&SynthConfig { n: 5, ..SynthConfig::default() }).unwrap();
        for e in ds.clean.entries() {
            assert!(e.mask.is_empty());
            assert!(e.y_typo.is_none());
        }
    }

    #[test]
    fn typo_label_never_equals_image_label() {
        let ds = gen_synthetic_dataset(&SynthConfig { n: 60, ..SynthConfig::default() }).unwrap();
        for e in ds.typo.entries() {
            assert_ne!(Some(e.y_image), e.y_typo);
        }
    }

    #[test]
    fn region_must_fit() {
        let cfg = SynthConfig {
            region_rows: 9,
            ..SynthConfig::default()
        };
        assert!(gen_synthetic_dataset(&cfg).is_err());
    }

    #[test]
    fn same_seed_same_bits() {
        let cfg = SynthConfig {
            n: 10,
            region: RegionPlacement::Random,
            region_rows: 2,
            region_cols: Some(3),
            seed: 9,
            ..SynthConfig::default()
        };
        assert_eq!(gen_synthetic_dataset(&cfg).unwrap(), gen_synthetic_dataset(&cfg).unwrap());
    }
}
