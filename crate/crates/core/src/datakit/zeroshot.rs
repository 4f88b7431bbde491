// SPDX-License-Identifier: MIT OR Apache-2.0

//! Zero-shot classification against class prototypes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{ClassPrototypes, Dataset};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};
use crate::vit::{CaptureFlags, InterventionSpec, VitWeights};

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub logits: Vec<f32>,
    pub probs: Vec<f32>,
    pub prediction: usize,
}

/// `logit_scale · ⟨normalize(embedding), prototype⟩`, softmax, argmax.
pub fn classify_embedding(
    embedding: &[f32],
    prototypes: &ClassPrototypes,
    logit_scale: f32,
) -> Result<Classification> {
    if embedding.len() != prototypes.width() {
        return Err(Error::shape(
            "zero_shot_classify",
            format!(
                "embedding width {} vs prototype width {}",
                embedding.len(),
                prototypes.width()
            ),
        ));
    }
    let e = tensor::l2_normalize(embedding);
    let logits: Vec<f32> = (0..prototypes.classes())
        .map(|c| (f64::from(logit_scale) * tensor::dot(&e, prototypes.matrix.row(c))) as f32)
        .collect();
    let mut probs = logits.clone();
    tensor::softmax_in_place(&mut probs);
    Ok(Classification {
        prediction: tensor::argmax(&logits),
        logits,
        probs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotSummary {
    pub n: usize,
    /// Fraction predicted as `y_image`.
    pub acc_image: f64,
    /// Fraction of typographic samples predicted as their `y_typo`
    /// (attack success); `None` when the dataset has no typo labels.
    pub acc_typo: Option<f64>,
    /// Mean probability assigned to `y_image`.
    pub mean_p_image: f64,
    /// Mean probability assigned to `y_typo` over typographic samples.
    pub mean_p_typo: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotResult {
    pub per_sample: Vec<Classification>,
    pub summary: ZeroShotSummary,
}

impl ZeroShotResult {
    pub fn predictions(&self) -> Vec<usize> {
        self.per_sample.iter().map(|c| c.prediction).collect()
    }
}

/// Runs the encoder under `iv` on every sample and scores the predictions.
pub fn zero_shot_classify(
    w: &VitWeights,
    iv: &InterventionSpec,
    data: &Dataset,
    prototypes: &ClassPrototypes,
) -> Result<ZeroShotResult> {
    if prototypes.width() != w.config.embed_dim {
        return Err(Error::shape(
            "zero_shot_classify",
            format!(
                "prototype width {} vs model embed dim {}",
                prototypes.width(),
                w.config.embed_dim
            ),
        ));
    }
    iv.validate(&w.config)?;
    let per_sample = data
        .images
        .par_iter()
        .map(|img| {
            let trace = w.forward(img, iv, CaptureFlags::default())?;
            classify_embedding(&trace.final_cls_embedding, prototypes, w.config.logit_scale)
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(data, &per_sample)?;
    Ok(ZeroShotResult {
        per_sample,
        summary,
    })
}

/// Classifies one image tensor.
pub fn classify_image(
    w: &VitWeights,
    iv: &InterventionSpec,
    image: &Tensor,
    prototypes: &ClassPrototypes,
) -> Result<Classification> {
    let trace = w.forward(image, iv, CaptureFlags::default())?;
    classify_embedding(&trace.final_cls_embedding, prototypes, w.config.logit_scale)
}

fn summarize(data: &Dataset, per_sample: &[Classification]) -> Result<ZeroShotSummary> {
    let classes = per_sample.first().map_or(0, |c| c.probs.len());
    let mut hit_image = 0usize;
    let mut p_image = 0.0f64;
    let mut typo_n = 0usize;
    let mut hit_typo = 0usize;
    let mut p_typo = 0.0f64;
    for (e, c) in data.entries().iter().zip(per_sample) {
        if e.y_image >= classes {
            return Err(Error::invalid(format!(
                "sample `{}` label {} outside {classes} prototype classes",
                e.id, e.y_image
            )));
        }
        hit_image += usize::from(c.prediction == e.y_image);
        p_image += f64::from(c.probs[e.y_image]);
        if let Some(t) = e.y_typo {
            if t >= classes {
                return Err(Error::invalid(format!(
                    "sample `{}` typo label {t} outside {classes} prototype classes",
                    e.id
                )));
            }
            typo_n += 1;
            hit_typo += usize::from(c.prediction == t);
            p_typo += f64::from(c.probs[t]);
        }
    }
    let n = per_sample.len();
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(ZeroShotSummary {
        n,
        acc_image: frac(hit_image, n),
        acc_typo: (typo_n > 0).then(|| frac(hit_typo, typo_n)),
        mean_p_image: if n == 0 { 0.0 } else { p_image / n as f64 },
        mean_p_typo: (typo_n > 0).then(|| p_typo / typo_n as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn protos(rows: &[Vec<f32>]) -> ClassPrototypes {
        let names = (0..rows.len()).map(|i| i.to_string()).collect();
        ClassPrototypes::new(rows, names).unwrap()
    }

    #[test]
    fn exact_match_wins_and_sharpens_with_scale() {
        let eye: Vec<Vec<f32>> = (0..4)
            .map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let p = protos(&eye);
        let emb = vec![0.0, 0.0, 3.0, 0.0];
        let mut last = 0.0;
        for scale in [1.0f32, 10.0, 100.0] {
            let c = classify_embedding(&emb, &p, scale).unwrap();
            assert_eq!(c.prediction, 2);
            assert!(c.probs[2] > last);
            last = c.probs[2];
        }
        assert!(last > 0.999);
    }

    #[test]
    fn identical_prototypes_tie_to_lower_index() {
        let p = protos(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]]);
        let c = classify_embedding(&[1.0, 0.0], &p, 100.0).unwrap();
        assert_eq!(c.prediction, 1);
    }

    #[test]
    fn width_mismatch() {
        let p = protos(&[vec![1.0, 0.0]]);
        assert!(classify_embedding(&[1.0, 0.0, 0.0], &p, 1.0).is_err());
    }
}
