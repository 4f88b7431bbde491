// SPDX-License-Identifier: MIT OR Apache-2.0

//! Typographic attention scores.
//!
//! For head `(ℓ, i)` and sample `x` with overlay mask `m`, the per-sample
//! score is the share of the head's spatial cls attention that lands on
//! flagged tokens, `Σ_t m_t·A*_t / Σ_t A*_t`. The head score is the mean of
//! that ratio over the dataset. Under uniform spatial attention it equals
//! `|m| / T`, independent of how much mass the head keeps on cls.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datakit::{Dataset, RegionMask};
use crate::error::{Error, Result};
use crate::vit::{CaptureFlags, HeadId, InterventionSpec, RunTrace, VitWeights};

/// Head scores `[L, I]` with their mean and per-layer maxima.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "I")]
    pub heads: usize,
    /// Row-major over (layer, head).
    pub scores: Vec<f64>,
    pub mean: f64,
    pub per_layer_max: Vec<f64>,
}

impl ScoreMatrix {
    pub fn from_scores(layers: usize, heads: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != layers * heads || scores.is_empty() {
            return Err(Error::invalid(format!(
                "{} scores for a {layers}x{heads} score matrix",
                scores.len()
            )));
        }
        if let Some(v) = scores.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("score {v} outside [0, 1]")));
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let per_layer_max = scores
            .chunks(heads)
            .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        Ok(Self {
            layers,
            heads,
            scores,
            mean,
            per_layer_max,
        })
    }

    pub fn get(&self, h: HeadId) -> f64 {
        self.scores[h.layer * self.heads + h.head]
    }

    /// Heads by descending score; equal scores in (layer, head) order.
    pub fn ranked(&self) -> Vec<(HeadId, f64)> {
        let mut v: Vec<(HeadId, f64)> = (0..self.layers)
            .flat_map(|l| (0..self.heads).map(move |h| HeadId::new(l, h)))
            .map(|h| (h, self.get(h)))
            .collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    /// Heads whose score is at least `factor` times the mean score.
    pub fn outliers(&self, factor: f64) -> Vec<HeadId> {
        self.ranked()
            .into_iter()
            .filter(|&(_, s)| s >= factor * self.mean)
            .map(|(h, _)| h)
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("score matrix", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| Error::json("score matrix", e))?;
        Self::from_scores(m.layers, m.heads, m.scores)
    }
}

/// Share of spatial attention mass on flagged tokens (0 when the spatial
/// mass is exactly zero).
pub fn masked_fraction(a_star: &[f32], mask: &RegionMask) -> Result<f64> {
    if a_star.len() != mask.tokens() {
        return Err(Error::shape(
            "typo_attention_score",
            format!("{} spatial weights vs {}-token mask", a_star.len(), mask.tokens()),
        ));
    }
    let mut on = 0.0f64;
    let mut total = 0.0f64;
    for (&a, &f) in a_star.iter().zip(mask.flags()) {
        let a = f64::from(a);
        total += a;
        if f {
            on += a;
        }
    }
    Ok(if total > 0.0 { on / total } else { 0.0 })
}

/// Per-head ratios for one traced sample, row-major over (layer, head).
pub fn sample_ratios(trace: &RunTrace, mask: &RegionMask, layers: usize, heads: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(layers * heads);
    for l in 0..layers {
        for h in 0..heads {
            let row = trace.cls_attention(HeadId::new(l, h))?;
            out.push(masked_fraction(&row[1..], mask)?);
        }
    }
    Ok(out)
}

/// Mean over samples of each head's masked attention share.
///
/// Each head's per-sample values are summed in sorted order, which makes
/// the result independent of dataset order down to the last bit.
pub fn typo_attention_score(w: &VitWeights, data: &Dataset) -> Result<ScoreMatrix> {
    typo_attention_score_with(w, data, &InterventionSpec::none())
}

/// [`typo_attention_score`] under an intervention.
pub fn typo_attention_score_with(
    w: &VitWeights,
    data: &Dataset,
    iv: &InterventionSpec,
) -> Result<ScoreMatrix> {
    if data.is_empty() {
        return Err(Error::invalid("cannot score an empty dataset"));
    }
    let masks = data
        .entries()
        .iter()
        .map(|e| {
            let m = e.region_mask()?;
            if m.is_empty() {
                return Err(Error::invalid(format!(
                    "sample `{}` has an all-zero mask; only typographic samples can be scored",
                    e.id
                )));
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let (layers, heads) = (w.config.layers, w.config.heads);
    let per_sample = data
        .images
        .par_iter()
        .zip(masks.par_iter())
        .map(|(img, mask)| {
            let trace = w.forward(img, iv, CaptureFlags::attention())?;
            sample_ratios(&trace, mask, layers, heads)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_sample.len() as f64;
    let scores = (0..layers * heads)
        .map(|k| {
            let mut col: Vec<f64> = per_sample.iter().map(|s| s[k]).collect();
            col.sort_by(f64::total_cmp);
            col.iter().sum::<f64>() / n
        })
        .collect();
    ScoreMatrix::from_scores(layers, heads, scores)
}

/// Score every head would get under uniform spatial attention: the mean of
/// `|m| / T` over the masks.
pub fn expected_uniform_score(masks: &[RegionMask]) -> Result<f64> {
    if masks.is_empty() {
        return Err(Error::invalid("no masks"));
    }
    let total: f64 = masks
        .iter()
        .map(|m| m.count() as f64 / m.tokens() as f64)
        .sum();
    Ok(total / masks.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_mask_three_of_fourteen() {
        let m = RegionMask::from_indices(14, &[11, 12, 13]).unwrap();
        let u = expected_uniform_score(&[m]).unwrap();
        assert!((u - 3.0 / 14.0).abs() < 1e-15);
        assert!((u - 0.214).abs() < 5e-4);
    }

    #[test]
    fn full_mask_scores_one() {
        let m = RegionMask::from_indices(4, &[0, 1, 2, 3]).unwrap();
        assert_eq!(expected_uniform_score(&[m]).unwrap(), 1.0);
    }

    #[test]
    fn uniform_expectation_is_mean_of_ratios() {
        let a = RegionMask::from_indices(10, &[0]).unwrap();
        let b = RegionMask::from_indices(10, &[0, 1, 2]).unwrap();
        assert!((expected_uniform_score(&[a, b]).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn masked_fraction_ignores_cls_mass() {
        let m = RegionMask::from_indices(4, &[1]).unwrap();
        let f = masked_fraction(&[0.1, 0.2, 0.05, 0.05], &m).unwrap();
        assert!((f - 0.5).abs() < 1e-7);
    }

    #[test]
    fn ranking_breaks_ties_by_layer_then_head() {
        let s = ScoreMatrix::from_scores(2, 2, vec![0.2, 0.5, 0.5, 0.1]).unwrap();
        let r: Vec<HeadId> = s.ranked().into_iter().map(|(h, _)| h).collect();
        assert_eq!(
            r,
            vec![HeadId::new(0, 1), HeadId::new(1, 0), HeadId::new(0, 0), HeadId::new(1, 1)]
        );
        assert_eq!(s.per_layer_max, vec![0.5, 0.5]);
        assert!((s.mean - 0.325).abs() < 1e-12);
    }

    #[test]
    fn score_matrix_json_round_trip() {
        let s = ScoreMatrix::from_scores(1, 3, vec![0.1, 0.2, 0.9]).unwrap();
        let text = s.to_json().unwrap();
        assert!(text.contains("\"L\"") && text.contains("\"per_layer_max\""));
        assert_eq!(ScoreMatrix::from_json(&text).unwrap(), s);
    }

    #[test]
    fn out_of_range_scores_rejected() {
        assert!(ScoreMatrix::from_scores(1, 2, vec![0.1, 1.5]).is_err());
        assert!(ScoreMatrix::from_scores(0, 0, vec![]).is_err());
    }
}
