// SPDX-License-Identifier: MIT OR Apache-2.0

//! Post-hoc analyses: PCA intrinsic dimensionality along the residual
//! stream and the attention-sink spatial norm as a clean/typo detector.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datakit::Dataset;
use crate::error::{Error, Result};
use crate::probe::{self, CapturePoint, ProbeConfig};
use crate::tensor::{self, Tensor};
use crate::vit::{CaptureFlags, HeadId, InterventionSpec, VitWeights};

/// Default explained-variance threshold.
pub const DEFAULT_ID_THRESHOLD: f64 = 0.95;

// cumulative ratios within this of the threshold count as reaching it
const RATIO_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicDim {
    pub id: usize,
    /// Set when the data has zero total variance (`id` is then 0).
    pub zero_variance: bool,
    /// Eigenvalues of the covariance, descending.
    pub spectrum: Vec<f64>,
}

/// Smallest `k` whose top-`k` eigenvalues explain at least `threshold` of
/// the total variance.
pub fn intrinsic_dimensionality(x: &Tensor, threshold: f64) -> Result<IntrinsicDim> {
    if x.ndim() != 2 || x.rows() < 2 {
        return Err(Error::invalid(format!(
            "intrinsic dimensionality needs at least 2 rows, got shape {:?}",
            x.shape()
        )));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} outside (0, 1]")));
    }
    let spectrum = tensor::pca_spectrum(x)?;
    let total: f64 = spectrum.iter().sum();
    let max = spectrum.first().copied().unwrap_or(0.0);
    if total <= 0.0 || max <= 0.0 {
        return Ok(IntrinsicDim {
            id: 0,
            zero_variance: true,
            spectrum,
        });
    }
    let mut acc = 0.0;
    let mut id = spectrum.len();
    for (k, l) in spectrum.iter().enumerate() {
        acc += l;
        if acc / total >= threshold - RATIO_SLACK {
            id = k + 1;
            break;
        }
    }
    Ok(IntrinsicDim {
        id,
        zero_variance: false,
        spectrum,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdPoint {
    pub capture_point: CapturePoint,
    pub id: usize,
    pub zero_variance: bool,
    /// Leading eigenvalues (at most ten).
    pub top_eigenvalues: Vec<f64>,
    pub total_variance: f64,
}

/// Intrinsic dimensionality of the cls activations at every capture point.
pub fn id_curve(w: &VitWeights, data: &Dataset, threshold: f64) -> Result<Vec<IdPoint>> {
    let emb = probe::extract_all_embeddings(w, data, &InterventionSpec::none())?;
    emb.par_iter()
        .map(|(p, x)| {
            let r = intrinsic_dimensionality(x, threshold)?;
            Ok(IdPoint {
                capture_point: *p,
                id: r.id,
                zero_variance: r.zero_variance,
                top_eigenvalues: r.spectrum.iter().take(10).copied().collect(),
                total_variance: r.spectrum.iter().sum(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("no values to summarize"));
        }
        let n = values.len();
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        Ok(Self {
            n,
            mean,
            std: var.sqrt(),
            min: v[0],
            median,
            max: v[n - 1],
        })
    }
}

/// `1 − A_cls` of head `h` for every sample, in manifest order.
pub fn spatial_norms(w: &VitWeights, h: HeadId, data: &Dataset) -> Result<Vec<f64>> {
    w.config.check_head(h)?;
    data.images
        .par_iter()
        .map(|img| {
            let trace = w.forward(img, &InterventionSpec::none(), CaptureFlags::attention())?;
            let row = trace.cls_attention(h)?;
            let spatial: f64 = row[1..].iter().map(|&a| f64::from(a)).sum();
            Ok(spatial.clamp(0.0, 1.0))
        })
        .collect()
}

/// Spatial attention norms of one head on a clean and a typographic set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkNorms {
    pub head: HeadId,
    pub clean: Vec<f64>,
    pub typo: Vec<f64>,
}

pub fn sink_norm_stats(w: &VitWeights, h: HeadId, clean: &Dataset, typo: &Dataset) -> Result<SinkNorms> {
    Ok(SinkNorms {
        head: h,
        clean: spatial_norms(w, h, clean)?,
        typo: spatial_norms(w, h, typo)?,
    })
}

/// Area under the ROC curve via the Mann–Whitney statistic: the chance a
/// random positive outscores a random negative, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "roc_auc",
            format!("{} scores vs {} labels", scores.len(), labels.len()),
        ));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::invalid(format!("score {s} is not a number")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("roc_auc needs both positive and negative labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average 1-based ranks over tie groups
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkReport {
    pub head: HeadId,
    pub auc: f64,
    pub clean_stats: Summary,
    pub typo_stats: Summary,
    /// AUC of a linear probe on the final cls embedding, when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub linear_auc: Option<f64>,
}

/// Spatial norms of head `h` as a typo detector (typo = positive).
pub fn sink_report(w: &VitWeights, h: HeadId, clean: &Dataset, typo: &Dataset) -> Result<SinkReport> {
    let norms = sink_norm_stats(w, h, clean, typo)?;
    let scores: Vec<f64> = norms.clean.iter().chain(&norms.typo).copied().collect();
    let labels: Vec<bool> = (0..scores.len()).map(|i| i >= norms.clean.len()).collect();
    Ok(SinkReport {
        head: h,
        auc: roc_auc(&scores, &labels)?,
        clean_stats: Summary::of(&norms.clean)?,
        typo_stats: Summary::of(&norms.typo)?,
        linear_auc: None,
    })
}

/// AUC of a clean-vs-typo logistic probe on the final cls embedding,
/// scored in-sample by its typo logit margin.
pub fn linear_baseline_auc(
    w: &VitWeights,
    clean: &Dataset,
    typo: &Dataset,
    cfg: &ProbeConfig,
) -> Result<f64> {
    let a = probe::extract_embeddings(w, clean, CapturePoint::Final)?;
    let b = probe::extract_embeddings(w, typo, CapturePoint::Final)?;
    let rows: Vec<Vec<f32>> = (0..a.rows())
        .map(|i| a.row(i).to_vec())
        .chain((0..b.rows()).map(|i| b.row(i).to_vec()))
        .collect();
    let x = Tensor::from_rows(&rows)?;
    let y: Vec<usize> = (0..rows.len()).map(|i| usize::from(i >= a.rows())).collect();
    let (model, _) = probe::train_probe(&x, &y, 2, cfg)?;
    let margin: Vec<f64> = (0..x.rows())
        .map(|i| {
            let r = x.row(i);
            tensor::dot(model.weight.row(1), r) - tensor::dot(model.weight.row(0), r)
                + f64::from(model.bias.data()[1] - model.bias.data()[0])
        })
        .collect();
    let labels: Vec<bool> = y.iter().map(|&v| v == 1).collect();
    roc_auc(&margin, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_basic_cases() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.9, 0.1], &[false, true]).unwrap(), 0.0);
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(roc_auc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn auc_partial_tie() {
        // one positive ties one negative, beats the other: (1 + 0.5) / 2
        let auc = roc_auc(&[0.5, 0.5, 0.1], &[true, false, false]).unwrap();
        assert!((auc - 0.75).abs() < 1e-15);
    }

    #[test]
    fn summary_even_median() {
        let s = Summary::of(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(s.median, 2.5);
        assert_eq!((s.min, s.max, s.n), (1.0, 4.0, 4));
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_is_flagged() {
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let r = intrinsic_dimensionality(&x, 0.95).unwrap();
        assert_eq!(r.id, 0);
        assert!(r.zero_variance);
    }

    #[test]
    fn id_preconditions() {
        let x = Tensor::zeros(vec![1, 3]);
        assert!(intrinsic_dimensionality(&x, 0.95).is_err());
        let x = Tensor::zeros(vec![3, 3]);
        assert!(intrinsic_dimensionality(&x, 0.0).is_err());
        assert!(intrinsic_dimensionality(&x, 1.5).is_err());
    }
}
