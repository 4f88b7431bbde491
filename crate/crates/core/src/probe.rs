// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear probes on the cls residual stream.
//!
//! A probe is multinomial logistic regression fitted by full-batch gradient
//! descent on raw (unstandardized) cls activations taken at one capture
//! point. A probe curve fits one probe per capture point, from the
//! embedding through every attention and MLP sublayer to the final layer
//! norm, and reports held-out accuracy at each.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{self, Metadata, TensorMap};
use crate::datakit::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};
use crate::vit::{CaptureFlags, InterventionSpec, RunTrace, VitWeights};

/// Where along the cls residual stream an activation is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CapturePoint {
    /// Before block 0.
    Embed,
    /// After the attention sublayer of a block.
    PostAttn(usize),
    /// After the MLP sublayer of a block.
    PostBlock(usize),
    /// Output of the final layer norm (the projection input).
    Final,
}

impl CapturePoint {
    /// `embed, post_attn.0, post_block.0, …, final`.
    pub fn sequence(layers: usize) -> Vec<CapturePoint> {
        let mut v = vec![CapturePoint::Embed];
        for l in 0..layers {
            v.push(CapturePoint::PostAttn(l));
            v.push(CapturePoint::PostBlock(l));
        }
        v.push(CapturePoint::Final);
        v
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        match *self {
            CapturePoint::PostAttn(l) | CapturePoint::PostBlock(l) if l >= layers => Err(
                Error::invalid(format!("capture point {self} outside a {layers}-layer model")),
            ),
            _ => Ok(()),
        }
    }

    /// The cls row at this point of a trace with residual captures.
    pub fn cls_row(&self, trace: &RunTrace) -> Result<Vec<f32>> {
        Ok(match *self {
            CapturePoint::Embed => trace.residual_pre_attn(0)?.row(0).to_vec(),
            CapturePoint::PostAttn(l) => trace.residual_post_attn(l)?.row(0).to_vec(),
            CapturePoint::PostBlock(l) => trace.residual_post_block(l)?.row(0).to_vec(),
            CapturePoint::Final => trace.final_ln_cls.clone(),
        })
    }
}

impl fmt::Display for CapturePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CapturePoint::Embed => write!(f, "embed"),
            CapturePoint::PostAttn(l) => write!(f, "post_attn.{l}"),
            CapturePoint::PostBlock(l) => write!(f, "post_block.{l}"),
            CapturePoint::Final => write!(f, "final"),
        }
    }
}

impl FromStr for CapturePoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown capture point `{s}`"));
        match s {
            "embed" => Ok(CapturePoint::Embed),
            "final" => Ok(CapturePoint::Final),
            _ => {
                let (kind, layer) = s.split_once('.').ok_or_else(bad)?;
                let layer = layer.parse().map_err(|_| bad())?;
                match kind {
                    "post_attn" => Ok(CapturePoint::PostAttn(layer)),
                    "post_block" => Ok(CapturePoint::PostBlock(layer)),
                    _ => Err(bad()),
                }
            }
        }
    }
}

impl Serialize for CapturePoint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CapturePoint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTarget {
    ImageLabel,
    TypoLabel,
}

impl FromStr for ProbeTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" | "image_label" => Ok(Self::ImageLabel),
            "typo" | "typo_label" => Ok(Self::TypoLabel),
            _ => Err(Error::invalid(format!("probe target `{s}` is not `image` or `typo`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
    /// Stop once the gradient norm falls below this.
    pub tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 0.1,
            l2: 1e-4,
            seed: 0,
            tol: 1e-6,
        }
    }
}

/// Fitted linear probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    /// `[classes, d]`.
    pub weight: Tensor,
    /// `[classes]`.
    pub bias: Tensor,
    pub capture_point: Option<CapturePoint>,
    pub target: Option<ProbeTarget>,
}

impl ProbeModel {
    pub fn classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn predict(&self, x: &[f32]) -> usize {
        let logits: Vec<f32> = (0..self.classes())
            .map(|c| (tensor::dot(self.weight.row(c), x) + f64::from(self.bias.data()[c])) as f32)
            .collect();
        tensor::argmax(&logits)
    }
}

/// Outcome of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub final_loss: f64,
    pub converged: bool,
    pub final_lr: f64,
    /// Loss after every accepted step, starting with the initial loss.
    pub loss_history: Vec<f64>,
}

/// Mean cross-entropy plus `l2/2 · ‖W‖²` and its gradient.
///
/// `weight` is row-major `[classes, d]`. Returns `(loss, dW, db)`.
pub fn probe_loss_and_grad(
    weight: &[f64],
    bias: &[f64],
    x: &Tensor,
    y: &[usize],
    l2: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    let classes = bias.len();
    let (n, d) = (x.rows(), x.cols());
    let mut gw = vec![0.0f64; classes * d];
    let mut gb = vec![0.0f64; classes];
    let mut loss = 0.0f64;
    let mut logits = vec![0.0f64; classes];
    for i in 0..n {
        let xi = x.row(i);
        for c in 0..classes {
            let w = &weight[c * d..(c + 1) * d];
            logits[c] = bias[c]
                + w.iter()
                    .zip(xi)
                    .map(|(a, &b)| a * f64::from(b))
                    .sum::<f64>();
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let log_z = max + z.ln();
        loss += log_z - logits[y[i]];
        for c in 0..classes {
            let p = (logits[c] - log_z).exp() - if c == y[i] { 1.0 } else { 0.0 };
            gb[c] += p;
            for (g, &v) in gw[c * d..(c + 1) * d].iter_mut().zip(xi) {
                *g += p * f64::from(v);
            }
        }
    }
    let inv = 1.0 / n as f64;
    loss *= inv;
    gw.iter_mut().for_each(|g| *g *= inv);
    gb.iter_mut().for_each(|g| *g *= inv);
    loss += 0.5 * l2 * weight.iter().map(|w| w * w).sum::<f64>();
    for (g, w) in gw.iter_mut().zip(weight) {
        *g += l2 * w;
    }
    (loss, gw, gb)
}

/// Full-batch gradient descent from zero weights. A step that raises the
/// loss is undone and retried with half the learning rate, so the loss
/// history never increases.
pub fn train_probe(
    x: &Tensor,
    y: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<(ProbeModel, TrainReport)> {
    let (n, d) = (x.rows(), x.cols());
    if x.ndim() != 2 || n != y.len() {
        return Err(Error::shape(
            "train_probe",
            format!("features {:?} vs {} labels", x.shape(), y.len()),
        ));
    }
    if classes == 0 || n < classes {
        return Err(Error::invalid(format!(
            "need at least as many samples ({n}) as classes ({classes})"
        )));
    }
    if let Some(&bad) = y.iter().find(|&&v| v >= classes) {
        return Err(Error::invalid(format!("label {bad} outside {classes} classes")));
    }
    if !(cfg.lr > 0.0 && cfg.l2 >= 0.0) {
        return Err(Error::invalid("learning rate must be > 0 and l2 >= 0"));
    }
    x.check_finite("probe features")?;

    let mut w = vec![0.0f64; classes * d];
    let mut b = vec![0.0f64; classes];
    let mut lr = cfg.lr;
    let (mut loss, mut gw, mut gb) = probe_loss_and_grad(&w, &b, x, y, cfg.l2);
    let mut history = vec![loss];
    let mut converged = false;
    let mut epochs = 0;
    while epochs < cfg.epochs {
        let gnorm = (gw.iter().chain(&gb).map(|g| g * g).sum::<f64>()).sqrt();
        if gnorm < cfg.tol {
            converged = true;
            break;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let w2: Vec<f64> = w.iter().zip(&gw).map(|(a, g)| a - lr * g).collect();
            let b2: Vec<f64> = b.iter().zip(&gb).map(|(a, g)| a - lr * g).collect();
            let (l2loss, gw2, gb2) = probe_loss_and_grad(&w2, &b2, x, y, cfg.l2);
            if l2loss <= loss {
                w = w2;
                b = b2;
                loss = l2loss;
                gw = gw2;
                gb = gb2;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            // no descent direction at representable step sizes
            converged = true;
            break;
        }
        epochs += 1;
        history.push(loss);
    }
    let model = ProbeModel {
        weight: Tensor::new(vec![classes, d], w.iter().map(|&v| v as f32).collect())?,
        bias: Tensor::new(vec![classes], b.iter().map(|&v| v as f32).collect())?,
        capture_point: None,
        target: None,
    };
    model.weight.check_finite("probe weight")?;
    Ok((
        model,
        TrainReport {
            epochs,
            final_loss: loss,
            converged,
            final_lr: lr,
            loss_history: history,
        },
    ))
}

/// Fraction of rows whose argmax logit equals the label (ties toward the
/// lowest class index).
pub fn probe_accuracy(p: &ProbeModel, x: &Tensor, y: &[usize]) -> Result<f64> {
    if x.cols() != p.weight.cols() || x.rows() != y.len() {
        return Err(Error::shape(
            "probe_accuracy",
            format!(
                "features {:?} vs probe width {} and {} labels",
                x.shape(),
                p.weight.cols(),
                y.len()
            ),
        ));
    }
    if y.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let hits = (0..x.rows()).filter(|&i| p.predict(x.row(i)) == y[i]).count();
    Ok(hits as f64 / y.len() as f64)
}

/// cls activations at every capture point, one pass over the data.
pub fn extract_all_embeddings(
    w: &VitWeights,
    data: &Dataset,
    iv: &InterventionSpec,
) -> Result<Vec<(CapturePoint, Tensor)>> {
    if data.is_empty() {
        return Err(Error::invalid("manifest is empty"));
    }
    let points = CapturePoint::sequence(w.config.layers);
    let rows: Vec<Vec<Vec<f32>>> = data
        .images
        .par_iter()
        .map(|img| {
            let trace = w.forward(img, iv, CaptureFlags::residuals())?;
            points.iter().map(|p| p.cls_row(&trace)).collect()
        })
        .collect::<Result<_>>()?;
    points
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let m: Vec<Vec<f32>> = rows.iter().map(|r| r[k].clone()).collect();
            Ok((p, Tensor::from_rows(&m)?))
        })
        .collect()
}

/// cls activations `[n, d]` at one capture point, rows in manifest order.
pub fn extract_embeddings(w: &VitWeights, data: &Dataset, point: CapturePoint) -> Result<Tensor> {
    point.validate(w.config.layers)?;
    if data.is_empty() {
        return Err(Error::invalid("manifest is empty"));
    }
    let rows = data
        .images
        .par_iter()
        .map(|img| {
            let trace = w.forward(img, &InterventionSpec::none(), CaptureFlags::residuals())?;
            point.cls_row(&trace)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// True when sample `id` falls in the 20% evaluation split for `seed`.
pub fn is_eval_sample(id: &str, seed: u64) -> bool {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let digest = h.finalize();
    let v = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    v % 5 == 0
}

/// Labels for `target`; samples without that label are skipped.
fn labelled(data: &Dataset, target: ProbeTarget) -> (Vec<usize>, Vec<usize>, usize) {
    let classes = match target {
        ProbeTarget::ImageLabel => data.manifest.class_names.len(),
        ProbeTarget::TypoLabel => data.manifest.typo_class_names.len(),
    };
    let mut idx = Vec::new();
    let mut y = Vec::new();
    for (i, e) in data.entries().iter().enumerate() {
        let label = match target {
            ProbeTarget::ImageLabel => Some(e.y_image),
            ProbeTarget::TypoLabel => e.y_typo,
        };
        if let Some(l) = label {
            idx.push(i);
            y.push(l);
        }
    }
    (idx, y, classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub capture_point: CapturePoint,
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub converged: bool,
    pub epochs: usize,
}

/// Fits one probe per capture point and reports held-out accuracy.
pub fn probe_curve(
    w: &VitWeights,
    data: &Dataset,
    target: ProbeTarget,
    cfg: &ProbeConfig,
) -> Result<Vec<ProbePoint>> {
    Ok(probe_curve_models(w, data, target, cfg)?
        .into_iter()
        .map(|(p, _)| p)
        .collect())
}

/// [`probe_curve`] that also returns the fitted probes.
pub fn probe_curve_models(
    w: &VitWeights,
    data: &Dataset,
    target: ProbeTarget,
    cfg: &ProbeConfig,
) -> Result<Vec<(ProbePoint, ProbeModel)>> {
    let (idx, y, classes) = labelled(data, target);
    if idx.is_empty() {
        return Err(Error::invalid(format!("no samples carry a {target:?} label")));
    }
    let subset = data.select(&idx);
    let (train, eval): (Vec<usize>, Vec<usize>) =
        (0..idx.len()).partition(|&i| !is_eval_sample(&subset.entries()[i].id, cfg.seed));
    if train.is_empty() || eval.is_empty() {
        return Err(Error::invalid(format!(
            "split left {} train and {} eval samples",
            train.len(),
            eval.len()
        )));
    }
    let embeddings = extract_all_embeddings(w, &subset, &InterventionSpec::none())?;
    let pick = |x: &Tensor, rows: &[usize]| -> Result<Tensor> {
        Tensor::from_rows(&rows.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>())
    };
    let y_train: Vec<usize> = train.iter().map(|&i| y[i]).collect();
    let y_eval: Vec<usize> = eval.iter().map(|&i| y[i]).collect();
    embeddings
        .par_iter()
        .map(|(point, x)| {
            let xt = pick(x, &train)?;
            let xe = pick(x, &eval)?;
            let (mut model, report) = train_probe(&xt, &y_train, classes, cfg)?;
            model.capture_point = Some(*point);
            model.target = Some(target);
            Ok((
                ProbePoint {
                    capture_point: *point,
                    accuracy: probe_accuracy(&model, &xe, &y_eval)?,
                    train_accuracy: probe_accuracy(&model, &xt, &y_train)?,
                    converged: report.converged,
                    epochs: report.epochs,
                },
                model,
            ))
        })
        .collect()
}

/// Probe export record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub capture_point: CapturePoint,
    pub target: ProbeTarget,
    pub classes: usize,
    pub accuracy: f64,
}

/// Writes `stem.json` (the record) and `stem.safetensors` (`weight`, `bias`).
pub fn export_probe(model: &ProbeModel, accuracy: f64, dir: &Path, stem: &str) -> Result<()> {
    let record = ProbeRecord {
        capture_point: model
            .capture_point
            .ok_or_else(|| Error::invalid("probe has no capture point"))?,
        target: model
            .target
            .ok_or_else(|| Error::invalid("probe has no target"))?,
        classes: model.classes(),
        accuracy,
    };
    let json = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&record).map_err(|e| Error::json("probe", e))?;
    std::fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
    let mut map = TensorMap::new();
    map.insert("weight".into(), model.weight.clone());
    map.insert("bias".into(), model.bias.clone());
    container::write_tensors(&dir.join(format!("{stem}.safetensors")), &map, &Metadata::new())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capture_point_strings() {
        for p in CapturePoint::sequence(2) {
            assert_eq!(p.to_string().parse::<CapturePoint>().unwrap(), p);
        }
        assert_eq!(CapturePoint::sequence(2).len(), 6);
        assert!("post_mlp.1".parse::<CapturePoint>().is_err());
        assert!(CapturePoint::PostAttn(3).validate(2).is_err());
    }

    #[test]
    fn bias_only_classifier() {
        let p = ProbeModel {
            weight: Tensor::zeros(vec![3, 2]),
            bias: Tensor::new(vec![3], vec![1.0, 0.0, 0.0]).unwrap(),
            capture_point: None,
            target: None,
        };
        let x = Tensor::new(vec![4, 2], vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0, 0.0, 0.0]).unwrap();
        assert_eq!(probe_accuracy(&p, &x, &[0, 0, 0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn all_zero_logits_tie_to_class_zero() {
        let p = ProbeModel {
            weight: Tensor::zeros(vec![2, 1]),
            bias: Tensor::zeros(vec![2]),
            capture_point: None,
            target: None,
        };
        assert_eq!(p.predict(&[5.0]), 0);
    }

    #[test]
    fn too_few_samples() {
        let x = Tensor::zeros(vec![2, 3]);
        assert!(train_probe(&x, &[0, 1], 3, &ProbeConfig::default()).is_err());
        assert!(train_probe(&x, &[0, 5], 2, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn separable_without_l2_stops_at_cap() {
        let x = Tensor::new(vec![4, 1], vec![-2.0, -1.0, 1.0, 2.0]).unwrap();
        let cfg = ProbeConfig {
            epochs: 50,
            l2: 0.0,
            ..ProbeConfig::default()
        };
        let (m, r) = train_probe(&x, &[0, 0, 1, 1], 2, &cfg).unwrap();
        assert_eq!(r.epochs, 50);
        assert!(!r.converged);
        assert_eq!(probe_accuracy(&m, &x, &[0, 0, 1, 1]).unwrap(), 1.0);
    }

    #[test]
    fn zero_features_converge_to_class_prior() {
        let x = Tensor::zeros(vec![4, 2]);
        let (_, r) = train_probe(&x, &[0, 0, 0, 1], 2, &ProbeConfig { epochs: 5000, ..ProbeConfig::default() }).unwrap();
        assert!(r.converged);
        // loss at the optimum is the entropy of (3/4, 1/4)
        let h = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((r.final_loss - h).abs() < 1e-6, "{} vs {h}", r.final_loss);
    }

    #[test]
    fn split_is_about_twenty_percent() {
        let n = (0..2000).filter(|i| is_eval_sample(&format!("s{i}"), 0)).count();
        assert!((300..500).contains(&n), "{n}");
    }
}
