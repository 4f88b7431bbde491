// SPDX-License-Identifier: MIT OR Apache-2.0

//! Naive f64 reference encoder, written from the block equations with
//! plain loops and no engine kernels.

#![allow(clippy::needless_range_loop)]

use std::f64::consts::PI;

use typolens::vit::VitWeights;
use typolens::Tensor;

type Mat = Vec<Vec<f64>>;

pub fn erf_series(x: f64) -> f64 {
    if x.abs() > 6.0 {
        return x.signum();
    }
    // Maclaurin series; fine in f64 for |x| <= 6 at the tolerance used here
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= -x * x / n;
        let add = term / (2.0 * n + 1.0);
        sum += add;
        if add.abs() < 1e-17 * sum.abs().max(1e-300) && n > 5.0 {
            break;
        }
        if n > 400.0 {
            break;
        }
    }
    2.0 / PI.sqrt() * sum
}

fn vecf(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

fn matf(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).iter().map(|&v| f64::from(v)).collect()).collect()
}

fn ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * g[i] + b[i])
        .collect()
}

/// `W·x + b` with `W` stored `[out, in]`.
fn affine(w: &Mat, b: Option<&[f64]>, x: &[f64]) -> Vec<f64> {
    w.iter()
        .enumerate()
        .map(|(o, row)| row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b.map_or(0.0, |b| b[o]))
        .collect()
}

pub struct Reference {
    /// `[layer][head][query][key]`
    pub attention: Vec<Vec<Mat>>,
    pub residual: Vec<Mat>,
    pub final_ln: Vec<f64>,
    pub embedding: Vec<f64>,
}

pub fn reference_forward(w: &VitWeights, image: &Tensor) -> Reference {
    let c = &w.config;
    let (p, g, d) = (c.patch_size, c.grid(), c.width);
    let size = c.image_size;
    let px = |ch: usize, y: usize, x: usize| f64::from(image.data()[ch * size * size + y * size + x]);
    let pw = matf(&w.patch_weight);
    let pb = vecf(&w.patch_bias);
    let pos = matf(&w.pos_embed);
    let mut h: Mat = vec![vecf(&w.cls_token)];
    for gy in 0..g {
        for gx in 0..g {
            let mut patch = Vec::new();
            for ch in 0..3 {
                for yy in 0..p {
                    for xx in 0..p {
                        patch.push(px(ch, gy * p + yy, gx * p + xx));
                    }
                }
            }
            h.push(affine(&pw, Some(&pb), &patch));
        }
    }
    for (t, row) in h.iter_mut().enumerate() {
        for k in 0..d {
            row[k] += pos[t][k];
        }
    }
    let n = h.len();
    let dh = d / c.heads;
    let mut attention = Vec::new();
    let mut residual = Vec::new();
    for b in &w.blocks {
        let xs: Mat = h.iter().map(|r| ln(r, &vecf(&b.ln1_weight), &vecf(&b.ln1_bias))).collect();
        let q: Mat = xs.iter().map(|r| affine(&matf(&b.q_weight), Some(&vecf(&b.q_bias)), r)).collect();
        let k: Mat = xs.iter().map(|r| affine(&matf(&b.k_weight), Some(&vecf(&b.k_bias)), r)).collect();
        let v: Mat = xs.iter().map(|r| affine(&matf(&b.v_weight), Some(&vecf(&b.v_bias)), r)).collect();
        let mut z = vec![vec![0.0; d]; n];
        let mut heads = Vec::new();
        for hd in 0..c.heads {
            let r = hd * dh..(hd + 1) * dh;
            let mut a = vec![vec![0.0; n]; n];
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| {
                        r.clone().map(|e| q[i][e] * k[j][e]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let s: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for j in 0..n {
                    a[i][j] = (logits[j] - m).exp() / s;
                }
                for e in r.clone() {
                    z[i][e] = (0..n).map(|j| a[i][j] * v[j][e]).sum();
                }
            }
            heads.push(a);
        }
        attention.push(heads);
        for i in 0..n {
            let o = affine(&matf(&b.out_weight), Some(&vecf(&b.out_bias)), &z[i]);
            for e in 0..d {
                h[i][e] += o[e];
            }
        }
        for i in 0..n {
            let x2 = ln(&h[i], &vecf(&b.ln2_weight), &vecf(&b.ln2_bias));
            let u = affine(&matf(&b.fc1_weight), Some(&vecf(&b.fc1_bias)), &x2);
            let a: Vec<f64> = u.iter().map(|&t| 0.5 * t * (1.0 + erf_series(t / 2f64.sqrt()))).collect();
            let o = affine(&matf(&b.fc2_weight), Some(&vecf(&b.fc2_bias)), &a);
            for e in 0..d {
                h[i][e] += o[e];
            }
        }
        residual.push(h.clone());
    }
    let final_ln = ln(&h[0], &vecf(&w.ln_final_weight), &vecf(&w.ln_final_bias));
    let embedding = affine(&matf(&w.proj), None, &final_ln);
    Reference {
        attention,
        residual,
        final_ln,
        embedding,
    }
}

/// Largest deviation relative to the reference's scale (at least 1).
pub fn scaled_err(engine: &[f32], reference: &[f64]) -> f64 {
    assert_eq!(engine.len(), reference.len());
    let scale = reference.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    engine
        .iter()
        .zip(reference)
        .map(|(&a, b)| (f64::from(a) - b).abs())
        .fold(0.0, f64::max)
        / scale
}

