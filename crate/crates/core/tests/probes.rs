// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::*;
use rand::seq::SliceRandom;
use rand::Rng;
use typolens::probe::{probe_accuracy, probe_loss_and_grad, train_probe, ProbeConfig};
use typolens::Tensor;

fn toy(n: usize, d: usize, classes: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut r = rng(seed);
    let y: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let rows: Vec<Vec<f32>> = y
        .iter()
        .map(|&c| {
            (0..d)
                .map(|k| if k == c { 2.0 } else { 0.0 } + r.random_range(-0.5f32..0.5))
                .collect()
        })
        .collect();
    (Tensor::from_rows(&rows).unwrap(), y)
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let (x, y) = toy(20, 5, 3, 1);
    let mut r = rng(2);
    let w: Vec<f64> = (0..15).map(|_| r.random_range(-0.5..0.5)).collect();
    let b: Vec<f64> = (0..3).map(|_| r.random_range(-0.5..0.5)).collect();
    let l2 = 1e-2;
    let (_, gw, gb) = probe_loss_and_grad(&w, &b, &x, &y, l2);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for k in 0..w.len() {
        let mut up = w.clone();
        let mut dn = w.clone();
        up[k] += h;
        dn[k] -= h;
        let fd = (probe_loss_and_grad(&up, &b, &x, &y, l2).0 - probe_loss_and_grad(&dn, &b, &x, &y, l2).0) / (2.0 * h);
        worst = worst.max((fd - gw[k]).abs());
    }
    for k in 0..b.len() {
        let mut up = b.clone();
        let mut dn = b.clone();
        up[k] += h;
        dn[k] -= h;
        let fd = (probe_loss_and_grad(&w, &up, &x, &y, l2).0 - probe_loss_and_grad(&w, &dn, &x, &y, l2).0) / (2.0 * h);
        worst = worst.max((fd - gb[k]).abs());
    }
    assert!(worst < 1e-4, "max gradient error {worst}");
}

#[test]
fn loss_at_zero_weights_is_log_classes() {
    let (x, y) = toy(12, 4, 4, 3);
    let (loss, _, _) = probe_loss_and_grad(&[0.0; 16], &[0.0; 4], &x, &y, 0.1);
    assert!((loss - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn separable_data_is_fit_perfectly() {
    let (x, y) = toy(60, 6, 6, 4);
    let (m, report) = train_probe(&x, &y, 6, &ProbeConfig::default()).unwrap();
    assert_eq!(probe_accuracy(&m, &x, &y).unwrap(), 1.0);
    assert!(report.loss_history.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn shuffled_labels_give_chance_on_held_out_data() {
    let classes = 4;
    let (x, mut y) = toy(800, 8, classes, 5);
    y.shuffle(&mut rng(6));
    let (train_x, eval_x) = (
        Tensor::from_rows(&(0..400).map(|i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap(),
        Tensor::from_rows(&(400..800).map(|i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap(),
    );
    let (m, _) = train_probe(&train_x, &y[..400], classes, &ProbeConfig::default()).unwrap();
    let acc = probe_accuracy(&m, &eval_x, &y[400..]).unwrap();
    let chance = 1.0 / classes as f64;
    assert!((acc - chance).abs() <= 0.1, "{acc}");
}

#[test]
fn training_is_deterministic() {
    let (x, y) = toy(30, 4, 3, 7);
    let a = train_probe(&x, &y, 3, &ProbeConfig::default()).unwrap();
    let b = train_probe(&x, &y, 3, &ProbeConfig::default()).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}
