// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense f32 tensors and the handful of kernels the encoder needs.
//!
//! Storage is row-major `f32`. Every reduction (dot products, means,
//! variances, softmax normalizers) accumulates in `f64` and rounds once on
//! store. Kernels that operate on matrices treat each output row as an
//! independent computation, so changing one input row never perturbs the
//! bits of another output row.

#![allow(clippy::needless_range_loop)]

use crate::error::{Error, Result};

/// Row-major dense tensor of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Builds a `[rows.len(), width]` matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::shape("Tensor::from_rows", "ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), width], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Number of rows of a matrix (`shape[0]`).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Row width of a matrix (product of all trailing dimensions).
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.cols();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let w = self.cols();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Errors if any entry is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("{context} (flat index {pos})"),
            });
        }
        Ok(())
    }

    fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(
                op,
                format!("expected a matrix, got shape {:?}", self.shape),
            ));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// `f64`-accumulated dot product.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// Plain matrix product `a[m, k] · b[k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_matrix("matmul")?;
    let (k2, n) = b.expect_matrix("matmul")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions {k} and {k2} differ"),
        ));
    }
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = a.row(i);
        for (p, &av) in arow.iter().enumerate() {
            let av = f64::from(av);
            for (slot, &bv) in acc.iter_mut().zip(b.row(p)) {
                *slot += av * f64::from(bv);
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = v as f32;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Affine map `x · wᵀ + bias` with `w` stored as `[out, in]`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, din) = x.expect_matrix("linear")?;
    let (dout, win) = w.expect_matrix("linear")?;
    if din != win {
        return Err(Error::shape(
            "linear",
            format!("input width {din} vs weight [{dout}, {win}]"),
        ));
    }
    if let Some(b) = bias {
        if b.len() != dout {
            return Err(Error::shape(
                "linear",
                format!("bias length {} vs output width {dout}", b.len()),
            ));
        }
    }
    let mut out = Vec::with_capacity(n * dout);
    for i in 0..n {
        let xr = x.row(i);
        for j in 0..dout {
            let mut v = dot(xr, w.row(j));
            if let Some(b) = bias {
                v += f64::from(b.data[j]);
            }
            out.push(v as f32);
        }
    }
    Tensor::new(vec![n, dout], out)
}

/// Numerically stabilized softmax over each row of a matrix.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    let (rows, cols) = m.expect_matrix("softmax_rows")?;
    if cols == 0 {
        return Err(Error::shape("softmax_rows", "need at least one column"));
    }
    let mut out = m.clone();
    for r in 0..rows {
        let row = out.row_mut(r);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("softmax_rows input row {r}"),
            });
        }
        softmax_in_place(row);
    }
    Ok(out)
}

/// Softmax of a single finite slice, in place.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = row
        .iter()
        .map(|&v| (f64::from(v) - f64::from(max)).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    for (o, e) in row.iter_mut().zip(exps) {
        *o = (e / total) as f32;
    }
}

/// Per-row layer normalization with affine scale and shift.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (rows, d) = x.expect_matrix("layer_norm")?;
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "width {d} vs gamma {} / beta {}",
                gamma.len(),
                beta.len()
            ),
        ));
    }
    let mut out = Vec::with_capacity(rows * d);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| {
                let c = f64::from(v) - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for ((&v, &g), &b) in row.iter().zip(&gamma.data).zip(&beta.data) {
            out.push(((f64::from(v) - mean) * inv * f64::from(g) + f64::from(b)) as f32);
        }
    }
    Tensor::new(vec![rows, d], out)
}

/// Exact GELU, `x · Φ(x)` with the erf form of the normal CDF.
pub fn gelu(x: f32) -> f32 {
    let x = f64::from(x);
    (0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))) as f32
}

pub fn gelu_tensor(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| gelu(v)).collect(),
    }
}

/// Scales `v` to unit L2 norm. Zero vectors are returned unchanged.
pub fn l2_normalize(v: &[f32]) -> Vec<f32> {
    let norm = dot(v, v).sqrt();
    if norm == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|&x| (f64::from(x) / norm) as f32).collect()
}

/// Indices of the `k` largest values, descending; equal values keep the
/// lower index first.
pub fn top_k(values: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Index of the maximum, ties resolved to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Sample covariance (divisor `n - 1`) of the rows of `x`, in `f64`.
pub fn covariance(x: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (n, d) = x.expect_matrix("covariance")?;
    if n < 2 {
        return Err(Error::invalid(format!("covariance needs n >= 2, got {n}")));
    }
    let mut mean = vec![0.0f64; d];
    for r in 0..n {
        for (m, &v) in mean.iter_mut().zip(x.row(r)) {
            *m += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![vec![0.0f64; d]; d];
    let mut centered = vec![0.0f64; d];
    for r in 0..n {
        for ((c, &v), m) in centered.iter_mut().zip(x.row(r)).zip(&mean) {
            *c = f64::from(v) - m;
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..d {
                cov[i][j] += ci * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i][j] / denom;
            cov[i][j] = v;
            cov[j][i] = v;
        }
    }
    Ok(cov)
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, unsorted.
pub fn symmetric_eigenvalues(matrix: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = matrix.len();
    if matrix.iter().any(|r| r.len() != n) {
        return Err(Error::shape("symmetric_eigenvalues", "matrix not square"));
    }
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let total: f64 = a.iter().flatten().map(|v| v * v).sum();
    if total == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let tol = total * 1e-30;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off <= tol {
            return Ok((0..n).map(|i| a[i][i]).collect());
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p][q];
                if apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    Err(Error::NoConvergence("Jacobi eigensolver"))
}

/// Descending eigenvalues of the covariance of the mean-centered rows.
///
/// Tiny negative round-off (above `-1e-8`, scaled by the largest
/// eigenvalue when that exceeds 1) is clamped to zero; anything more
/// negative is reported as an error.
pub fn pca_spectrum(x: &Tensor) -> Result<Vec<f64>> {
    let (n, _) = x.expect_matrix("pca_spectrum")?;
    if n < 2 {
        return Err(Error::invalid(format!("pca_spectrum needs n >= 2, got {n}")));
    }
    x.check_finite("pca_spectrum input")?;
    let cov = covariance(x)?;
    let mut eig = symmetric_eigenvalues(&cov)?;
    let scale = eig.iter().copied().fold(1.0f64, f64::max);
    for v in &mut eig {
        if *v < 0.0 {
            if *v < -1e-8 * scale {
                return Err(Error::invalid(format!(
                    "covariance has negative eigenvalue {v}"
                )));
            }
            *v = 0.0;
        }
    }
    eig.sort_by(|a, b| b.total_cmp(a));
    Ok(eig)
}
