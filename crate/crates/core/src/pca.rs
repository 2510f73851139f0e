//! PCA concept maps over patch embeddings.

use std::collections::HashMap;
use std::hash::Hash;

use image::GrayImage;
use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Dense eigendecomposition is used up to this dimension, power iteration
/// above it.
pub const DENSE_MAX_DIM: usize = 512;
const POWER_TOL: f64 = 1e-9;
const POWER_MAX_ITER: usize = 1000;

/// Subtracts, for every position, the mean of all vectors sharing it.
/// `vectors` is row-major with width `dim`, one row per entry of `positions`.
pub fn positional_mean_subtract<P: Eq + Hash>(positions: &[P], vectors: &[f64], dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || vectors.len() != positions.len() * dim {
        return Err(Error::invalid(format!(
            "{} values for {} positions of dim {dim}",
            vectors.len(),
            positions.len()
        )));
    }
    let mut groups: HashMap<&P, (usize, Vec<f64>)> = HashMap::new();
    for (p, row) in positions.iter().zip(vectors.chunks_exact(dim)) {
        let e = groups.entry(p).or_insert_with(|| (0, vec![0.0; dim]));
        e.0 += 1;
        e.1.iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    let mut out = vectors.to_vec();
    for (p, row) in positions.iter().zip(out.chunks_exact_mut(dim)) {
        let (n, sum) = &groups[p];
        row.iter_mut().zip(sum).for_each(|(v, s)| *v -= s / *n as f64);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub dim: usize,
    /// Row-major `n_components x dim`, orthonormal rows.
    pub components: Vec<f64>,
    /// Non-increasing, non-negative.
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    pub fn n_components(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.components[i * self.dim..(i + 1) * self.dim]
    }

    /// Projects rows onto the components; row-major `N x n_components`.
    pub fn transform(&self, data: &[f64]) -> Vec<f64> {
        data.chunks_exact(self.dim)
            .flat_map(|row| {
                (0..self.n_components())
                    .map(|c| self.component(c).iter().zip(row).map(|(a, b)| a * b).sum::<f64>())
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Maps component scores back to the input space.
    pub fn inverse_transform(&self, scores: &[f64]) -> Vec<f64> {
        let n = self.n_components();
        scores
            .chunks_exact(n)
            .flat_map(|s| {
                let mut row = vec![0.0; self.dim];
                for (c, &w) in s.iter().enumerate() {
                    row.iter_mut().zip(self.component(c)).for_each(|(r, v)| *r += w * v);
                }
                row
            })
            .collect()
    }
}

/// Sample covariance (N - 1 denominator) of already centered rows.
pub fn covariance(data: &[f64], dim: usize) -> DMatrix<f64> {
    let n = data.len() / dim;
    let x = DMatrix::from_row_slice(n, dim, data);
    (x.transpose() * &x) / (n as f64 - 1.0)
}

/// Principal components of already centered `N x dim` data.
pub fn pca_fit(data: &[f64], dim: usize, n_components: usize) -> Result<Pca> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::invalid(format!("{} values do not form rows of dim {dim}", data.len())));
    }
    let n = data.len() / dim;
    if n < 2 {
        return Err(Error::invalid("PCA needs at least 2 rows"));
    }
    if n_components == 0 || n_components > n.min(dim) {
        return Err(Error::invalid(format!(
            "n_components {n_components} must be in 1..={}",
            n.min(dim)
        )));
    }
    let cov = covariance(data, dim);
    let (mut eigenvalues, mut components) = if dim <= DENSE_MAX_DIM {
        dense_eigen(cov, n_components)
    } else {
        power_eigen(cov, n_components)
    };
    for (value, row) in eigenvalues.iter_mut().zip(components.chunks_exact_mut(dim)) {
        *value = value.max(0.0);
        fix_sign(row);
    }
    Ok(Pca { dim, components, eigenvalues })
}

fn fix_sign(row: &mut [f64]) {
    let pivot = row
        .iter()
        .copied()
        .reduce(|a, b| if b.abs() > a.abs() { b } else { a })
        .unwrap_or(0.0);
    if pivot < 0.0 {
        row.iter_mut().for_each(|v| *v = -*v);
    }
}

fn dense_eigen(cov: DMatrix<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let dim = cov.nrows();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order[..n].iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = order[..n]
        .iter()
        .flat_map(|&i| eig.eigenvectors.column(i).iter().copied().collect::<Vec<_>>())
        .collect();
    (values, vectors)
}

fn power_eigen(mut cov: DMatrix<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let dim = cov.nrows();
    let mut values = Vec::with_capacity(n);
    let mut vectors = Vec::with_capacity(n * dim);
    for c in 0..n {
        // Deterministic start that is not orthogonal to typical data.
        let mut v = nalgebra::DVector::from_fn(dim, |i, _| 1.0 + ((i + c) % 7) as f64 * 0.1);
        v.normalize_mut();
        let mut lambda = 0.0;
        for _ in 0..POWER_MAX_ITER {
            let w = &cov * &v;
            let norm = w.norm();
            if norm == 0.0 {
                lambda = 0.0;
                break;
            }
            let next = w / norm;
            let delta = (&next - &v).norm().min((&next + &v).norm());
            v = next;
            lambda = v.dot(&(&cov * &v));
            if delta < POWER_TOL {
                break;
            }
        }
        cov -= lambda * &v * v.transpose();
        values.push(lambda);
        vectors.extend(v.iter().copied());
    }
    (values, vectors)
}

/// 8-bit grayscale rendering of a score grid (`rows x cols`, row-major).
/// Negative scores are clamped to 0 when `positive_only`; the result is
/// min-max scaled to [0, 255]. A constant grid renders black.
pub fn component_heatmap(scores: &[f64], cols: usize, positive_only: bool) -> Result<GrayImage> {
    if scores.is_empty() || cols == 0 || !scores.len().is_multiple_of(cols) {
        return Err(Error::invalid("heatmap grid must be non-empty and rectangular"));
    }
    let rows = scores.len() / cols;
    let vals: Vec<f64> = scores
        .iter()
        .map(|&s| if positive_only { s.max(0.0) } else { s })
        .collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let px = vals
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    Ok(GrayImage::from_raw(cols as u32, rows as u32, px).expect("buffer matches dimensions"))
}
