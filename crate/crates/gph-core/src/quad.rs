//! Quadrature rules.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{arg, Result};

/// Gauss–Legendre nodes and weights on [a, b] (Golub–Welsch).
pub fn gauss_legendre(q: usize, a: f64, b: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if q == 0 {
        return arg("quadrature needs at least one node");
    }
    let mut j = DMatrix::<f64>::zeros(q, q);
    for i in 1..q {
        let k = i as f64;
        let beta = k / (4.0 * k * k - 1.0).sqrt();
        j[(i, i - 1)] = beta;
        j[(i - 1, i)] = beta;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..q)
        .map(|i| (eig.eigenvalues[i], 2.0 * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
    Ok(pairs
        .into_iter()
        .map(|(x, w)| (mid + half * x, half * w))
        .unzip())
}

/// Composite trapezoid weights on a uniform grid of `m + 1` points over [0, t].
pub fn trapezoid_weights(m: usize, t: f64) -> Vec<f64> {
    let h = t / m as f64;
    (0..=m)
        .map(|i| if i == 0 || i == m { 0.5 * h } else { h })
        .collect()
}
