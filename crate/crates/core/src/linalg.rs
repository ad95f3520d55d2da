//! Small dense helpers over nalgebra used across the oracle and the harness.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Largest singular value.
pub fn spectral_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.iter().cloned().fold(0.0, f64::max)
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of a symmetric matrix (no regularization).
pub fn min_eigenvalue(m: &Mat) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

pub fn max_eigenvalue(m: &Mat) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

pub fn max_asymmetry(m: &Mat) -> f64 {
    (m - m.transpose()).amax()
}

/// Symmetric inverse square root. Eigenvalues below `floor` are raised to
/// `floor`; the flag reports whether that happened.
pub fn inverse_sqrt(m: &Mat, floor: f64) -> (Mat, bool) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut floored = false;
    let scales = eig.eigenvalues.map(|l| {
        if l < floor {
            floored = true;
            1.0 / floor.sqrt()
        } else {
            1.0 / l.sqrt()
        }
    });
    let v = &eig.eigenvectors;
    let out = v * Mat::from_diagonal(&scales) * v.transpose();
    (symmetrize(&out), floored)
}

/// Ratio of extreme singular values; infinite for an exactly singular matrix.
pub fn condition_number(m: &Mat) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn rank(m: &Mat, rel_tol: f64) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > rel_tol * max.max(f64::MIN_POSITIVE)).count()
}

pub fn frobenius(m: &Mat) -> f64 {
    m.norm()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Ordinary least squares of `y` on `x` with intercept: (slope, stderr).
/// The standard error is NaN with fewer than three points.
pub fn ols_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    if x.len() < 3 {
        return (slope, f64::NAN);
    }
    let intercept = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let stderr = (rss / (n - 2.0) / sxx).sqrt();
    (slope, stderr)
}
