use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::MetricsError;

/// Diagonal load added to each covariance.
pub const COV_EPS: f64 = 1e-6;

fn moments(set: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len() as f64;
    let mut mu = DVector::zeros(dim);
    for v in set {
        mu += DVector::from_column_slice(v);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for v in set {
        let c = DVector::from_column_slice(v) - &mu;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    for i in 0..dim {
        cov[(i, i)] += COV_EPS;
    }
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))` with unbiased
/// covariances. The cross term is the sum of singular values of
/// `sqrt(S_a) sqrt(S_b)`, which avoids squaring small eigenvalues.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, MetricsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(MetricsError::TooFew { need: 2, got: a.len().min(b.len()) });
    }
    let dim = a[0].len();
    if let Some(bad) = a.iter().chain(b).find(|v| v.len() != dim) {
        return Err(MetricsError::Dimension { expected: dim, got: bad.len() });
    }
    let (mu_a, cov_a) = moments(a, dim);
    let (mu_b, cov_b) = moments(b, dim);
    let cross: f64 = (psd_sqrt(&cov_a) * psd_sqrt(&cov_b)).singular_values().iter().sum();
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Mean pairwise Euclidean distance.
pub fn diversity(set: &[Vec<f64>]) -> Result<f64, MetricsError> {
    if set.len() < 2 {
        return Err(MetricsError::TooFew { need: 2, got: set.len() });
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..set.len() {
        for j in i + 1..set.len() {
            if set[i].len() != set[j].len() {
                return Err(MetricsError::Dimension { expected: set[i].len(), got: set[j].len() });
            }
            total += set[i].iter().zip(&set[j]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}
