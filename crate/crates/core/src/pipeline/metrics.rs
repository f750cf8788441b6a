//! Generation metrics over oracle-classifier outputs.
//!
//! Directions: Fréchet distance ↓, KL ↓, inception score ↑, conditioning
//! accuracy ↑. KL and IS use posteriors renormalized to sum to one per clip
//! (with `1e-10` smoothing), turning multi-label sigmoids into distributions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub const FD_EPSILON: f64 = 1e-6;
pub const POSTERIOR_SMOOTHING: f64 = 1e-10;

fn mean_cov(x: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = x[0].len();
    let n = x.len() as f64;
    let mut mu = DVector::zeros(d);
    for v in x {
        mu += DVector::from_column_slice(v);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(d, d);
    for v in x {
        let c = DVector::from_column_slice(v) - &mu;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    (mu, cov)
}

/// Symmetric PSD square root via eigendecomposition (negative eigenvalues
/// from rounding are clipped to zero).
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2})` between Gaussians fit to
/// the two sets, each covariance regularized by `FD_EPSILON * I`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = a.first().map_or(0, Vec::len);
    if d == 0 || b.first().map_or(0, Vec::len) != d || a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::Shape("embedding sets must share one non-zero width".into()));
    }
    if a.len() < d + 1 || b.len() < d + 1 {
        return Err(Error::Invalid(format!(
            "Fréchet distance needs at least {} vectors per set (got {} and {})",
            d + 1,
            a.len(),
            b.len()
        )));
    }
    let (m1, s1) = mean_cov(a);
    let (m2, s2) = mean_cov(b);
    let eye = DMatrix::<f64>::identity(d, d) * FD_EPSILON;
    let (s1, s2) = (s1 + &eye, s2 + &eye);
    // tr((S1 S2)^{1/2}) = tr((S1^{1/2} S2 S1^{1/2})^{1/2}), which stays symmetric.
    let r1 = sqrt_psd(&s1);
    let cross = sqrt_psd(&(&r1 * &s2 * &r1)).trace();
    let diff = m1 - m2;
    Ok((diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * cross).max(0.0))
}

fn normalize(p: &[f64]) -> Vec<f64> {
    let q: Vec<f64> = p.iter().map(|v| v.max(0.0) + POSTERIOR_SMOOTHING).collect();
    let s: f64 = q.iter().sum();
    q.into_iter().map(|v| v / s).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
}

/// Mean over paired clips of `KL(p_real || p_gen)` on normalized posteriors.
pub fn kl_metric(real: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<f64> {
    if real.len() != generated.len() || real.is_empty() || real.iter().zip(generated).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Shape("KL needs equally many, equally wide posterior rows".into()));
    }
    let total: f64 = real
        .iter()
        .zip(generated)
        .map(|(a, b)| kl(&normalize(a), &normalize(b)).max(0.0))
        .sum();
    Ok(total / real.len() as f64)
}

/// `exp(E_x[KL(p(y|x) || p(y))])` on normalized posteriors.
pub fn inception_score(posteriors: &[Vec<f64>]) -> Result<f64> {
    let c = posteriors.first().map_or(0, Vec::len);
    if c == 0 || posteriors.iter().any(|p| p.len() != c) {
        return Err(Error::Shape("inception score needs equally wide, non-empty rows".into()));
    }
    let rows: Vec<Vec<f64>> = posteriors.iter().map(|p| normalize(p)).collect();
    let mut marginal = vec![0.0; c];
    for r in &rows {
        for (m, v) in marginal.iter_mut().zip(r) {
            *m += v / rows.len() as f64;
        }
    }
    let mean_kl = rows.iter().map(|r| kl(r, &marginal)).sum::<f64>() / rows.len() as f64;
    Ok(mean_kl.max(0.0).exp())
}

/// F1 between a detected and a target event set (1 when both are empty).
pub fn set_f1(detected: &[usize], target: &[usize]) -> f64 {
    if detected.is_empty() && target.is_empty() {
        return 1.0;
    }
    let hits = detected.iter().filter(|d| target.contains(d)).count();
    2.0 * hits as f64 / (detected.len() + target.len()) as f64
}

/// Events whose posterior reaches 0.5.
pub fn detect(posterior: &[f64]) -> Vec<usize> {
    posterior.iter().enumerate().filter(|(_, &p)| p >= 0.5).map(|(i, _)| i).collect()
}

/// Mean per-clip F1 of thresholded posteriors against target event sets.
pub fn conditioning_accuracy(posteriors: &[Vec<f64>], targets: &[Vec<usize>]) -> Result<f64> {
    if posteriors.len() != targets.len() || posteriors.is_empty() {
        return Err(Error::Shape("one target event set per posterior row".into()));
    }
    let total: f64 = posteriors.iter().zip(targets).map(|(p, t)| set_f1(&detect(p), t)).sum();
    Ok(total / posteriors.len() as f64)
}
