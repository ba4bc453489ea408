//! Sample-quality measures on pixel-PCA features.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::data::ToyDataset;
use crate::analysis::Pca;
use crate::numerics::{Result, TensorError};

/// Ridge added to both covariances when either is singular.
pub const COV_RIDGE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Fréchet distance of Gaussian fits to PCA features of samples vs data.
    pub frechet: f64,
    /// True when a covariance was singular and the ridge was applied.
    pub regularized: bool,
    /// Fraction of samples nearest (L2) to their own class's data mean.
    pub class_accuracy: f64,
    /// Mean pairwise L2 distance between samples.
    pub diversity: f64,
}

fn gaussian_fit(x: &[f64], k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let n = x.len() / k;
    let mut mu = vec![0.0; k];
    for row in x.chunks(k) {
        mu.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
    }
    let c = DMatrix::from_fn(n, k, |i, j| x[i * k + j] - mu[j]);
    let denom = (n.max(2) - 1) as f64;
    (mu, (c.transpose() * &c) / denom)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// `‖μa−μb‖² + Tr(Σa + Σb − 2(Σa^½ Σb Σa^½)^½)` between Gaussian fits of two
/// feature sets (`k` columns each). Returns the distance and whether the
/// ridge was applied.
pub fn frechet_distance(a: &[f64], b: &[f64], k: usize) -> Result<(f64, bool)> {
    if k == 0 || !a.len().is_multiple_of(k) || !b.len().is_multiple_of(k) || a.len() < 2 * k || b.len() < 2 * k {
        return Err(TensorError::invalid("frechet", "need at least two feature rows per set"));
    }
    let (mu_a, mut sa) = gaussian_fit(a, k);
    let (mu_b, mut sb) = gaussian_fit(b, k);
    let singular = |m: &DMatrix<f64>| {
        let ev = SymmetricEigen::new(m.clone()).eigenvalues;
        let max = ev.iter().copied().fold(0.0, f64::max);
        ev.iter().any(|&v| v <= 1e-12 * max.max(1e-300))
    };
    let regularized = singular(&sa) || singular(&sb);
    if regularized {
        sa += DMatrix::identity(k, k) * COV_RIDGE;
        sb += DMatrix::identity(k, k) * COV_RIDGE;
    }
    let ra = sqrt_psd(&sa);
    let cross = sqrt_psd(&(&ra * &sb * &ra));
    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y).powi(2)).sum();
    let d = mean_term + sa.trace() + sb.trace() - 2.0 * cross.trace();
    Ok((d.max(0.0), regularized))
}

/// Feature extractor: top `k` pixel principal components of the data.
pub fn pixel_pca(data: &ToyDataset, k: usize) -> Result<Pca> {
    Pca::fit(&data.images, data.len(), data.image_len(), k.min(data.len()).min(data.image_len()))
}

/// Scores `samples` (row-major images) with conditioning `labels` against
/// `data`, using `features` for the Fréchet term.
pub fn eval_metrics(samples: &[f64], labels: &[usize], data: &ToyDataset, features: &Pca) -> Result<EvalMetrics> {
    let n = data.image_len();
    if samples.len() != labels.len() * n {
        return Err(TensorError::invalid("eval_metrics", "samples and labels disagree"));
    }
    let mut per_class = vec![0usize; data.classes];
    for &l in labels {
        if l >= data.classes {
            return Err(TensorError::invalid("eval_metrics", format!("label {l} out of range")));
        }
        per_class[l] += 1;
    }
    if per_class.iter().any(|&c| c < 2) {
        return Err(TensorError::invalid("eval_metrics", "need at least two samples per class"));
    }
    let k = features.components.len();
    let (frechet, regularized) =
        frechet_distance(&features.project_all(samples), &features.project_all(&data.images), k)?;

    let means = data.class_means();
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let correct = samples
        .chunks(n)
        .zip(labels)
        .filter(|(img, &l)| {
            let d: Vec<f64> = means.iter().map(|m| dist2(img, m)).collect();
            (0..d.len()).all(|j| j == l || d[l] < d[j])
        })
        .count();

    let imgs: Vec<&[f64]> = samples.chunks(n).collect();
    let (mut total, mut pairs) = (0.0, 0usize);
    for i in 0..imgs.len() {
        for j in i + 1..imgs.len() {
            total += dist2(imgs[i], imgs[j]).sqrt();
            pairs += 1;
        }
    }
    Ok(EvalMetrics {
        frechet,
        regularized,
        class_accuracy: correct as f64 / labels.len() as f64,
        diversity: total / pairs.max(1) as f64,
    })
}
