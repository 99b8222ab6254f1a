//! Distribution-distance metrics: exact KL divergence over enumerable
//! supports, a classifier-based Inception-style score, and the Fréchet
//! distance between Gaussian feature summaries.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `sum p ln(p/q)` in nats. Returns `+inf` where `q` vanishes on the support
/// of `p`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::SupportMismatch(p.len(), q.len()));
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi < 0.0 || qi < 0.0 {
            return Err(Error::OutOfRange("probabilities must be nonnegative".into()));
        }
        if pi > 0.0 {
            if qi == 0.0 {
                return Ok(f64::INFINITY);
            }
            total += pi * (pi / qi).ln();
        }
    }
    Ok(total)
}

/// Mean score with the standard deviation of the mean over batches.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub mean: f64,
    pub std_of_mean: f64,
    pub batches: usize,
}

/// Inception-style score from precomputed class probability rows.
///
/// Rows are split into `batches` contiguous batches; within each batch the
/// marginal class distribution is the row mean and the batch score is
/// `exp(mean_x KL(p(y|x) || p(y)))`.
pub fn inception_score_from_probs(probs: &DMatrix<f64>, batches: usize) -> Result<ScoreReport> {
    if probs.nrows() == 0 || probs.ncols() == 0 {
        return Err(Error::EmptyDataset);
    }
    if batches == 0 || batches > probs.nrows() {
        return Err(Error::InvalidConfig(format!(
            "batch count {batches} incompatible with {} samples",
            probs.nrows()
        )));
    }
    let n = probs.nrows();
    let base = n / batches;
    let extra = n % batches;
    let mut scores = Vec::with_capacity(batches);
    let mut start = 0;
    for b in 0..batches {
        let size = base + usize::from(b < extra);
        let batch = probs.rows(start, size);
        start += size;
        let mut marginal = vec![0.0; probs.ncols()];
        for row in batch.row_iter() {
            for (m, &x) in marginal.iter_mut().zip(row.iter()) {
                *m += x;
            }
        }
        for m in &mut marginal {
            *m /= size as f64;
        }
        let mut mean_kl = 0.0;
        for row in batch.row_iter() {
            let row_vec: Vec<f64> = row.iter().cloned().collect();
            mean_kl += kl_divergence(&row_vec, &marginal)?;
        }
        mean_kl /= size as f64;
        scores.push(mean_kl.exp());
    }
    let mean = scores.iter().sum::<f64>() / batches as f64;
    let std_of_mean = if batches > 1 {
        let var = scores.iter().map(|&s| (s - mean) * (s - mean)).sum::<f64>()
            / (batches as f64 - 1.0);
        (var / batches as f64).sqrt()
    } else {
        0.0
    };
    Ok(ScoreReport {
        mean,
        std_of_mean,
        batches,
    })
}

/// Inception-style score of samples under a pluggable classifier.
pub fn inception_style_score<S>(
    samples: &[S],
    classifier: impl Fn(&S) -> Vec<f64>,
    batches: usize,
) -> Result<ScoreReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let first = classifier(&samples[0]);
    let classes = first.len();
    let mut probs = DMatrix::zeros(samples.len(), classes);
    for (i, s) in samples.iter().enumerate() {
        let row = if i == 0 { first.clone() } else { classifier(s) };
        if row.len() != classes {
            return Err(Error::DimMismatch {
                context: "classifier output",
                expected: classes,
                got: row.len(),
            });
        }
        for (j, &x) in row.iter().enumerate() {
            probs[(i, j)] = x;
        }
    }
    inception_score_from_probs(&probs, batches)
}

/// Gaussian summary of a feature cloud: sample mean and unbiased covariance.
#[derive(Debug, Clone)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Summarize rows of a feature matrix.
pub fn feature_summary_from_matrix(features: &DMatrix<f64>) -> Result<GaussianSummary> {
    let n = features.nrows();
    let f = features.ncols();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if n < f + 1 {
        eprintln!("warning: {n} samples for {f} features; covariance estimate is rank deficient");
    }
    let mean = features.row_mean().transpose();
    let mut cov = DMatrix::zeros(f, f);
    if n > 1 {
        for row in features.row_iter() {
            let d = row.transpose() - &mean;
            cov += &d * d.transpose();
        }
        cov /= (n - 1) as f64;
    }
    Ok(GaussianSummary { mean, cov })
}

/// Summarize samples under a pluggable feature extractor.
pub fn feature_summary<S>(
    samples: &[S],
    extractor: impl Fn(&S) -> Vec<f64>,
) -> Result<GaussianSummary> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let first = extractor(&samples[0]);
    let f = first.len();
    let mut features = DMatrix::zeros(samples.len(), f);
    for (i, s) in samples.iter().enumerate() {
        let row = if i == 0 { first.clone() } else { extractor(s) };
        if row.len() != f {
            return Err(Error::DimMismatch {
                context: "feature extractor output",
                expected: f,
                got: row.len(),
            });
        }
        for (j, &x) in row.iter().enumerate() {
            features[(i, j)] = x;
        }
    }
    feature_summary_from_matrix(&features)
}

const EIG_TOL: f64 = 1e-10;

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    let scale = m.iter().fold(1.0f64, |acc, &x| acc.max(x.abs()));
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-8 * scale {
                return Err(Error::NotSymmetric);
            }
        }
    }
    Ok(())
}

/// Symmetric PSD square root by eigendecomposition. Eigenvalues slightly
/// negative from finite-sample noise clamp to zero; anything below `-1e-10`
/// is an error.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -EIG_TOL {
            return Err(Error::NegativeEigenvalue(*v));
        }
        *v = v.max(0.0).sqrt();
    }
    let d = DMatrix::from_diagonal(&roots);
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Squared Fréchet (Wasserstein-2) distance between Gaussian summaries:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`. The cross term is
/// evaluated as `tr[(S_a^{1/2} S_b S_a^{1/2})^{1/2}]`, which equals
/// `tr[(S_a S_b)^{1/2}]` and stays in symmetric PSD territory.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::DimMismatch {
            context: "frechet_distance",
            expected: a.mean.len(),
            got: b.mean.len(),
        });
    }
    check_symmetric(&a.cov)?;
    check_symmetric(&b.cov)?;
    let sqrt_a = psd_sqrt(&a.cov)?;
    let inner = &sqrt_a * &b.cov * &sqrt_a;
    let inner_sqrt = psd_sqrt(&inner)?;
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let d = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * inner_sqrt.trace();
    Ok(d.max(0.0))
}
