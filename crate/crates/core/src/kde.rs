//! Isotropic Gaussian kernel density estimation in latent space.
//!
//! The kernel is the fully normalised `N(z; z_i, h^2 I)`, so
//! `log q(z) = logsumexp_i(-|z - z_i|^2 / 2h^2) - ln n - (l/2) ln(2 pi h^2)`.
//! All log-densities go through the max-shifted log-sum-exp.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use thiserror::Error;

use crate::diff::{log_sum_exp, Graph, NodeId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KdeError {
    #[error("expected dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("KDE needs at least one sample")]
    EmptySamples,
    #[error("bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),
    #[error("query set is empty")]
    EmptyQueries,
    #[error("need at least {min} samples, got {n}")]
    TooFewSamples { n: usize, min: usize },
    #[error("covariance is singular even after jitter (smallest eigenvalue {min_eigenvalue:e})")]
    SingularCovariance { min_eigenvalue: f64 },
}

pub type Result<T> = std::result::Result<T, KdeError>;

/// Immutable KDE over `n x l` sample points with a scalar bandwidth.
#[derive(Debug, Clone)]
pub struct KdeModel {
    samples: Array2<f64>,
    bandwidth: f64,
}

impl KdeModel {
    pub fn new(samples: Array2<f64>, bandwidth: f64) -> Result<Self> {
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(KdeError::EmptySamples);
        }
        check_bandwidth(bandwidth)?;
        Ok(Self { samples, bandwidth })
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    fn log_norm(&self) -> f64 {
        log_kernel_norm(self.dim(), self.bandwidth) - (self.len() as f64).ln()
    }

    pub fn log_density(&self, z: ArrayView1<'_, f64>) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(KdeError::DimensionMismatch {
                expected: self.dim(),
                got: z.len(),
            });
        }
        let inv = -0.5 / (self.bandwidth * self.bandwidth);
        let exps = self.samples.outer_iter().map(|s| inv * sq_norm_diff(s, z));
        Ok(log_sum_exp(exps) + self.log_norm())
    }

    /// Mean of [`log_density`](Self::log_density) over the query rows,
    /// accumulated in row order.
    pub fn mean_log_density(&self, queries: &Array2<f64>) -> Result<f64> {
        if queries.nrows() == 0 {
            return Err(KdeError::EmptyQueries);
        }
        let mut total = 0.0;
        for q in queries.outer_iter() {
            total += self.log_density(q)?;
        }
        Ok(total / queries.nrows() as f64)
    }
}

fn check_bandwidth(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(KdeError::InvalidBandwidth(h))
    }
}

/// `-(l/2) ln(2 pi h^2)`
pub fn log_kernel_norm(dim: usize, h: f64) -> f64 {
    -0.5 * dim as f64 * (2.0 * PI * h * h).ln()
}

fn sq_norm_diff(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Add the KDE log-density of each query row to a graph, `k x 1`.
///
/// `queries` is `k x dim`, `samples` is `n_samples x dim`. Gradients flow to
/// whichever of the two is a parameter (or depends on one).
pub fn log_density_node(
    g: &mut Graph,
    queries: NodeId,
    samples: NodeId,
    bandwidth: f64,
    dim: usize,
    n_samples: usize,
) -> NodeId {
    let d = g.sq_dist(queries, samples);
    let e = g.scale(d, -0.5 / (bandwidth * bandwidth));
    let lse = g.log_sum_exp_rows(e);
    g.offset(lse, log_kernel_norm(dim, bandwidth) - (n_samples as f64).ln())
}

/// Which points score which in the entropy estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EntropyMode {
    /// Each point is scored against the KDE of all the others.
    #[default]
    LeaveOneOut,
    /// The first half of the rows forms the KDE, the second half is scored.
    Split,
}

/// Entropy estimate with the `(l/2) ln(2 pi)` constant removed, so the
/// standard normal maps to `l/2`.
pub fn entropy(samples: &Array2<f64>, h: f64, mode: EntropyMode) -> Result<f64> {
    match mode {
        EntropyMode::LeaveOneOut => entropy_loo(samples, h),
        EntropyMode::Split => entropy_split(samples, h),
    }
}

/// Leave-one-out cross-entropy `-(1/n) sum_j log q_{-j}(z_j) - (l/2) ln(2 pi)`.
pub fn entropy_loo(samples: &Array2<f64>, h: f64) -> Result<f64> {
    let n = samples.nrows();
    if n < 2 {
        return Err(KdeError::TooFewSamples { n, min: 2 });
    }
    check_bandwidth(h)?;
    let l = samples.ncols();
    let inv = -0.5 / (h * h);
    let norm = log_kernel_norm(l, h) - ((n - 1) as f64).ln();
    let mut row = vec![0.0; n - 1];
    let mut total = 0.0;
    for (j, zj) in samples.outer_iter().enumerate() {
        let mut k = 0;
        for (i, zi) in samples.outer_iter().enumerate() {
            if i != j {
                row[k] = inv * sq_norm_diff(zi, zj);
                k += 1;
            }
        }
        total += log_sum_exp(row.iter().copied()) + norm;
    }
    Ok(-total / n as f64 - 0.5 * l as f64 * (2.0 * PI).ln())
}

/// Disjoint-split variant of [`entropy_loo`].
pub fn entropy_split(samples: &Array2<f64>, h: f64) -> Result<f64> {
    let n = samples.nrows();
    if n < 2 {
        return Err(KdeError::TooFewSamples { n, min: 2 });
    }
    let half = n / 2;
    let kde = KdeModel::new(samples.slice(ndarray::s![..half, ..]).to_owned(), h)?;
    let queries = samples.slice(ndarray::s![half.., ..]).to_owned();
    let l = samples.ncols() as f64;
    Ok(-kde.mean_log_density(&queries)? - 0.5 * l * (2.0 * PI).ln())
}

/// Affine whitening `y = T (x - mean)` with `T` the inverse Cholesky factor
/// of the sample covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenTransform {
    pub mean: Array1<f64>,
    pub transform: Array2<f64>,
}

impl WhitenTransform {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, data: &Array2<f64>) -> Result<Array2<f64>> {
        if data.ncols() != self.dim() {
            return Err(KdeError::DimensionMismatch {
                expected: self.dim(),
                got: data.ncols(),
            });
        }
        let centered = data - &self.mean.view().insert_axis(Axis(0));
        Ok(centered.dot(&self.transform.t()))
    }
}

const WHITEN_JITTER: f64 = 1e-8;

/// Unbiased (`n - 1`) sample covariance.
pub fn covariance(samples: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = samples.nrows();
    let mean = samples
        .mean_axis(Axis(0))
        .unwrap_or_else(|| Array1::zeros(samples.ncols()));
    let centered = samples - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / (n.max(2) - 1) as f64;
    (mean, cov)
}

/// Fit a whitening transform. Needs `n > l`. The covariance is factored as
/// is; only if that fails is `1e-8 I` added before a second attempt.
pub fn fit_whiten(samples: &Array2<f64>) -> Result<WhitenTransform> {
    let (n, l) = samples.dim();
    if n <= l {
        return Err(KdeError::TooFewSamples { n, min: l + 1 });
    }
    let (mean, cov) = covariance(samples);
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(KdeError::SingularCovariance {
            min_eigenvalue: f64::NAN,
        });
    }
    let c = DMatrix::from_fn(l, l, |i, j| cov[[i, j]]);
    let chol = c
        .clone()
        .cholesky()
        .or_else(|| (&c + DMatrix::identity(l, l) * WHITEN_JITTER).cholesky());
    let Some(chol) = chol else {
        let min_eigenvalue = SymmetricEigen::new(c)
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        return Err(KdeError::SingularCovariance { min_eigenvalue });
    };
    let lower = chol.l();
    let inv = lower
        .solve_lower_triangular(&DMatrix::identity(l, l))
        .ok_or(KdeError::SingularCovariance { min_eigenvalue: 0.0 })?;
    let transform = Array2::from_shape_fn((l, l), |(i, j)| inv[(i, j)]);
    if transform.iter().any(|v| !v.is_finite()) {
        return Err(KdeError::SingularCovariance { min_eigenvalue: 0.0 });
    }
    Ok(WhitenTransform { mean, transform })
}
