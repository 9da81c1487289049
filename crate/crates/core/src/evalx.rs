//! Latent-space diagnostics and generation from the biased prior.

use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bandwidth::{self, BandwidthConfig, BandwidthError, DEFAULT_SEEDS};
use crate::kde::{self, EntropyMode, KdeError};
use crate::nets::{MlpParams, NetError};
use crate::seed::rng_for;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need more rows than latent dimensions (n={n}, l={l})")]
    TooFewRows { n: usize, l: usize },
    #[error("h_corr must be in (0, 1), got {0}")]
    InvalidBandwidth(f64),
    #[error("h must be in [0, 1], got {0}")]
    InvalidPriorScale(f64),
    #[error("collapse threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error("whitening failed: {0}")]
    Whiten(#[source] KdeError),
    #[error(transparent)]
    Kde(#[from] KdeError),
    #[error(transparent)]
    Bandwidth(#[from] BandwidthError),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

pub const DEFAULT_COLLAPSE_TAU: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsOptions {
    /// Axes with variance below this are reported as collapsed.
    pub collapse_tau: f64,
    /// Corrected bandwidth for the entropy KDE. When `None` it is estimated
    /// for `(l, n)` of the sample being diagnosed.
    pub entropy_bandwidth: Option<f64>,
    pub entropy_mode: EntropyMode,
    pub bandwidth_config: BandwidthConfig,
    pub bandwidth_seeds: Vec<u64>,
}

impl Default for DiagnosticsOptions {
    fn default() -> Self {
        Self {
            collapse_tau: DEFAULT_COLLAPSE_TAU,
            entropy_bandwidth: None,
            entropy_mode: EntropyMode::LeaveOneOut,
            bandwidth_config: BandwidthConfig::default(),
            bandwidth_seeds: DEFAULT_SEEDS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentReport {
    pub n: usize,
    pub l: usize,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub max_abs_offdiag_corr: f64,
    /// Largest `|C_ij - I_ij|` of the sample covariance.
    pub cov_identity_deviation: f64,
    /// Leave-one-out (or split) entropy of the whitened latents, with the
    /// Gaussian constant removed: `l/2` for a perfect standard normal.
    pub whitened_entropy: f64,
    pub entropy_bandwidth: f64,
    pub entropy_mode: String,
    /// `1 - h_corr^2`.
    pub target_variance: f64,
    /// Largest relative deviation of a per-axis variance from the target.
    pub max_variance_rel_error: f64,
    pub collapsed_axes: Vec<usize>,
    pub collapse_threshold: f64,
}

impl LatentReport {
    /// Upper bound on the entropy of any distribution with identity
    /// covariance (in the same shifted units).
    pub fn gaussian_bound(&self) -> f64 {
        0.5 * self.l as f64
    }
}

/// Moments, whitened entropy and collapse detection for a set of latents.
pub fn latent_diagnostics(latents: &Array2<f64>, h_corr: f64, opts: &DiagnosticsOptions) -> Result<LatentReport> {
    let (n, l) = latents.dim();
    if n <= l || l == 0 {
        return Err(EvalError::TooFewRows { n, l });
    }
    if !(h_corr > 0.0 && h_corr < 1.0) {
        return Err(EvalError::InvalidBandwidth(h_corr));
    }
    if !(opts.collapse_tau > 0.0) {
        return Err(EvalError::InvalidThreshold(opts.collapse_tau));
    }

    let (mean, cov) = kde::covariance(latents);
    let variances: Vec<f64> = (0..l).map(|i| cov[[i, i]].max(0.0)).collect();
    let mut max_corr = 0.0f64;
    let mut max_dev = 0.0f64;
    for i in 0..l {
        for j in 0..l {
            let target = if i == j { 1.0 } else { 0.0 };
            max_dev = max_dev.max((cov[[i, j]] - target).abs());
            if i != j && variances[i] > 0.0 && variances[j] > 0.0 {
                max_corr = max_corr.max((cov[[i, j]] / (variances[i] * variances[j]).sqrt()).abs());
            }
        }
    }
    let target_variance = 1.0 - h_corr * h_corr;
    let max_variance_rel_error = variances
        .iter()
        .map(|v| (v - target_variance).abs() / target_variance)
        .fold(0.0, f64::max);
    let collapsed_axes = (0..l).filter(|&i| variances[i] < opts.collapse_tau).collect();

    let white = kde::fit_whiten(latents).map_err(EvalError::Whiten)?;
    let whitened = white.apply(latents)?;
    let entropy_bandwidth = match opts.entropy_bandwidth {
        Some(h) => h,
        None => bandwidth::estimate(l, n, &opts.bandwidth_config, &opts.bandwidth_seeds)?.h_corr,
    };
    let whitened_entropy = kde::entropy(&whitened, entropy_bandwidth, opts.entropy_mode)?;

    Ok(LatentReport {
        n,
        l,
        means: mean.to_vec(),
        variances,
        max_abs_offdiag_corr: max_corr,
        cov_identity_deviation: max_dev,
        whitened_entropy,
        entropy_bandwidth,
        entropy_mode: match opts.entropy_mode {
            EntropyMode::LeaveOneOut => "leave_one_out".into(),
            EntropyMode::Split => "split".into(),
        },
        target_variance,
        max_variance_rel_error,
        collapsed_axes,
        collapse_threshold: opts.collapse_tau,
    })
}

/// I.i.d. draws from `N(0, (1 - h^2) I_l)`.
pub fn sample_prior_biased(n: usize, l: usize, h: f64, seed: u64) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&h) {
        return Err(EvalError::InvalidPriorScale(h));
    }
    let sd = (1.0 - h * h).sqrt();
    let mut rng = rng_for(seed, "prior", &[]);
    Ok(Array2::from_shape_simple_fn((n, l), || {
        let v: f64 = StandardNormal.sample(&mut rng);
        sd * v
    }))
}

/// Decode `n` draws from the biased prior.
pub fn generate(decoder: &MlpParams, h_corr: f64, n: usize, seed: u64) -> Result<Array2<f64>> {
    let z = sample_prior_biased(n, decoder.input_dim(), h_corr, seed)?;
    Ok(decoder.forward(&z)?)
}

/// Per-column variance (`n - 1` denominator).
pub fn column_variances(x: &Array2<f64>) -> Array1<f64> {
    x.var_axis(Axis(0), 1.0)
}
