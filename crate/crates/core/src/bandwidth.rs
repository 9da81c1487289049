//! Prior-aware KDE bandwidth selection.
//!
//! For a latent dimension `l` and `m` kernel centres drawn from the prior
//! `N(0, s^2 I)`, the optimal bandwidth maximises the mean KDE log-density of
//! a fixed set of further prior draws (equivalently, minimises
//! `KL(prior || KDE)`). The optimisation runs over `t = ln h` with Adam.
//!
//! The squared distances between queries and centres do not depend on `h`, so
//! they are computed once and each iteration only rescales them. Value and
//! gradient are closed form:
//!
//! ```text
//! f(t)  = mean_q [ logsumexp_i(-d_qi / 2h^2) ] - ln m - (l/2) ln 2pi - l t
//! f'(t) = mean_q [ sum_i w_qi d_qi ] / h^2 - l,   w_q = softmax_i(-d_qi / 2h^2)
//! ```
//!
//! Correcting for the smoothing bias gives `alpha = 1 / sqrt(1 + h^2)` and
//! `h_corr = alpha * h`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nets::AdamState;
use crate::seed::rng_for;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BandwidthError {
    #[error("latent dimension must be at least 1")]
    InvalidDim,
    #[error("need at least 2 kernel samples, got {0}")]
    TooFewSamples(usize),
    #[error("bandwidth must be positive, got {0}")]
    NonPositive(f64),
    #[error("invalid optimizer settings: {0}")]
    InvalidConfig(String),
    #[error("no convergence for l={l}, m={m} after {iterations} iterations (|grad| = {last_grad:e})")]
    NotConverged {
        l: usize,
        m: usize,
        iterations: usize,
        last_grad: f64,
        trace: Vec<TracePoint>,
    },
    #[error("empty grid")]
    EmptyGrid,
}

pub type Result<T> = std::result::Result<T, BandwidthError>;

/// One optimizer iteration: bandwidth and gradient w.r.t. `ln h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub h: f64,
    pub grad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BandwidthConfig {
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Stop when `|d f / d ln h|` drops below this.
    pub tolerance: f64,
    /// Number of prior draws scored against the KDE.
    pub n_queries: usize,
    /// Starting bandwidth.
    pub h_init: f64,
    /// Standard deviation of the prior.
    pub prior_scale: f64,
}

impl Default for BandwidthConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            max_iterations: 500,
            tolerance: 1e-5,
            n_queries: 4096,
            h_init: 1.0,
            prior_scale: 1.0,
        }
    }
}

impl BandwidthConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.max_iterations > 0
            && self.tolerance > 0.0
            && self.n_queries > 0
            && self.h_init > 0.0
            && self.prior_scale > 0.0;
        if ok {
            Ok(())
        } else {
            Err(BandwidthError::InvalidConfig(format!("{self:?}")))
        }
    }
}

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Squared query-to-centre distances, row per query, shifted by the row
/// minimum so the largest kernel term is exactly `exp(0)`.
struct ShiftedDistances {
    shifted: Vec<f64>,
    row_min: Vec<f64>,
    cols: usize,
    dim: usize,
}

impl ShiftedDistances {
    fn new(queries: &Array2<f64>, centres: &Array2<f64>) -> Self {
        let q2: Vec<f64> = queries.outer_iter().map(|r| r.dot(&r)).collect();
        let c2: Vec<f64> = centres.outer_iter().map(|r| r.dot(&r)).collect();
        let cross = queries.dot(&centres.t());
        let cols = centres.nrows();
        let mut shifted = Vec::with_capacity(queries.nrows() * cols);
        let mut row_min = Vec::with_capacity(queries.nrows());
        for (q, row) in cross.outer_iter().enumerate() {
            let start = shifted.len();
            let mut lo = f64::INFINITY;
            for (c, x) in row.iter().enumerate() {
                let d = (q2[q] + c2[c] - 2.0 * x).max(0.0);
                lo = lo.min(d);
                shifted.push(d);
            }
            for d in &mut shifted[start..] {
                *d -= lo;
            }
            row_min.push(lo);
        }
        Self {
            shifted,
            row_min,
            cols,
            dim: queries.ncols(),
        }
    }

    /// Mean KDE log-density of the queries and its derivative in `ln h`.
    fn objective(&self, log_h: f64) -> (f64, f64) {
        let h2 = (2.0 * log_h).exp();
        let c = -0.5 / h2;
        let (value, weighted) = accumulate(&self.shifted, &self.row_min, self.cols, c);
        let n = self.row_min.len() as f64;
        let l = self.dim as f64;
        let value = value / n - (self.cols as f64).ln() - 0.5 * l * (2.0 * PI).ln() - l * log_h;
        let grad = weighted / n / h2 - l;
        (value, grad)
    }
}

const LANES: usize = 4;

/// `(sum_q [ln s0_q + c lo_q], sum_q [s1_q / s0_q + lo_q])` with
/// `s0 = sum_i exp(c d_qi)` and `s1 = sum_i d_qi exp(c d_qi)`.
#[inline(always)]
fn accumulate_generic(shifted: &[f64], row_min: &[f64], cols: usize, c: f64) -> (f64, f64) {
    let mut value = 0.0;
    let mut weighted = 0.0;
    let mut buf = vec![0.0; cols];
    for (row, &lo) in shifted.chunks_exact(cols).zip(row_min) {
        // exponentials first (a plain map, which vectorises), then a
        // four-lane reduction in a fixed order so results stay
        // bit-reproducible
        for (e, &d) in buf.iter_mut().zip(row) {
            *e = exp_nonpositive(c * d);
        }
        let mut s0 = [0.0; LANES];
        let mut s1 = [0.0; LANES];
        for (eb, db) in buf.chunks_exact(LANES).zip(row.chunks_exact(LANES)) {
            for k in 0..LANES {
                s0[k] += eb[k];
                s1[k] += eb[k] * db[k];
            }
        }
        let tail = row.len() - row.len() % LANES;
        for (k, (e, d)) in buf[tail..].iter().zip(&row[tail..]).enumerate() {
            s0[k] += e;
            s1[k] += e * d;
        }
        let s0 = (s0[0] + s0[1]) + (s0[2] + s0[3]);
        let s1 = (s1[0] + s1[1]) + (s1[2] + s1[3]);
        value += s0.ln() + c * lo;
        weighted += s1 / s0 + lo;
    }
    (value, weighted)
}

/// Same code compiled for AVX2. Only the vector width changes; the
/// operations and the reduction order are identical, so both paths give
/// bit-identical results.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn accumulate_avx2(shifted: &[f64], row_min: &[f64], cols: usize, c: f64) -> (f64, f64) {
    accumulate_generic(shifted, row_min, cols, c)
}

fn accumulate(shifted: &[f64], row_min: &[f64], cols: usize, c: f64) -> (f64, f64) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { accumulate_avx2(shifted, row_min, cols, c) };
    }
    accumulate_generic(shifted, row_min, cols, c)
}

/// `exp(x)` for `x <= 0`, branch-free so the distance loop can vectorise.
/// Range reduction `x = k ln 2 + r`, `|r| <= ln 2 / 2`, then a degree-12
/// Taylor polynomial; relative error stays within a few ulp. Arguments below
/// -700 are clamped (the result is ~1e-304, negligible next to the unit
/// leading term of each shifted row).
#[inline(always)]
fn exp_nonpositive(x: f64) -> f64 {
    const MAGIC: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let x = if x < -700.0 { -700.0 } else { x };
    let t = x * std::f64::consts::LOG2_E + MAGIC;
    let k = t - MAGIC;
    let r = x - k * LN2_HI - k * LN2_LO;
    let p = 1.0 / 479_001_600.0;
    let p = p * r + 1.0 / 39_916_800.0;
    let p = p * r + 1.0 / 3_628_800.0;
    let p = p * r + 1.0 / 362_880.0;
    let p = p * r + 1.0 / 40_320.0;
    let p = p * r + 1.0 / 5_040.0;
    let p = p * r + 1.0 / 720.0;
    let p = p * r + 1.0 / 120.0;
    let p = p * r + 1.0 / 24.0;
    let p = p * r + 1.0 / 6.0;
    let p = p * r + 0.5;
    let p = p * r + 1.0;
    let p = p * r + 1.0;
    // the low mantissa bits of `t + 1023` hold the biased exponent of 2^k
    p * f64::from_bits((t + 1023.0).to_bits() << 52)
}

fn prior_draws(rng: &mut impl Rng, n: usize, l: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, l), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Objective value and `ln h`-gradient for an explicit query/centre pair of
/// sample sets, exposed for cross-checks.
pub fn mean_log_density_and_grad(queries: &Array2<f64>, centres: &Array2<f64>, h: f64) -> (f64, f64) {
    ShiftedDistances::new(queries, centres).objective(h.ln())
}

/// Optimal bandwidth for `(l, m)` under one seed.
pub fn estimate_h_opt(l: usize, m: usize, cfg: &BandwidthConfig, seed: u64) -> Result<f64> {
    estimate_h_opt_traced(l, m, cfg, seed).map(|(h, _)| h)
}

/// As [`estimate_h_opt`], also returning the optimizer trace.
pub fn estimate_h_opt_traced(
    l: usize,
    m: usize,
    cfg: &BandwidthConfig,
    seed: u64,
) -> Result<(f64, Vec<TracePoint>)> {
    if l == 0 {
        return Err(BandwidthError::InvalidDim);
    }
    if m < 2 {
        return Err(BandwidthError::TooFewSamples(m));
    }
    cfg.validate()?;
    let mut rng = rng_for(seed, "bandwidth", &[l as u64, m as u64]);
    let centres = prior_draws(&mut rng, m, l, cfg.prior_scale);
    let queries = prior_draws(&mut rng, cfg.n_queries, l, cfg.prior_scale);
    let dist = ShiftedDistances::new(&queries, &centres);

    let mut log_h = [cfg.h_init.ln()];
    let mut adam = AdamState::new(cfg.learning_rate, &[1]);
    let mut trace = Vec::new();
    let mut last_grad = f64::NAN;
    for iteration in 0..cfg.max_iterations {
        let (_, grad) = dist.objective(log_h[0]);
        trace.push(TracePoint {
            iteration,
            h: log_h[0].exp(),
            grad,
        });
        last_grad = grad;
        if grad.abs() < cfg.tolerance {
            return Ok((log_h[0].exp(), trace));
        }
        // ascend: Adam minimises, so feed the negated gradient
        adam.update(&mut [&mut log_h[..]], &[&[-grad][..]], &[])
            .map_err(|e| BandwidthError::InvalidConfig(e.to_string()))?;
    }
    Err(BandwidthError::NotConverged {
        l,
        m,
        iterations: cfg.max_iterations,
        last_grad,
        trace,
    })
}

/// `alpha = 1/sqrt(1 + h^2)`, `h_corr = alpha h`.
pub fn bias_correct(h_opt: f64) -> Result<(f64, f64)> {
    if !(h_opt > 0.0) || !h_opt.is_finite() {
        return Err(BandwidthError::NonPositive(h_opt));
    }
    let alpha = 1.0 / (1.0 + h_opt * h_opt).sqrt();
    Ok((alpha, alpha * h_opt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthEstimate {
    pub l: usize,
    pub m: usize,
    /// Mean over seeds.
    pub h_opt: f64,
    pub h_opt_std: f64,
    pub alpha: f64,
    pub h_corr: f64,
    pub seeds: Vec<u64>,
    pub per_seed_h: Vec<f64>,
}

/// Average the per-seed optimum over `seeds` and apply the bias correction.
pub fn estimate(l: usize, m: usize, cfg: &BandwidthConfig, seeds: &[u64]) -> Result<BandwidthEstimate> {
    if seeds.is_empty() {
        return Err(BandwidthError::InvalidConfig("no seeds".into()));
    }
    let per_seed_h = seeds
        .iter()
        .map(|&s| estimate_h_opt(l, m, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let n = per_seed_h.len() as f64;
    let h_opt = per_seed_h.iter().sum::<f64>() / n;
    let h_opt_std = if per_seed_h.len() > 1 {
        (per_seed_h.iter().map(|h| (h - h_opt).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let (alpha, h_corr) = bias_correct(h_opt)?;
    Ok(BandwidthEstimate {
        l,
        m,
        h_opt,
        h_opt_std,
        alpha,
        h_corr,
        seeds: seeds.to_vec(),
        per_seed_h,
    })
}

/// One row per `(l, m)` cell, `l` outer. A failing cell keeps its error and
/// does not stop the others.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub l: usize,
    pub m: usize,
    pub result: Result<BandwidthEstimate>,
}

pub fn bandwidth_table(
    ls: &[usize],
    ms: &[usize],
    cfg: &BandwidthConfig,
    seeds: &[u64],
) -> Result<Vec<TableRow>> {
    if ls.is_empty() || ms.is_empty() {
        return Err(BandwidthError::EmptyGrid);
    }
    Ok(ls
        .iter()
        .flat_map(|&l| ms.iter().map(move |&m| (l, m)))
        .map(|(l, m)| TableRow {
            l,
            m,
            result: estimate(l, m, cfg, seeds),
        })
        .collect())
}

pub const CSV_HEADER: [&str; 7] = ["l", "m", "h_opt_mean", "h_opt_std", "alpha", "h_corr", "seeds"];

/// CSV with columns `l,m,h_opt_mean,h_opt_std,alpha,h_corr,seeds`; seeds are
/// `;`-separated. Failed cells leave the numeric fields empty.
pub fn write_csv<W: Write>(rows: &[TableRow], seeds: &[u64], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    let seed_field = seeds
        .iter()
        .map(u64::to_string)
        .collect::<Vec<_>>()
        .join(";");
    for row in rows {
        let (l, m) = (row.l.to_string(), row.m.to_string());
        match &row.result {
            Ok(e) => w.write_record([
                l,
                m,
                e.h_opt.to_string(),
                e.h_opt_std.to_string(),
                e.alpha.to_string(),
                e.h_corr.to_string(),
                seed_field.clone(),
            ])?,
            Err(_) => w.write_record([l, m, String::new(), String::new(), String::new(), String::new(), seed_field.clone()])?,
        }
    }
    w.flush()?;
    Ok(())
}

/// Human-readable table. Bandwidths above 1 are shown as `> 1.0`, with the
/// number alongside.
pub fn format_table(rows: &[TableRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>5} {:>7} {:>16} {:>8} {:>8}", "l", "m", "h_opt", "alpha", "h_corr");
    for row in rows {
        match &row.result {
            Ok(e) => {
                let h = if e.h_opt > 1.0 {
                    format!("> 1.0 ({:.3})", e.h_opt)
                } else {
                    format!("{:.3}", e.h_opt)
                };
                let _ = writeln!(
                    s,
                    "{:>5} {:>7} {:>16} {:>8.3} {:>8.3}",
                    row.l, row.m, h, e.alpha, e.h_corr
                );
            }
            Err(err) => {
                let _ = writeln!(s, "{:>5} {:>7} failed: {err}", row.l, row.m);
            }
        }
    }
    s
}

/// Mean of the per-axis sample variances; handy for checking prior draws.
pub fn mean_axis_variance(x: &Array2<f64>) -> f64 {
    x.var_axis(Axis(0), 1.0).mean().unwrap_or(f64::NAN)
}
