//! Synthetic datasets and an IDX (MNIST-style) loader.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_for;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset parameters: {0}")]
    Invalid(String),
    #[error("bad IDX magic {0:#010x}")]
    BadMagic(u32),
    #[error("unsupported IDX element type {0:#04x} (only unsigned bytes)")]
    UnsupportedType(u8),
    #[error("truncated IDX data: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub data: Array2<f64>,
    pub seed: u64,
    /// Generating component per row, when known.
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

/// Dataset recipe as it appears in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Mixture {
        n: usize,
        k: usize,
        d: usize,
        spread: f64,
    },
    Ring {
        n: usize,
        d: usize,
        radius: f64,
        noise: f64,
    },
    Idx {
        path: std::path::PathBuf,
        /// Keep only the first `limit` images.
        #[serde(default)]
        limit: Option<usize>,
    },
}

impl DatasetSpec {
    pub fn build(&self, seed: u64) -> Result<Dataset> {
        match self {
            DatasetSpec::Mixture { n, k, d, spread } => gaussian_mixture(*n, *k, *d, *spread, seed),
            DatasetSpec::Ring { n, d, radius, noise } => ring(*n, *d, *radius, *noise, seed),
            DatasetSpec::Idx { path, limit } => {
                let mut ds = load_idx(path)?;
                if let Some(limit) = limit {
                    let keep = (*limit).min(ds.len());
                    ds.data = ds.data.slice(ndarray::s![..keep, ..]).to_owned();
                }
                Ok(ds)
            }
        }
    }
}

/// Distance of mixture means from the origin.
pub const MIXTURE_RADIUS: f64 = 2.0;

/// Deterministic component means: evenly spaced on a line for `d = 1`,
/// equal angles on a circle for `d = 2`, `+-R e_j` along the axes for
/// `d >= 3` (falling back to the circle in the first two coordinates once
/// the `2d` axis directions run out).
pub fn mixture_means(k: usize, d: usize) -> Array2<f64> {
    let r = MIXTURE_RADIUS;
    let mut means = Array2::zeros((k, d));
    for j in 0..k {
        if d == 1 {
            means[[j, 0]] = if k == 1 {
                0.0
            } else {
                -r + 2.0 * r * j as f64 / (k - 1) as f64
            };
        } else if d >= 3 && k <= 2 * d {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            means[[j, j / 2]] = sign * r;
        } else {
            let a = 2.0 * PI * j as f64 / k as f64;
            means[[j, 0]] = r * a.cos();
            means[[j, 1]] = r * a.sin();
        }
    }
    means
}

/// `n` points from `k` isotropic Gaussian components, row `i` belongs to
/// component `i mod k`.
pub fn gaussian_mixture(n: usize, k: usize, d: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if k == 0 || n < k || d == 0 || !(spread > 0.0) {
        return Err(DataError::Invalid(format!(
            "mixture needs n >= k >= 1, d >= 1, spread > 0 (n={n}, k={k}, d={d}, spread={spread})"
        )));
    }
    let means = mixture_means(k, d);
    let mut rng = rng_for(seed, "mixture", &[]);
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let data = Array2::from_shape_fn((n, d), |(i, j)| {
        means[[labels[i], j]] + spread * rng.sample::<f64, _>(StandardNormal)
    });
    Ok(Dataset {
        name: format!("mixture-k{k}-d{d}"),
        data,
        seed,
        labels: Some(labels),
    })
}

/// Points near a circle of `radius` in the first two coordinates, Gaussian
/// noise everywhere.
pub fn ring(n: usize, d: usize, radius: f64, noise: f64, seed: u64) -> Result<Dataset> {
    if d < 2 || n == 0 || noise < 0.0 || !radius.is_finite() {
        return Err(DataError::Invalid(format!(
            "ring needs d >= 2, n >= 1, noise >= 0 (n={n}, d={d}, noise={noise})"
        )));
    }
    let mut rng = rng_for(seed, "ring", &[]);
    let mut data = Array2::zeros((n, d));
    for mut row in data.outer_iter_mut() {
        let a = rng.random_range(0.0..2.0 * PI);
        row[0] = radius * a.cos();
        row[1] = radius * a.sin();
        for v in row.iter_mut() {
            if noise > 0.0 {
                *v += noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    Ok(Dataset {
        name: format!("ring-d{d}"),
        data,
        seed,
        labels: None,
    })
}

const IDX_UBYTE: u8 = 0x08;

/// Parse an unsigned-byte IDX buffer: rows are the first dimension, the
/// remaining dimensions are flattened row-major, bytes scale to `[0, 1]`.
pub fn parse_idx(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            expected: 4,
            actual: bytes.len(),
        });
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let ndims = bytes[3] as usize;
    if bytes[0] != 0 || bytes[1] != 0 || ndims == 0 {
        return Err(DataError::BadMagic(magic));
    }
    if bytes[2] != IDX_UBYTE {
        return Err(DataError::UnsupportedType(bytes[2]));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(DataError::Truncated {
            expected: header,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n = dims[0];
    let d: usize = dims[1..].iter().product();
    let expected = header + n * d;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let data = Array2::from_shape_fn((n, d), |(i, j)| f64::from(bytes[header + i * d + j]) / 255.0);
    Ok(Dataset {
        name: "idx".into(),
        data,
        seed: 0,
        labels: None,
    })
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut ds = parse_idx(&bytes)?;
    ds.name = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Ok(ds)
}

/// Encode an unsigned-byte IDX tensor.
pub fn encode_idx(dims: &[u32], payload: &[u8]) -> Vec<u8> {
    assert!(!dims.is_empty() && dims.len() < 256);
    let mut out = vec![0, 0, IDX_UBYTE, dims.len() as u8];
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;

    #[test]
    fn single_component_mean_within_clt_bound() {
        let n = 4000;
        let ds = gaussian_mixture(n, 1, 3, 1.0, 5).unwrap();
        let mean = ds.data.mean_axis(Axis(0)).unwrap();
        let centre = mixture_means(1, 3);
        let bound = 3.0 / (n as f64).sqrt();
        for j in 0..3 {
            assert!((mean[j] - centre[[0, j]]).abs() < bound, "{mean}");
        }
    }

    #[test]
    fn tight_clusters_are_separable() {
        let ds = gaussian_mixture(1000, 2, 2, 0.05, 1).unwrap();
        let means = mixture_means(2, 2);
        let labels = ds.labels.as_ref().unwrap();
        let agree = ds
            .data
            .outer_iter()
            .zip(labels)
            .filter(|(x, &lab)| {
                let d = |j: usize| (&x.to_owned() - &means.row(j)).mapv(|v| v * v).sum();
                (if d(0) <= d(1) { 0 } else { 1 }) == lab
            })
            .count();
        assert!(agree as f64 / 1000.0 >= 0.99);
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 500);
    }

    #[test]
    fn mixture_rejects_bad_sizes() {
        assert!(gaussian_mixture(1, 2, 2, 1.0, 0).is_err());
        assert!(gaussian_mixture(10, 0, 2, 1.0, 0).is_err());
        assert!(gaussian_mixture(10, 2, 0, 1.0, 0).is_err());
        assert!(gaussian_mixture(10, 2, 2, 0.0, 0).is_err());
    }

    #[test]
    fn mixture_means_layout() {
        let m = mixture_means(4, 2);
        assert!((m[[1, 1]] - MIXTURE_RADIUS).abs() < 1e-12);
        let m = mixture_means(3, 5);
        assert_eq!(m.row(1).to_vec(), vec![-2.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(m.row(2).to_vec(), vec![0.0, 2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn ring_without_noise_is_exact() {
        let ds = ring(500, 4, 1.5, 0.0, 2).unwrap();
        for r in ds.data.outer_iter() {
            assert!(((r[0] * r[0] + r[1] * r[1]).sqrt() - 1.5).abs() < 1e-12);
            assert_eq!(r[2], 0.0);
        }
        assert!(ring(10, 1, 1.0, 0.1, 0).is_err());
    }

    #[test]
    fn ring_mean_near_origin() {
        let n = 5000;
        let (radius, noise) = (1.0, 0.1);
        let ds = ring(n, 3, radius, noise, 4).unwrap();
        let mean = ds.data.mean_axis(Axis(0)).unwrap();
        // per-axis sd is at most sqrt(r^2/2 + noise^2)
        let sd = (radius * radius / 2.0 + noise * noise).sqrt();
        let bound = 3.0 * sd / (n as f64).sqrt();
        assert!(mean.iter().all(|m| m.abs() < bound), "{mean}");
    }

    #[test]
    fn generators_are_seeded() {
        let a = gaussian_mixture(50, 2, 2, 0.3, 1).unwrap();
        assert_eq!(a, gaussian_mixture(50, 2, 2, 0.3, 1).unwrap());
        assert_ne!(a.data, gaussian_mixture(50, 2, 2, 0.3, 2).unwrap().data);
        let r = ring(50, 2, 1.0, 0.1, 1).unwrap();
        assert_eq!(r, ring(50, 2, 1.0, 0.1, 1).unwrap());
        assert_ne!(r.data, ring(50, 2, 1.0, 0.1, 2).unwrap().data);
    }

    #[test]
    fn idx_scaling() {
        let bytes = encode_idx(&[2, 2, 2], &[0, 255, 255, 0, 0, 0, 255, 255]);
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        let ds = parse_idx(&bytes).unwrap();
        assert_eq!(ds.data.dim(), (2, 4));
        assert_eq!(ds.data.row(0).to_vec(), vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(ds.data.row(1).to_vec(), vec![0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn idx_errors() {
        let good = encode_idx(&[2, 2, 2], &[1; 8]);
        match parse_idx(&good[..good.len() - 3]).unwrap_err() {
            DataError::Truncated { expected, actual } => {
                assert_eq!((expected, actual), (good.len(), good.len() - 3))
            }
            e => panic!("{e:?}"),
        }
        let mut bad = good.clone();
        bad[0] = 1;
        assert!(matches!(parse_idx(&bad).unwrap_err(), DataError::BadMagic(_)));
        let mut float = good.clone();
        float[2] = 0x0d;
        assert!(matches!(parse_idx(&float).unwrap_err(), DataError::UnsupportedType(0x0d)));
        assert!(matches!(parse_idx(&[0, 0]).unwrap_err(), DataError::Truncated { .. }));
    }

    #[test]
    fn idx_file_round_trip() {
        let mut rng = rng_for(0, "idx-test", &[]);
        let payload: Vec<u8> = (0..3 * 5 * 4).map(|_| rng.random()).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs.idx3-ubyte");
        std::fs::write(&path, encode_idx(&[3, 5, 4], &payload)).unwrap();
        let ds = load_idx(&path).unwrap();
        let back: Vec<u8> = ds.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        assert_eq!(back, payload);
        assert!(ds.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(matches!(load_idx(dir.path().join("nope")).unwrap_err(), DataError::Io { .. }));
    }
}
