//! KDE-regularised autoencoder training.
//!
//! The training set is split into a KDE subset, whose encodings define the
//! aggregate-posterior estimate `q(z)`, and an SGD subset used for minibatch
//! updates. Each minibatch minimises
//!
//! ```text
//! mean_b |x - D(E(x))|^2  +  beta * mean_b [ log q(E(x)) - log N(E(x); 0, I) ]
//! ```
//!
//! where `beta` is the mean (unsquared) validation reconstruction norm,
//! refreshed after every epoch. KDE encodings are refreshed after every
//! `kde_reencode_every` minibatches and the KDE subset is redrawn after every
//! epoch.

use std::f64::consts::PI;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bandwidth::{self, BandwidthConfig, BandwidthError, DEFAULT_SEEDS};
use crate::datagen::{DataError, Dataset, DatasetSpec};
use crate::diff::{Bindings, DiffError, Graph, NodeId};
use crate::kde::{self, KdeError, KdeModel};
use crate::nets::{self, mlp_init, Activation, AdamState, MlpGrads, MlpParams, MlpRecord, NetError, OutputActivation};
use crate::seed::{derive_seed, rng_for};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss (recon {recon}, kl {kl}): {source}")]
    NonFiniteLoss {
        recon: f64,
        kl: f64,
        #[source]
        source: DiffError,
    },
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
        logs: Vec<EpochLog>,
    },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Kde(#[from] KdeError),
    #[error(transparent)]
    Bandwidth(#[from] BandwidthError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_batch() -> usize {
    100
}
fn default_lr() -> f64 {
    5e-4
}
fn default_reencode() -> usize {
    1
}
fn default_val_fraction() -> f64 {
    0.1
}
fn default_bandwidth_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub latent_dim: usize,
    /// KDE subset size `m`.
    pub kde_samples: usize,
    #[serde(default = "default_hidden")]
    pub encoder_hidden: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub decoder_hidden: Vec<usize>,
    #[serde(default)]
    pub hidden_activation: Activation,
    #[serde(default)]
    pub output_activation: OutputActivation,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub dataset: DatasetSpec,
    pub seed: u64,
    #[serde(default = "default_reencode")]
    pub kde_reencode_every: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Use this corrected bandwidth instead of estimating one for
    /// `(latent_dim, kde_samples)`.
    #[serde(default)]
    pub bandwidth: Option<f64>,
    #[serde(default = "default_bandwidth_seeds")]
    pub bandwidth_seeds: Vec<u64>,
    /// Hold beta constant instead of the per-epoch validation update.
    #[serde(default)]
    pub fixed_beta: Option<f64>,
    /// Let gradients flow through the KDE sample encodings as well.
    #[serde(default)]
    pub kde_gradient: bool,
}

impl TrainConfig {
    /// Minimal config with defaults for everything optional.
    pub fn new(latent_dim: usize, kde_samples: usize, epochs: usize, dataset: DatasetSpec, seed: u64) -> Self {
        Self {
            latent_dim,
            kde_samples,
            encoder_hidden: default_hidden(),
            decoder_hidden: default_hidden(),
            hidden_activation: Activation::default(),
            output_activation: OutputActivation::default(),
            batch_size: default_batch(),
            epochs,
            learning_rate: default_lr(),
            dataset,
            seed,
            kde_reencode_every: default_reencode(),
            val_fraction: default_val_fraction(),
            bandwidth: None,
            bandwidth_seeds: default_bandwidth_seeds(),
            fixed_beta: None,
            kde_gradient: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1");
        }
        if self.kde_samples < 2 {
            return bad("kde_samples must be at least 2");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.kde_reencode_every == 0 {
            return bad("kde_reencode_every must be positive");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must be in (0, 1)");
        }
        if self.encoder_hidden.contains(&0) || self.decoder_hidden.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        if let Some(h) = self.bandwidth {
            if !(h > 0.0 && h < 1.0) {
                return bad("bandwidth must be in (0, 1)");
            }
        } else if self.bandwidth_seeds.is_empty() {
            return bad("bandwidth_seeds must not be empty");
        }
        if let Some(b) = self.fixed_beta {
            if !(b >= 0.0 && b.is_finite()) {
                return bad("fixed_beta must be finite and non-negative");
            }
        }
        Ok(())
    }
}

/// Index bookkeeping. All indices refer to rows of the full dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    /// Sorted.
    pub train_idx: Vec<usize>,
    pub kde_idx: Vec<usize>,
    pub sgd_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub epoch_seed: u64,
}

impl DataSplit {
    /// Draw `m` of the training rows for the KDE, uniformly.
    pub fn partition(mut train_idx: Vec<usize>, val_idx: Vec<usize>, m: usize, seed: u64) -> Result<Self> {
        if m == 0 || m >= train_idx.len() {
            return Err(TrainError::Config(format!(
                "need 0 < m < n_train, got m={m}, n_train={}",
                train_idx.len()
            )));
        }
        train_idx.sort_unstable();
        let mut shuffled = train_idx.clone();
        shuffled.shuffle(&mut rng_for(seed, "kde-subset", &[]));
        let mut kde_idx = shuffled[..m].to_vec();
        let mut sgd_idx = shuffled[m..].to_vec();
        kde_idx.sort_unstable();
        sgd_idx.sort_unstable();
        Ok(Self {
            train_idx,
            kde_idx,
            sgd_idx,
            val_idx,
            epoch_seed: seed,
        })
    }

    /// Fresh KDE subset of the same size.
    pub fn reshuffle_kde(&self, epoch_seed: u64) -> Self {
        Self::partition(self.train_idx.clone(), self.val_idx.clone(), self.kde_idx.len(), epoch_seed)
            .expect("sizes were valid for the original split")
    }

    /// `kde` and `sgd` are disjoint and together cover `train`.
    pub fn is_consistent(&self) -> bool {
        let mut all: Vec<usize> = self.kde_idx.iter().chain(&self.sgd_idx).copied().collect();
        all.sort_unstable();
        all == self.train_idx
    }
}

/// Partition `0..n_train` into KDE and SGD rows; no validation rows.
pub fn split_data(n_train: usize, m: usize, seed: u64) -> Result<DataSplit> {
    DataSplit::partition((0..n_train).collect(), Vec::new(), m, seed)
}

/// Hold out `round(n * val_fraction)` rows (at least one) for validation,
/// then partition the rest.
pub fn split_dataset(n: usize, val_fraction: f64, m: usize, seed: u64) -> Result<DataSplit> {
    let n_val = ((n as f64 * val_fraction).round() as usize).max(1);
    if n_val >= n {
        return Err(TrainError::Config(format!("dataset of {n} rows is too small")));
    }
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(&mut rng_for(seed, "validation", &[]));
    let mut val = all[..n_val].to_vec();
    val.sort_unstable();
    DataSplit::partition(all[n_val..].to_vec(), val, m, seed)
}

/// Minibatch order for an epoch: a seeded permutation of the SGD rows.
pub fn batch_order(sgd_idx: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order = sgd_idx.to_vec();
    order.shuffle(&mut rng_for(seed, "batches", &[epoch as u64]));
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub encoder: MlpParams,
    pub decoder: MlpParams,
}

impl Autoencoder {
    pub fn encode(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.encoder.forward(x)?)
    }

    pub fn reconstruct(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.decoder.forward(&self.encoder.forward(x)?)?)
    }
}

/// Mean unsquared reconstruction norm over the validation rows.
pub fn compute_beta(model: &Autoencoder, val: &Array2<f64>) -> Result<f64> {
    if val.nrows() == 0 {
        return Err(TrainError::EmptyValidation);
    }
    Ok(beta_from_residuals(&(val - &model.reconstruct(val)?)))
}

pub(crate) fn beta_from_residuals(residual: &Array2<f64>) -> f64 {
    let total: f64 = residual.outer_iter().map(|r| r.dot(&r).sqrt()).sum();
    total / residual.nrows() as f64
}

/// Mean squared reconstruction error per row.
pub fn recon_error(model: &Autoencoder, x: &Array2<f64>) -> Result<f64> {
    let r = x - &model.reconstruct(x)?;
    Ok(r.iter().map(|v| v * v).sum::<f64>() / x.nrows().max(1) as f64)
}

/// Minibatch KL estimate `mean_b [log q(z) - log N(z; 0, I)]`.
pub fn kl_estimate(kde: &KdeModel, latents: &Array2<f64>) -> Result<f64> {
    let l = latents.ncols() as f64;
    let log_prior = latents
        .outer_iter()
        .map(|z| -0.5 * z.dot(&z) - 0.5 * l * (2.0 * PI).ln())
        .sum::<f64>()
        / latents.nrows() as f64;
    Ok(kde.mean_log_density(latents)? - log_prior)
}

/// Where the KDE centres come from inside the loss graph.
#[derive(Debug, Clone, Copy)]
pub enum KdeSource<'a> {
    /// Pre-encoded constants (no gradient).
    Fixed(&'a KdeModel),
    /// Raw KDE rows pushed through the encoder inside the graph, so the
    /// centres carry gradient too.
    Encoded { x_kde: &'a Array2<f64>, bandwidth: f64 },
}

/// The loss graph for one minibatch plus its bindings.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub graph: Graph,
    pub bindings: Bindings,
    pub loss: NodeId,
    pub recon: NodeId,
    pub kl: NodeId,
}

pub const ENCODER: &str = "enc";
pub const DECODER: &str = "dec";

pub fn build_loss_graph(
    model: &Autoencoder,
    batch: &Array2<f64>,
    kde: KdeSource<'_>,
    beta: f64,
) -> Result<LossGraph> {
    if batch.nrows() == 0 {
        return Err(TrainError::EmptyBatch);
    }
    let l = model.encoder.output_dim();
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let x = g.input("x");
    b.insert("x".into(), batch.to_owned());
    model.encoder.bind(ENCODER, &mut b);
    model.decoder.bind(DECODER, &mut b);

    let z = model.encoder.build_graph(&mut g, ENCODER, x);
    let xh = model.decoder.build_graph(&mut g, DECODER, z);
    let r = g.sub(xh, x);
    let ss = g.sum_squares(r);
    let recon = g.scale(ss, 1.0 / batch.nrows() as f64);

    let (centres, h, m) = match kde {
        KdeSource::Fixed(model) => {
            let c = g.input("kde");
            b.insert("kde".into(), model.samples().clone());
            (c, model.bandwidth(), model.len())
        }
        KdeSource::Encoded { x_kde, bandwidth } => {
            let xk = g.input("x_kde");
            b.insert("x_kde".into(), x_kde.to_owned());
            (model.encoder.build_graph(&mut g, ENCODER, xk), bandwidth, x_kde.nrows())
        }
    };
    let log_q = kde::log_density_node(&mut g, z, centres, h, l, m);
    let zz = g.row_sum_squares(z);
    let half = g.scale(zz, -0.5);
    let log_p = g.offset(half, -0.5 * l as f64 * (2.0 * PI).ln());
    let diff = g.sub(log_q, log_p);
    let kl = g.mean(diff);
    let weighted = g.scale(kl, beta);
    let loss = g.add(recon, weighted);
    g.set_output(loss);
    Ok(LossGraph {
        graph: g,
        bindings: b,
        loss,
        recon,
        kl,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub encoder_grads: MlpGrads,
    pub decoder_grads: MlpGrads,
}

/// Loss value, components and gradients for one minibatch.
pub fn avae_loss(model: &Autoencoder, batch: &Array2<f64>, kde: KdeSource<'_>, beta: f64) -> Result<LossEval> {
    let mut lg = build_loss_graph(model, batch, kde, beta)?;
    let loss = match lg.graph.evaluate(&lg.bindings) {
        Ok(v) => v,
        Err(source @ DiffError::NonFinite { .. }) => {
            let recon = recon_error(model, batch).unwrap_or(f64::NAN);
            let kl = match kde {
                KdeSource::Fixed(k) => model
                    .encode(batch)
                    .ok()
                    .and_then(|z| kl_estimate(k, &z).ok())
                    .unwrap_or(f64::NAN),
                KdeSource::Encoded { .. } => f64::NAN,
            };
            return Err(TrainError::NonFiniteLoss { recon, kl, source });
        }
        Err(e) => return Err(e.into()),
    };
    let grads = lg.graph.gradient()?;
    let recon = lg.graph.value(lg.recon).map(|v| v[[0, 0]]).unwrap_or(f64::NAN);
    let kl = lg.graph.value(lg.kl).map(|v| v[[0, 0]]).unwrap_or(f64::NAN);
    Ok(LossEval {
        loss,
        recon,
        kl,
        encoder_grads: model.encoder.grads_from(ENCODER, &grads)?,
        decoder_grads: model.decoder.grads_from(DECODER, &grads)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Beta after this epoch's update, i.e. the weight used for the next one.
    pub beta: f64,
    /// Mean minibatch reconstruction loss over the epoch (epoch 0: over the
    /// SGD rows before any update).
    pub train_recon: f64,
    pub val_recon: f64,
    /// KL estimate of the validation encodings against the current KDE.
    pub kl_estimate: f64,
    /// Not written to the metric log so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Autoencoder,
    pub logs: Vec<EpochLog>,
    /// `None` when the corrected bandwidth was given directly.
    pub h_opt: Option<f64>,
    pub h_corr: f64,
    pub split: DataSplit,
    /// Encodings of the validation rows after training.
    pub val_latents: Array2<f64>,
}

/// Build the configured dataset and train on it.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let ds = config.dataset.build(derive_seed(config.seed, "dataset", &[]))?;
    train_on(config, &ds)
}

/// `(h_opt, h_corr)` for a config: either given, or estimated for
/// `(latent_dim, kde_samples)`.
pub fn resolve_bandwidth(config: &TrainConfig) -> Result<(Option<f64>, f64)> {
    match config.bandwidth {
        Some(h) => Ok((None, h)),
        None => {
            let est = bandwidth::estimate(
                config.latent_dim,
                config.kde_samples,
                &BandwidthConfig::default(),
                &config.bandwidth_seeds,
            )?;
            Ok((Some(est.h_opt), est.h_corr))
        }
    }
}

fn rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

pub fn init_model(config: &TrainConfig, data_dim: usize) -> Result<Autoencoder> {
    let mut enc_sizes = vec![data_dim];
    enc_sizes.extend(&config.encoder_hidden);
    enc_sizes.push(config.latent_dim);
    let mut dec_sizes = vec![config.latent_dim];
    dec_sizes.extend(&config.decoder_hidden);
    dec_sizes.push(data_dim);
    Ok(Autoencoder {
        encoder: mlp_init(
            &enc_sizes,
            config.hidden_activation,
            OutputActivation::None,
            derive_seed(config.seed, "encoder", &[]),
        )?,
        decoder: mlp_init(
            &dec_sizes,
            config.hidden_activation,
            config.output_activation,
            derive_seed(config.seed, "decoder", &[]),
        )?,
    })
}

const DIVERGENCE_LIMIT: f64 = 1e6;

pub fn train_on(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let x = &data.data;
    let mut split = split_dataset(
        x.nrows(),
        config.val_fraction,
        config.kde_samples,
        derive_seed(config.seed, "split", &[]),
    )?;
    if config.batch_size > split.sgd_idx.len() {
        return Err(TrainError::Config(format!(
            "batch_size {} exceeds the {} SGD rows",
            config.batch_size,
            split.sgd_idx.len()
        )));
    }
    let (h_opt, h_corr) = resolve_bandwidth(config)?;
    let mut model = init_model(config, x.ncols())?;
    let mut adam_enc = AdamState::for_mlp(&model.encoder, config.learning_rate);
    let mut adam_dec = AdamState::for_mlp(&model.decoder, config.learning_rate);
    let x_val = rows(x, &split.val_idx);

    let mut x_kde = rows(x, &split.kde_idx);
    let mut kde = KdeModel::new(model.encode(&x_kde)?, h_corr)?;
    let mut beta = match config.fixed_beta {
        Some(b) => b,
        None => compute_beta(&model, &x_val)?,
    };

    let started = Instant::now();
    let mut logs = vec![EpochLog {
        epoch: 0,
        beta,
        train_recon: recon_error(&model, &rows(x, &split.sgd_idx))?,
        val_recon: recon_error(&model, &x_val)?,
        kl_estimate: kl_estimate(&kde, &model.encode(&x_val)?)?,
        wall_time_s: started.elapsed().as_secs_f64(),
    }];

    for epoch in 1..=config.epochs {
        let order = batch_order(&split.sgd_idx, config.seed, epoch);
        let (mut recon_sum, mut kl_sum, mut seen) = (0.0, 0.0, 0usize);
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = rows(x, chunk);
            let source = if config.kde_gradient {
                KdeSource::Encoded {
                    x_kde: &x_kde,
                    bandwidth: h_corr,
                }
            } else {
                KdeSource::Fixed(&kde)
            };
            let eval = avae_loss(&model, &batch, source, beta)?;
            if !eval.loss.is_finite() || eval.loss > DIVERGENCE_LIMIT {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: bi,
                    loss: eval.loss,
                    logs,
                });
            }
            nets::adam_step(&mut adam_enc, &mut model.encoder, &eval.encoder_grads)?;
            nets::adam_step(&mut adam_dec, &mut model.decoder, &eval.decoder_grads)?;
            recon_sum += eval.recon * chunk.len() as f64;
            kl_sum += eval.kl * chunk.len() as f64;
            seen += chunk.len();
            if (bi + 1) % config.kde_reencode_every == 0 {
                kde = KdeModel::new(model.encode(&x_kde)?, h_corr)?;
            }
        }

        if config.fixed_beta.is_none() {
            beta = compute_beta(&model, &x_val)?;
        }
        split = split.reshuffle_kde(derive_seed(config.seed, "kde-shuffle", &[epoch as u64]));
        assert!(split.is_consistent(), "KDE/SGD partition broken after epoch {epoch}");
        x_kde = rows(x, &split.kde_idx);
        kde = KdeModel::new(model.encode(&x_kde)?, h_corr)?;

        let _ = kl_sum;
        logs.push(EpochLog {
            epoch,
            beta,
            train_recon: recon_sum / seen as f64,
            val_recon: recon_error(&model, &x_val)?,
            kl_estimate: kl_estimate(&kde, &model.encode(&x_val)?)?,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }

    let val_latents = model.encode(&x_val)?;
    Ok(TrainOutcome {
        model,
        logs,
        h_opt,
        h_corr,
        split,
        val_latents,
    })
}

/// Everything needed to regenerate samples from a trained run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub encoder: MlpRecord,
    pub decoder: MlpRecord,
    pub config: TrainConfig,
    pub h_opt: Option<f64>,
    pub h_corr: f64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn from_outcome(config: &TrainConfig, out: &TrainOutcome) -> Self {
        Self {
            encoder: MlpRecord::from(&out.model.encoder),
            decoder: MlpRecord::from(&out.model.decoder),
            config: config.clone(),
            h_opt: out.h_opt,
            h_corr: out.h_corr,
            seed: config.seed,
        }
    }

    pub fn model(&self) -> Result<Autoencoder> {
        Ok(Autoencoder {
            encoder: MlpParams::try_from(self.encoder.clone())?,
            decoder: MlpParams::try_from(self.decoder.clone())?,
        })
    }
}
