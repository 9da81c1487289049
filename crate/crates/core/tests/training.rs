use avae::bandwidth::{self, BandwidthConfig};
use avae::datagen::{mixture_means, DatasetSpec};
use avae::diff::{Bindings, Graph};
use avae::evalx::{generate, sample_prior_biased};
use avae::nets::{adam_step, AdamState};
use avae::seed::derive_seed;
use avae::trainer::{
    self, batch_order, compute_beta, init_model, kl_estimate, recon_error, split_dataset, Autoencoder, TrainConfig,
    DECODER, ENCODER,
};
use avae::KdeModel;
use ndarray::{Array2, Axis};

fn small_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(
        2,
        80,
        3,
        DatasetSpec::Mixture {
            n: 600,
            k: 2,
            d: 3,
            spread: 0.4,
        },
        seed,
    );
    cfg.encoder_hidden = vec![10];
    cfg.decoder_hidden = vec![10];
    cfg.batch_size = 25;
    cfg.bandwidth = Some(0.45);
    cfg
}

/// Plain autoencoder step: reconstruction loss only.
fn reference_step(model: &mut Autoencoder, enc: &mut AdamState, dec: &mut AdamState, batch: &Array2<f64>) -> f64 {
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let x = g.input("x");
    b.insert("x".into(), batch.clone());
    model.encoder.bind(ENCODER, &mut b);
    model.decoder.bind(DECODER, &mut b);
    let z = model.encoder.build_graph(&mut g, ENCODER, x);
    let xh = model.decoder.build_graph(&mut g, DECODER, z);
    let r = g.sub(xh, x);
    let ss = g.sum_squares(r);
    let loss = g.scale(ss, 1.0 / batch.nrows() as f64);
    g.set_output(loss);
    let (value, grads) = g.value_and_gradient(&b).unwrap();
    let ge = model.encoder.grads_from(ENCODER, &grads).unwrap();
    let gd = model.decoder.grads_from(DECODER, &grads).unwrap();
    adam_step(enc, &mut model.encoder, &ge).unwrap();
    adam_step(dec, &mut model.decoder, &gd).unwrap();
    value
}

#[test]
fn zero_beta_matches_reference_autoencoder() {
    let mut cfg = small_config(11);
    cfg.fixed_beta = Some(0.0);
    let out = trainer::train(&cfg).unwrap();

    let data = cfg.dataset.build(derive_seed(cfg.seed, "dataset", &[])).unwrap();
    let x = &data.data;
    let mut split = split_dataset(x.nrows(), cfg.val_fraction, cfg.kde_samples, derive_seed(cfg.seed, "split", &[])).unwrap();
    let mut model = init_model(&cfg, x.ncols()).unwrap();
    let mut enc = AdamState::for_mlp(&model.encoder, cfg.learning_rate);
    let mut dec = AdamState::for_mlp(&model.decoder, cfg.learning_rate);
    let val = x.select(Axis(0), &split.val_idx);
    for epoch in 1..=cfg.epochs {
        let order = batch_order(&split.sgd_idx, cfg.seed, epoch);
        let mut recon_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            recon_sum += reference_step(&mut model, &mut enc, &mut dec, &x.select(Axis(0), chunk)) * chunk.len() as f64;
        }
        let log = &out.logs[epoch];
        assert_eq!(log.train_recon, recon_sum / order.len() as f64, "epoch {epoch}");
        assert_eq!(log.beta, 0.0);
        split = split.reshuffle_kde(derive_seed(cfg.seed, "kde-shuffle", &[epoch as u64]));
    }
    assert_eq!(out.model, model);
    assert_eq!(out.logs.last().unwrap().val_recon, recon_error(&model, &val).unwrap());
}

#[test]
fn logged_beta_is_fresh_each_epoch() {
    let cfg = small_config(2);
    let out = trainer::train(&cfg).unwrap();
    let data = cfg.dataset.build(derive_seed(cfg.seed, "dataset", &[])).unwrap();
    let val = data.data.select(Axis(0), &out.split.val_idx);
    assert_eq!(out.logs.last().unwrap().beta, compute_beta(&out.model, &val).unwrap());
    assert!(out.logs.iter().all(|l| l.beta.is_finite() && l.beta > 0.0));
    let distinct: std::collections::BTreeSet<u64> = out.logs.iter().map(|l| l.beta.to_bits()).collect();
    assert_eq!(distinct.len(), out.logs.len());
}

#[test]
fn different_seeds_give_different_runs() {
    let a = trainer::train(&small_config(1)).unwrap();
    let b = trainer::train(&small_config(2)).unwrap();
    assert_ne!(a.model, b.model);
}

#[test]
fn reencode_cadence_changes_the_run_but_not_its_shape() {
    let every = trainer::train(&small_config(4)).unwrap();
    let mut cfg = small_config(4);
    cfg.kde_reencode_every = 4;
    let sparse = trainer::train(&cfg).unwrap();
    assert_eq!(every.logs.len(), sparse.logs.len());
    assert_ne!(every.model, sparse.model);
}

#[test]
fn kl_estimate_of_matching_gaussians_is_small() {
    let (l, m) = (4, 5000);
    let z = sample_prior_biased(m, l, 0.0, 21).unwrap();
    let h = bandwidth::estimate(l, m, &BandwidthConfig::default(), &[0]).unwrap().h_corr;
    let kde = KdeModel::new(z.clone(), h).unwrap();
    let kl = kl_estimate(&kde, &z).unwrap();
    assert!(kl.abs() < 0.5, "{kl}");
}

#[test]
fn trained_decoder_generates_both_modes() {
    let mut cfg = TrainConfig::new(
        2,
        500,
        30,
        DatasetSpec::Mixture {
            n: 10_000,
            k: 2,
            d: 2,
            spread: 1.2,
        },
        7,
    );
    cfg.learning_rate = 2e-3;
    cfg.bandwidth = Some(0.393);
    let out = trainer::train(&cfg).unwrap();
    let first = out.logs[1].val_recon;
    let last = out.logs.last().unwrap().val_recon;
    assert!(last <= 0.5 * first, "{first} -> {last}");

    let x = generate(&out.model.decoder, out.h_corr, 5000, 3).unwrap();
    let means = mixture_means(2, 2);
    let mut counts = [0usize; 2];
    for row in x.outer_iter() {
        let d: Vec<f64> = means.outer_iter().map(|m| (&row - &m).mapv(|v| v * v).sum()).collect();
        counts[usize::from(d[1] < d[0])] += 1;
    }
    assert!(counts.iter().all(|&c| c >= 1000), "{counts:?}");
}
