use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::grid::{DenseCostmap, GridSpec};
use crate::sim::{Image, Point, PointCloud};

pub(crate) fn toy_config() -> ModelConfig {
    ModelConfig {
        channels: 4,
        stage3_channels: 4,
        stage4_channels: 4,
        film_hidden: 2,
        head_channels: 8,
        max_points: 8,
    }
}

pub(crate) fn random_sample(seed: u64, n: usize, res: f64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = GridSpec::centered(res, n, n).unwrap();
    let half = grid.width_m() / 2.0;
    let points = (0..n * n / 2)
        .map(|_| Point {
            xyz: [
                rng.random_range(-half..half),
                rng.random_range(-half..half),
                rng.random_range(-0.5..0.5),
            ],
            rgb: [rng.random(), rng.random(), rng.random()],
        })
        .collect();
    let values = (0..n * n).map(|_| rng.random()).collect();
    let valid = (0..n * n).map(|_| rng.random_bool(0.6)).collect();
    let pixels = (0..8 * 8 * 3).map(|_| rng.random()).collect();
    Sample {
        cloud: PointCloud { points },
        image: Image::new(8, 8, pixels).unwrap(),
        target: DenseCostmap::with_mask(grid, values, valid).unwrap(),
    }
}

fn no_aug() -> TrainConfig {
    TrainConfig {
        augment: AugmentConfig::disabled(),
        ..TrainConfig::default()
    }
}

#[test]
fn zero_network_predicts_one_half() {
    let s = random_sample(1, 16, 0.25);
    let p = ModelParams::zeros(&toy_config());
    let pred = forward(&p, &s.cloud, &s.image, &s.target.grid).unwrap();
    assert_eq!(pred.grid, s.target.grid);
    assert!(pred.values.iter().all(|&v| v == 0.5));
    assert!(pred.valid.iter().all(|&v| v));
}

#[test]
fn empty_cloud_gives_defined_output() {
    let mut s = random_sample(2, 16, 0.25);
    s.cloud.points.clear();
    let p = ModelParams::init(&toy_config(), 3);
    let pred = forward(&p, &s.cloud, &s.image, &s.target.grid).unwrap();
    assert!(pred.values.iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn default_model_has_a_64_channel_head() {
    let p = ModelParams::init(&ModelConfig::default(), 0);
    assert_eq!(p.head.outputs(), 64);
    assert_eq!(p.output.inputs(), 64);
    assert_eq!(p, ModelParams::init(&ModelConfig::default(), 0));
    assert_ne!(p, ModelParams::init(&ModelConfig::default(), 1));
}

#[test]
fn toy_model_fits_the_parameter_budget() {
    assert!(ModelParams::zeros(&toy_config()).num_params() <= 5000);
}

#[test]
fn perfect_constant_prediction_has_zero_loss() {
    let mut s = random_sample(4, 16, 0.25);
    s.target.values.iter_mut().for_each(|v| *v = 0.5);
    let p = ModelParams::zeros(&toy_config());
    let (r, g) = loss_and_grads(&p, &[s], &no_aug()).unwrap();
    assert_eq!(r.total, 0.0);
    assert!(g
        .tensors()
        .iter()
        .all(|(_, t)| t.data.iter().all(|&v| v == 0.0)));
}

#[test]
fn batch_loss_is_a_mean() {
    let p = ModelParams::init(&toy_config(), 5);
    let a = random_sample(6, 16, 0.25);
    let b = random_sample(7, 16, 0.25);
    let cfg = no_aug();
    let (ra, _) = loss_and_grads(&p, std::slice::from_ref(&a), &cfg).unwrap();
    let (rd, _) = loss_and_grads(&p, &[a.clone(), a.clone()], &cfg).unwrap();
    assert!((ra.total - rd.total).abs() < 1e-15);
    let (rab, gab) = loss_and_grads(&p, &[a.clone(), b.clone()], &cfg).unwrap();
    let (rba, gba) = loss_and_grads(&p, &[b, a], &cfg).unwrap();
    assert!((rab.total - rba.total).abs() < 1e-15);
    for ((_, x), (_, y)) in gab.tensors().into_iter().zip(gba.tensors()) {
        assert!(x
            .data
            .iter()
            .zip(&y.data)
            .all(|(u, v)| (u - v).abs() <= 1e-15 * (1.0 + u.abs())));
    }
    assert!(loss_and_grads(&p, &[], &cfg).is_err());
}

/// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)` over
/// every parameter, with central differences of step `h`.
pub(crate) fn max_fd_error(
    params: &ModelParams,
    batch: &[Sample],
    cfg: &TrainConfig,
    h: f64,
    floor: f64,
) -> (f64, String) {
    let (_, grads) = loss_and_grads(params, batch, cfg).unwrap();
    let mut worst = (0.0, String::new());
    for (ti, (name, g)) in grads.tensors().into_iter().enumerate() {
        for k in 0..g.data.len() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.tensors_mut()[ti].1.data[k] += delta;
                loss_and_grads(&p, batch, cfg).unwrap().0.total
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = g.data[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > worst.0 {
                worst = (
                    rel,
                    format!("{name}[{k}] analytic {a:e} numeric {numeric:e}"),
                );
            }
        }
    }
    worst
}

/// Toy instance with no ReLU, max-pool or loss-branch boundary within
/// reach of a 1e-4 perturbation, where central differences are a valid oracle.
pub(crate) fn smooth_instance() -> (ModelParams, [Sample; 2]) {
    (
        ModelParams::init(&toy_config(), 104),
        [random_sample(208, 16, 0.25), random_sample(209, 16, 0.25)],
    )
}

#[test]
fn gradients_match_finite_differences() {
    let (params, batch) = smooth_instance();
    let (err, at) = max_fd_error(&params, &batch, &no_aug(), 1e-4, 1e-7);
    assert!(err < 1e-4, "relative error {err:e} at {at}");
}

#[test]
fn gradients_without_image_match_finite_differences() {
    let (params, batch) = smooth_instance();
    let cfg = TrainConfig {
        use_image: false,
        ..no_aug()
    };
    let (err, at) = max_fd_error(&params, &batch, &cfg, 1e-4, 1e-7);
    assert!(err < 1e-4, "relative error {err:e} at {at}");
}

#[test]
fn gradients_match_small_step_differences_on_a_kinked_instance() {
    let params = ModelParams::init(&toy_config(), 31);
    let batch = [random_sample(32, 16, 0.25)];
    let cfg = TrainConfig {
        use_image: false,
        ..no_aug()
    };
    let (err, at) = max_fd_error(&params, &batch, &cfg, 1e-5, 1e-7);
    assert!(err < 1e-4, "relative error {err:e} at {at}");
}

#[test]
fn zero_epochs_return_initial_params() {
    let data = [random_sample(8, 16, 0.25)];
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let (p, h) = fit(&data, &toy_config(), &cfg).unwrap();
    assert!(h.is_empty());
    assert_eq!(p, ModelParams::init(&toy_config(), cfg.seed));
}

#[test]
fn fit_is_deterministic_and_respects_max_steps() {
    let data: Vec<_> = (0..5).map(|i| random_sample(40 + i, 16, 0.25)).collect();
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 2,
        max_steps: Some(7),
        seed: 9,
        ..TrainConfig::default()
    };
    let (pa, ha) = fit(&data, &toy_config(), &cfg).unwrap();
    let (pb, hb) = fit(&data, &toy_config(), &cfg).unwrap();
    assert_eq!(ha.len(), 7);
    assert_eq!(ha, hb);
    assert_eq!(pa, pb);
    let csv = history_csv(&ha);
    assert_eq!(csv.lines().count(), 8);
    assert!(csv.starts_with("step,huber,smooth,total\n1,"));
}

#[test]
fn invalid_train_config_is_rejected() {
    let data = [random_sample(8, 16, 0.25)];
    for cfg in [
        TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            huber_delta: -1.0,
            ..TrainConfig::default()
        },
    ] {
        assert!(fit(&data, &toy_config(), &cfg).is_err());
    }
    assert!(fit(&[], &toy_config(), &TrainConfig::default()).is_err());
}
