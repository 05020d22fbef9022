use marscost::bev::{embed_image, pillarize, EMBEDDING_DIM};
use marscost::eval::{apply_ablation, mae, mse, AblationMode, AblationSpec};
use marscost::labeling::{cell_cost, normalize_labels, CellSample, LabelingConfig};
use marscost::net::{forward, huber_loss, ModelConfig, ModelParams, Sample};
use marscost::sim::{Image, Point, PointCloud};
use marscost::{DenseCostmap, GridSpec};
use nalgebra::Vector3;
use proptest::prelude::*;

fn toy() -> ModelConfig {
    ModelConfig {
        channels: 4,
        stage3_channels: 4,
        stage4_channels: 4,
        film_hidden: 3,
        head_channels: 8,
        max_points: 6,
    }
}

fn cloud_strategy() -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(
        (
            (-3.0f64..3.0, -3.0f64..3.0, -1.0f64..1.0),
            (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0),
        ),
        0..120,
    )
    .prop_map(|pts| PointCloud {
        points: pts
            .into_iter()
            .map(|((x, y, z), (r, g, b))| Point {
                xyz: [x, y, z],
                rgb: [r, g, b],
            })
            .collect(),
    })
}

fn image_strategy() -> impl Strategy<Value = Image> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        prop::collection::vec(0.0f64..=1.0, w * h * 3)
            .prop_map(move |px| Image::new(h, w, px).unwrap())
    })
}

fn map_pair(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (
        prop::collection::vec(0.0f64..1.0, n),
        prop::collection::vec(0.0f64..1.0, n),
        prop::collection::vec(any::<bool>(), n),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pillarize_conserves_points(cloud in cloud_strategy(), cap in 1usize..6) {
        let grid = GridSpec::centered(0.5, 8, 8).unwrap();
        let pt = pillarize(&cloud, &grid, cap).unwrap();
        let s = pt.stats;
        prop_assert_eq!(s.kept + s.out_of_extent + s.over_cap, cloud.points.len());
        let held: usize = pt.pillars.iter().map(|p| p.features.len()).sum();
        prop_assert_eq!(held, s.kept);
        for p in &pt.pillars {
            prop_assert!(p.features.len() <= cap);
            for f in &p.features {
                prop_assert_eq!(grid.locate(f[0], f[1]), Some((p.row, p.col)));
            }
        }
    }

    #[test]
    fn embedding_is_bounded(img in image_strategy()) {
        let e = embed_image(&img);
        prop_assert_eq!(e.values().len(), EMBEDDING_DIM);
        prop_assert!(e.values().iter().all(|v| v.is_finite()));
        prop_assert!(e.norm() <= 1.0 + 1e-9);
    }

    #[test]
    fn predictions_lie_strictly_inside_the_unit_interval(
        cloud in cloud_strategy(),
        img in image_strategy(),
        seed in 0u64..1000,
    ) {
        let params = ModelParams::init(&toy(), seed);
        let grid = GridSpec::centered(0.25, 16, 16).unwrap();
        let pred = forward(&params, &cloud, &img, &grid).unwrap();
        prop_assert!(pred.values.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn huber_ignores_invalid_cells((p, t, valid) in map_pair(36), bump in -5.0f64..5.0) {
        prop_assume!(valid.iter().any(|&v| v));
        let grid = GridSpec::centered(1.0, 6, 6).unwrap();
        let target = DenseCostmap::with_mask(grid, t, valid.clone()).unwrap();
        let pred = DenseCostmap::from_values(grid, p.clone()).unwrap();
        let mut moved = p;
        for (v, ok) in moved.iter_mut().zip(&valid) {
            if !ok {
                *v += bump;
            }
        }
        let moved = DenseCostmap::from_values(grid, moved).unwrap();
        prop_assert_eq!(huber_loss(&pred, &target, 0.1).unwrap(), huber_loss(&moved, &target, 0.1).unwrap());
    }

    #[test]
    fn normalization_preserves_order(values in prop::collection::vec(0.0f64..100.0, 2..40)) {
        let grid = GridSpec::centered(1.0, 1, values.len()).unwrap();
        let n = normalize_labels(&[DenseCostmap::from_values(grid, values.clone()).unwrap()]).unwrap();
        let out = &n.maps[0].values;
        for i in 0..values.len() {
            prop_assert!((0.0..=1.0).contains(&out[i]));
            for j in 0..values.len() {
                if values[i] < values[j] {
                    prop_assert!(out[i] < out[j]);
                }
            }
        }
    }

    #[test]
    fn metrics_are_symmetric_and_vanish_on_equality((p, t, valid) in map_pair(25)) {
        prop_assume!(valid.iter().any(|&v| v));
        let grid = GridSpec::centered(1.0, 5, 5).unwrap();
        let a = DenseCostmap::with_mask(grid, p, valid.clone()).unwrap();
        let b = DenseCostmap::with_mask(grid, t, valid).unwrap();
        prop_assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
        prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
        prop_assert_eq!(mae(&a, &a).unwrap(), 0.0);
        let m = mae(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&m) && mse(&a, &b).unwrap() >= 0.0);
    }

    #[test]
    fn ablations_never_touch_the_target(
        cloud in cloud_strategy(),
        img in image_strategy(),
        (t, _, valid) in map_pair(64),
        mode in 0usize..6,
        seed in any::<u64>(),
    ) {
        let grid = GridSpec::centered(0.5, 8, 8).unwrap();
        let sample = Sample { cloud, image: img, target: DenseCostmap::with_mask(grid, t, valid).unwrap() };
        let spec = AblationSpec::new(AblationMode::ALL[mode], seed);
        let out = apply_ablation(&sample, &spec);
        prop_assert_eq!(&out.target, &sample.target);
        prop_assert_eq!(&out, &apply_ablation(&sample, &spec));
        prop_assert!(out.image.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn constant_acceleration_without_rotation_costs_its_magnitude(
        a in (-5.0f64..5.0, -5.0f64..5.0, -5.0f64..12.0),
        steps in prop::collection::vec((0.0f64..0.05, -0.05f64..0.05), 1..12),
        w1 in 0.1f64..3.0,
    ) {
        let accel = Vector3::new(a.0, a.1, a.2);
        let mut p = Vector3::zeros();
        let samples: Vec<CellSample> = steps
            .iter()
            .map(|&(dx, dy)| {
                p += Vector3::new(dx, dy, 0.0);
                CellSample { position: p, accel, gyro: Vector3::zeros() }
            })
            .collect();
        let cfg = LabelingConfig { w1, ..LabelingConfig::default() };
        let tc = cell_cost(&samples, &cfg).unwrap();
        prop_assert!((tc - w1 * accel.norm()).abs() <= 1e-12 * (1.0 + tc));
    }
}
