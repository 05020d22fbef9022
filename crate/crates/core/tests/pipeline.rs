use marscost::dataset::{
    build_samples, holdout_split, label_runs, read_run, simulate_all, write_run, RunSpec, SimConfig,
};
use marscost::eval::{evaluate, export_costmap, import_costmap, ExportFormat};
use marscost::labeling::LabelingConfig;
use marscost::net::{fit, forward, load_checkpoint, save_checkpoint, ModelConfig, TrainConfig};
use marscost::GridSpec;

fn sim() -> SimConfig {
    let mut cfg = SimConfig {
        runs: vec![
            RunSpec {
                waypoints: vec![[2.0, 2.0], [9.0, 3.0], [9.0, 9.0]],
            },
            RunSpec {
                waypoints: vec![[3.0, 9.0], [6.0, 2.5]],
            },
        ],
        ..SimConfig::default()
    };
    cfg.terrain.rows = 61;
    cfg.terrain.cols = 61;
    cfg.lidar.rays = 400;
    cfg.lidar.elevation_min_deg = -45.0;
    cfg.lidar.elevation_max_deg = 15.0;
    cfg.camera.width_px = 12;
    cfg.camera.height_px = 12;
    cfg
}

#[test]
fn runs_survive_a_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (_, runs) = simulate_all(&sim(), 3).unwrap();
    for (k, run) in runs.iter().enumerate() {
        let path = dir.path().join(format!("run_{k}"));
        write_run(&path, run).unwrap();
        let back = read_run(&path).unwrap();
        assert_eq!(back.trajectory, run.trajectory);
        assert_eq!(back.imu, run.imu);
        assert_eq!(back.keyframes.len(), run.keyframes.len());
        for (a, b) in back.keyframes.iter().zip(&run.keyframes) {
            assert_eq!(a.pose_index, b.pose_index);
            assert_eq!(a.cloud, b.cloud);
            for (x, y) in a.image.pixels.iter().zip(&b.image.pixels) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }
}

#[test]
fn simulate_label_train_evaluate() {
    let (_, runs) = simulate_all(&sim(), 4).unwrap();
    let labels = label_runs(&runs, &LabelingConfig::default()).unwrap();
    assert!(!labels.degenerate);
    for map in &labels.normalized {
        for (v, ok) in map.values.iter().zip(&map.valid) {
            assert!(!ok || (0.0..=1.0).contains(v));
        }
    }
    let bev = GridSpec::centered(0.25, 16, 16).unwrap();
    let samples = build_samples(&runs, &labels.normalized, &bev).unwrap();
    assert!(samples.len() >= 8, "{} samples", samples.len());
    let (train_idx, test_idx) = holdout_split(samples.len(), 0.25, 0);
    let train: Vec<_> = train_idx.iter().map(|&i| samples[i].clone()).collect();
    let test: Vec<_> = test_idx.iter().map(|&i| samples[i].clone()).collect();

    let model = ModelConfig {
        head_channels: 16,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let (params, history) = fit(&train, &model, &cfg).unwrap();
    assert_eq!(history.len(), 3 * train.len().div_ceil(4));
    assert!(history.iter().all(|r| r.total.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    save_checkpoint(&params, &ckpt).unwrap();
    let restored = load_checkpoint(&ckpt).unwrap();
    assert_eq!(restored, params);
    assert_eq!(
        evaluate(&restored, &test).unwrap(),
        evaluate(&params, &test).unwrap()
    );

    let s = &test[0];
    let pred = forward(&params, &s.cloud, &s.image, &s.target.grid).unwrap();
    let out = dir.path().join("pred.csv");
    export_costmap(&pred, &out, ExportFormat::Csv).unwrap();
    assert_eq!(import_costmap(&out, ExportFormat::Csv).unwrap(), pred);
}
