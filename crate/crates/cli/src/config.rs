use std::path::{Path, PathBuf};

use marscost::dataset::SimConfig;
use marscost::eval::{AblationMode, AblationSpec, ExportFormat};
use marscost::labeling::LabelingConfig;
use marscost::net::{ModelConfig, TrainConfig};
use marscost::GridSpec;
use serde::Deserialize;

/// Output locations, relative to the output base directory.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub labels: PathBuf,
    pub checkpoint: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "dataset".into(),
            labels: "labels".into(),
            checkpoint: "model/model.ckpt".into(),
            reports: "reports".into(),
        }
    }
}

/// Rover-centric BEV grid the model predicts on.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BevConfig {
    pub resolution: f64,
    pub rows: usize,
    pub cols: usize,
}

impl Default for BevConfig {
    fn default() -> Self {
        Self {
            resolution: 0.25,
            rows: 32,
            cols: 32,
        }
    }
}

impl BevConfig {
    pub fn grid(&self) -> marscost::Result<GridSpec> {
        GridSpec::centered(self.resolution, self.rows, self.cols)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Share of samples held out from training, taken from the end of the
    /// seeded sample order.
    pub test_fraction: f64,
    pub modes: Vec<AblationMode>,
    pub occlusion_fraction: f64,
    pub drop_fraction: f64,
    pub image_noise_sigma: f64,
    pub point_noise_sigma: f64,
    pub export_format: ExportFormat,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let d = AblationSpec::default();
        Self {
            test_fraction: 0.2,
            modes: AblationMode::ALL.to_vec(),
            occlusion_fraction: d.occlusion_fraction,
            drop_fraction: d.drop_fraction,
            image_noise_sigma: d.image_noise_sigma,
            point_noise_sigma: d.point_noise_sigma,
            export_format: ExportFormat::Pgm,
        }
    }
}

impl EvalConfig {
    pub fn specs(&self, seed: u64) -> Vec<AblationSpec> {
        self.modes
            .iter()
            .map(|&mode| AblationSpec {
                mode,
                occlusion_fraction: self.occlusion_fraction,
                drop_fraction: self.drop_fraction,
                image_noise_sigma: self.image_noise_sigma,
                point_noise_sigma: self.point_noise_sigma,
                seed,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub paths: Paths,
    pub sim: SimConfig,
    #[serde(default)]
    pub labeling: LabelingConfig,
    #[serde(default)]
    pub bev: BevConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), String> {
        self.labeling
            .validate()
            .map_err(|e| format!("[labeling] {e}"))?;
        self.train.validate().map_err(|e| format!("[train] {e}"))?;
        self.bev.grid().map_err(|e| format!("[bev] {e}"))?;
        for spec in self.eval.specs(0) {
            spec.validate().map_err(|e| format!("[eval] {e}"))?;
        }
        if !(0.0..1.0).contains(&self.eval.test_fraction) {
            return Err(format!(
                "[eval] test_fraction must lie in [0, 1), got {}",
                self.eval.test_fraction
            ));
        }
        if self.sim.runs.is_empty() {
            return Err(
                "[sim] at least one [[sim.runs]] entry with `waypoints` is required".into(),
            );
        }
        for (i, r) in self.sim.runs.iter().enumerate() {
            if r.waypoints.len() < 2 {
                return Err(format!(
                    "[sim] runs[{i}].waypoints needs at least two points"
                ));
            }
        }
        Ok(())
    }

    /// Seeds the training run from the global seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }
}

/// Resolves configured paths against the output base directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub dataset: PathBuf,
    pub labels: PathBuf,
    pub checkpoint: PathBuf,
    pub reports: PathBuf,
}

impl Layout {
    pub fn new(base: &Path, paths: &Paths) -> Self {
        Self {
            dataset: base.join(&paths.dataset),
            labels: base.join(&paths.labels),
            checkpoint: base.join(&paths.checkpoint),
            reports: base.join(&paths.reports),
        }
    }

    pub fn run_dir(&self, k: usize) -> PathBuf {
        self.dataset.join(format!("run_{k}"))
    }

    pub fn label_dir(&self, k: usize) -> PathBuf {
        self.labels.join(format!("run_{k}"))
    }

    pub fn train_log(&self) -> PathBuf {
        self.checkpoint.with_file_name("train_log.csv")
    }
}
