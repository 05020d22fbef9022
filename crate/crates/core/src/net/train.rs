use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::grid::DenseCostmap;
use crate::sim::{Image, PointCloud};

use super::adam::{adam_step, AdamState};
use super::augment::{augment, AugmentConfig};
use super::loss::{huber_with_grad, smoothness_with_grad};
use super::model::{backward, forward_traced, ModelConfig, ModelParams};

/// One supervised example: sensor inputs and the label map on the BEV grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub cloud: PointCloud,
    pub image: Image,
    pub target: DenseCostmap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub huber_delta: f64,
    pub smooth_lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    /// When false the image branch is bypassed and FiLM stays an identity.
    pub use_image: bool,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 8,
            huber_delta: 0.1,
            smooth_lambda: 0.1,
            epochs: 10,
            seed: 0,
            max_steps: None,
            use_image: true,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr", self.lr),
            ("huber_delta", self.huber_delta),
            ("smooth_lambda", self.smooth_lambda),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return arg(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if self.batch_size == 0 {
            return arg("batch_size must be at least 1");
        }
        let a = &self.augment;
        if !(a.image_noise_sigma >= 0.0 && a.point_noise_sigma >= 0.0) {
            return arg("augmentation noise sigma must be non-negative");
        }
        Ok(())
    }
}

/// Loss terms, each averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub huber: f64,
    pub smooth: f64,
    pub total: f64,
}

fn sample_loss(
    params: &ModelParams,
    s: &Sample,
    cfg: &TrainConfig,
) -> Result<(LossReport, ModelParams)> {
    let image = cfg.use_image.then_some(&s.image);
    let trace = forward_traced(params, &s.cloud, image, &s.target.grid)?;
    let (huber, dh) = huber_with_grad(&trace.prediction, &s.target, cfg.huber_delta)?;
    let (smooth, ds) = smoothness_with_grad(&trace.prediction, cfg.smooth_lambda);
    let d_pred: Vec<f64> = dh.iter().zip(&ds).map(|(a, b)| a + b).collect();
    let mut grad = params.zeros_like();
    backward(params, &trace, &d_pred, &mut grad);
    Ok((
        LossReport {
            huber,
            smooth,
            total: huber + smooth,
        },
        grad,
    ))
}

/// Batch-mean loss and its exact gradient.
///
/// Samples are evaluated in parallel and reduced in batch order, so the
/// result does not depend on thread scheduling.
pub fn loss_and_grads(
    params: &ModelParams,
    batch: &[Sample],
    cfg: &TrainConfig,
) -> Result<(LossReport, ModelParams)> {
    if batch.is_empty() {
        return arg("loss over an empty batch");
    }
    let parts: Vec<_> = batch
        .par_iter()
        .map(|s| sample_loss(params, s, cfg))
        .collect::<Result<_>>()?;
    let mut report = LossReport::default();
    let mut grads = params.zeros_like();
    for (r, g) in &parts {
        report.huber += r.huber;
        report.smooth += r.smooth;
        grads.add_assign(g);
    }
    let k = 1.0 / batch.len() as f64;
    report.huber *= k;
    report.smooth *= k;
    report.total = report.huber + report.smooth;
    grads.scale(k);
    Ok((report, grads))
}

/// Trains a freshly initialized model (seeded by `cfg.seed`).
pub fn fit(
    dataset: &[Sample],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<LossReport>)> {
    fit_from(ModelParams::init(model, cfg.seed), dataset, cfg, |_, _| {})
}

/// Training loop starting from `params`; `on_step(step, report)` sees every
/// optimizer step as it happens.
pub fn fit_from(
    mut params: ModelParams,
    dataset: &[Sample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &LossReport),
) -> Result<(ModelParams, Vec<LossReport>)> {
    cfg.validate()?;
    params.check()?;
    if dataset.is_empty() {
        return arg("training dataset is empty");
    }
    let grid = dataset[0].target.grid;
    if let Some(i) = dataset.iter().position(|s| s.target.grid != grid) {
        return arg(format!(
            "sample {i} has a different target grid than sample 0"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut state = AdamState::new(&params);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| history.len() >= m) {
                break 'epochs;
            }
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| augment(&dataset[i], &cfg.augment, rng.random()))
                .collect();
            let (report, grads) = loss_and_grads(&params, &batch, cfg)?;
            adam_step(&mut params, &grads, &mut state, cfg.lr)?;
            history.push(report);
            on_step(history.len(), &report);
        }
    }
    Ok((params, history))
}

/// Training log with one row per optimizer step.
pub fn history_csv(history: &[LossReport]) -> String {
    let mut out = String::from("step,huber,smooth,total\n");
    for (i, r) in history.iter().enumerate() {
        out.push_str(&format!(
            "{},{:e},{:e},{:e}\n",
            i + 1,
            r.huber,
            r.smooth,
            r.total
        ));
    }
    out
}
