use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bev::{
    embed_image, pillar_encode_backward, pillar_encode_traced, pillarize, EmbeddingVector,
    FilmCoefficients, FilmParams, PillarTensor, PillarTrace, DEFAULT_MAX_POINTS, EMBEDDING_DIM,
    POINT_FEATURES,
};
use crate::error::{arg, Result};
use crate::grid::{DenseCostmap, GridSpec};
use crate::sim::{Image, PointCloud};
use crate::tensor::{
    apply_film_grad, conv2d_backward, conv2d_forward, relu, relu_backward, sigmoid, Affine, Conv2d,
    FeatureMap, Resampler, Tensor,
};

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Pillar feature channels.
    pub channels: usize,
    /// Channels of the half-resolution stage.
    pub stage3_channels: usize,
    /// Channels of the quarter-resolution stage.
    pub stage4_channels: usize,
    pub film_hidden: usize,
    pub head_channels: usize,
    pub max_points: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            stage3_channels: 16,
            stage4_channels: 16,
            film_hidden: 32,
            head_channels: 64,
            max_points: DEFAULT_MAX_POINTS,
        }
    }
}

/// Every trainable tensor of the costmap regressor.
///
/// Pillar encoder → two stride-2 3x3 conv stages → FiLM on both stages →
/// upsample the coarser stage and concatenate → 3x3 conv + ReLU → 1x1 conv
/// → sigmoid → bilinear upsample to the BEV grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub pillar: Affine,
    pub stage3: Conv2d,
    pub stage4: Conv2d,
    pub film3: FilmParams,
    pub film4: FilmParams,
    pub head: Conv2d,
    pub output: Conv2d,
    pub max_points: usize,
}

pub const TENSOR_NAMES: [&str; 18] = [
    "pillar.weight",
    "pillar.bias",
    "stage3.weight",
    "stage3.bias",
    "stage4.weight",
    "stage4.bias",
    "film3.hidden.weight",
    "film3.hidden.bias",
    "film3.out.weight",
    "film3.out.bias",
    "film4.hidden.weight",
    "film4.hidden.bias",
    "film4.out.weight",
    "film4.out.bias",
    "head.weight",
    "head.bias",
    "output.weight",
    "output.bias",
];

impl ModelParams {
    /// Seeded initialization, uniform in `±1/sqrt(fan_in)`. FiLM output
    /// biases start at `gamma = 1`, `beta = 0`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let film = |channels: usize, rng: &mut ChaCha8Rng| {
            let mut f = FilmParams {
                hidden: Affine::init(EMBEDDING_DIM, cfg.film_hidden, rng),
                out: Affine::init(cfg.film_hidden, 2 * channels, rng),
            };
            for (i, b) in f.out.bias.data.iter_mut().enumerate() {
                *b = if i < channels { 1.0 } else { 0.0 };
            }
            f
        };
        let pillar = Affine::init(POINT_FEATURES, cfg.channels, &mut rng);
        let stage3 = Conv2d::init(cfg.channels, cfg.stage3_channels, 3, &mut rng);
        let stage4 = Conv2d::init(cfg.stage3_channels, cfg.stage4_channels, 3, &mut rng);
        let film3 = film(cfg.stage3_channels, &mut rng);
        let film4 = film(cfg.stage4_channels, &mut rng);
        let head = Conv2d::init(
            cfg.stage3_channels + cfg.stage4_channels,
            cfg.head_channels,
            3,
            &mut rng,
        );
        let output = Conv2d::init(cfg.head_channels, 1, 1, &mut rng);
        Self {
            pillar,
            stage3,
            stage4,
            film3,
            film4,
            head,
            output,
            max_points: cfg.max_points,
        }
    }

    /// All-zero tensors of the given architecture.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let film = |c: usize| FilmParams {
            hidden: Affine::zeros(EMBEDDING_DIM, cfg.film_hidden),
            out: Affine::zeros(cfg.film_hidden, 2 * c),
        };
        Self {
            pillar: Affine::zeros(POINT_FEATURES, cfg.channels),
            stage3: Conv2d::zeros(cfg.channels, cfg.stage3_channels, 3),
            stage4: Conv2d::zeros(cfg.stage3_channels, cfg.stage4_channels, 3),
            film3: film(cfg.stage3_channels),
            film4: film(cfg.stage4_channels),
            head: Conv2d::zeros(
                cfg.stage3_channels + cfg.stage4_channels,
                cfg.head_channels,
                3,
            ),
            output: Conv2d::zeros(cfg.head_channels, 1, 1),
            max_points: cfg.max_points,
        }
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            channels: self.pillar.outputs(),
            stage3_channels: self.stage3.outputs(),
            stage4_channels: self.stage4.outputs(),
            film_hidden: self.film3.hidden.outputs(),
            head_channels: self.head.outputs(),
            max_points: self.max_points,
        }
    }

    /// Same architecture, all zeros; the shape of a gradient.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config())
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 18] {
        let t = [
            &self.pillar.weight,
            &self.pillar.bias,
            &self.stage3.weight,
            &self.stage3.bias,
            &self.stage4.weight,
            &self.stage4.bias,
            &self.film3.hidden.weight,
            &self.film3.hidden.bias,
            &self.film3.out.weight,
            &self.film3.out.bias,
            &self.film4.hidden.weight,
            &self.film4.hidden.bias,
            &self.film4.out.weight,
            &self.film4.out.bias,
            &self.head.weight,
            &self.head.bias,
            &self.output.weight,
            &self.output.bias,
        ];
        std::array::from_fn(|i| (TENSOR_NAMES[i], t[i]))
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 18] {
        let mut t = [
            Some(&mut self.pillar.weight),
            Some(&mut self.pillar.bias),
            Some(&mut self.stage3.weight),
            Some(&mut self.stage3.bias),
            Some(&mut self.stage4.weight),
            Some(&mut self.stage4.bias),
            Some(&mut self.film3.hidden.weight),
            Some(&mut self.film3.hidden.bias),
            Some(&mut self.film3.out.weight),
            Some(&mut self.film3.out.bias),
            Some(&mut self.film4.hidden.weight),
            Some(&mut self.film4.hidden.bias),
            Some(&mut self.film4.out.weight),
            Some(&mut self.film4.out.bias),
            Some(&mut self.head.weight),
            Some(&mut self.head.bias),
            Some(&mut self.output.weight),
            Some(&mut self.output.bias),
        ];
        std::array::from_fn(|i| {
            (
                TENSOR_NAMES[i],
                t[i].take().expect("each tensor taken once"),
            )
        })
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Adds `other` elementwise.
    pub fn add_assign(&mut self, other: &ModelParams) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for (_, t) in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= k);
        }
    }

    /// Checks that every tensor agrees with the architecture its shapes imply.
    pub fn check(&self) -> Result<()> {
        self.pillar.check()?;
        for c in [&self.stage3, &self.stage4, &self.head, &self.output] {
            c.check()?;
        }
        self.film3.check()?;
        self.film4.check()?;
        let cfg = self.config();
        let expect = Self::zeros(&cfg);
        for ((name, a), (_, b)) in self.tensors().into_iter().zip(expect.tensors()) {
            if a.shape != b.shape {
                return arg(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    a.shape, b.shape
                ));
            }
        }
        if self.film3.hidden.inputs() != EMBEDDING_DIM
            || self.film4.hidden.outputs() != cfg.film_hidden
        {
            return arg("FiLM heads disagree with the embedding size");
        }
        if self.max_points == 0 {
            return arg("max points per pillar must be at least 1");
        }
        Ok(())
    }
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub grid: GridSpec,
    pillars: PillarTensor,
    pillar_trace: PillarTrace,
    pseudo: FeatureMap,
    s3: FeatureMap,
    s4: FeatureMap,
    film: Option<(EmbeddingVector, FilmCoefficients, FilmCoefficients)>,
    up4: Resampler,
    fused: FeatureMap,
    hidden: FeatureMap,
    coarse: FeatureMap,
    upsample: Resampler,
    pub prediction: DenseCostmap,
}

const STRIDE: usize = 2;
const PAD: usize = 1;

/// Runs the network; `image = None` bypasses the image branch, leaving both
/// FiLM stages as identities.
pub fn forward_traced(
    params: &ModelParams,
    cloud: &PointCloud,
    image: Option<&Image>,
    grid: &GridSpec,
) -> Result<ForwardTrace> {
    params.check()?;
    grid.validate()?;
    let pillars = pillarize(cloud, grid, params.max_points)?;
    let (bev, pillar_trace) = pillar_encode_traced(&pillars, &params.pillar, grid)?;
    let pseudo = bev.features;
    let s3 = relu(&conv2d_forward(&params.stage3, &pseudo, STRIDE, PAD));
    let s4 = relu(&conv2d_forward(&params.stage4, &s3, STRIDE, PAD));

    let film = match image {
        Some(img) => {
            let emb = embed_image(img);
            let k3 = params.film3.coefficients(&emb)?;
            let k4 = params.film4.coefficients(&emb)?;
            Some((emb, k3, k4))
        }
        None => None,
    };
    let (m3, m4) = match &film {
        Some((_, k3, k4)) => (
            crate::bev::apply_film(&s3, &k3.gamma, &k3.beta),
            crate::bev::apply_film(&s4, &k4.gamma, &k4.beta),
        ),
        None => (s3.clone(), s4.clone()),
    };
    let up4 = Resampler::new(s4.rows, s4.cols, s3.rows, s3.cols);
    let fused = m3.concat(&up4.forward(&m4));
    let hidden = relu(&conv2d_forward(&params.head, &fused, 1, PAD));
    let logits = conv2d_forward(&params.output, &hidden, 1, 0);
    let coarse = FeatureMap {
        data: logits.data.iter().map(|&v| sigmoid(v)).collect(),
        ..logits
    };
    let upsample = Resampler::new(coarse.rows, coarse.cols, grid.rows, grid.cols);
    let full = upsample.forward(&coarse);
    let prediction = DenseCostmap::from_values(*grid, full.data)?;
    Ok(ForwardTrace {
        grid: *grid,
        pillars,
        pillar_trace,
        pseudo,
        s3,
        s4,
        film,
        up4,
        fused,
        hidden,
        coarse,
        upsample,
        prediction,
    })
}

/// Dense costmap prediction over `grid`; every cell is valid and in (0, 1).
pub fn forward(
    params: &ModelParams,
    cloud: &PointCloud,
    image: &Image,
    grid: &GridSpec,
) -> Result<DenseCostmap> {
    Ok(forward_traced(params, cloud, Some(image), grid)?.prediction)
}

/// Prediction with the image branch removed.
pub fn forward_without_image(
    params: &ModelParams,
    cloud: &PointCloud,
    grid: &GridSpec,
) -> Result<DenseCostmap> {
    Ok(forward_traced(params, cloud, None, grid)?.prediction)
}

/// Reverse pass: accumulates `dL/dparams` into `grad` given `dL/dprediction`.
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    d_pred: &[f64],
    grad: &mut ModelParams,
) {
    let g = trace.grid;
    let d_full = FeatureMap {
        channels: 1,
        rows: g.rows,
        cols: g.cols,
        data: d_pred.to_vec(),
    };
    let d_sig = trace.upsample.backward(&d_full);
    let d_logit = FeatureMap {
        data: d_sig
            .data
            .iter()
            .zip(&trace.coarse.data)
            .map(|(d, s)| d * s * (1.0 - s))
            .collect(),
        ..d_sig
    };
    let d_hidden = conv2d_backward(
        &params.output,
        &trace.hidden,
        &d_logit,
        1,
        0,
        &mut grad.output,
    );
    let d_hidden_pre = relu_backward(&trace.hidden, &d_hidden);
    let d_fused = conv2d_backward(
        &params.head,
        &trace.fused,
        &d_hidden_pre,
        1,
        PAD,
        &mut grad.head,
    );
    let (d_m3, d_up4) = d_fused.split(trace.s3.channels);
    let d_m4 = trace.up4.backward(&d_up4);

    let (mut d_s3, d_s4) = match &trace.film {
        Some((emb, k3, k4)) => {
            let (d_s3, dg3, db3) = apply_film_grad(&trace.s3, &k3.gamma, &d_m3);
            let (d_s4, dg4, db4) = apply_film_grad(&trace.s4, &k4.gamma, &d_m4);
            params.film3.backward(emb, k3, &dg3, &db3, &mut grad.film3);
            params.film4.backward(emb, k4, &dg4, &db4, &mut grad.film4);
            (d_s3, d_s4)
        }
        None => (d_m3, d_m4),
    };
    let d_s4_pre = relu_backward(&trace.s4, &d_s4);
    let d_s3_from4 = conv2d_backward(
        &params.stage4,
        &trace.s3,
        &d_s4_pre,
        STRIDE,
        PAD,
        &mut grad.stage4,
    );
    d_s3.data
        .iter_mut()
        .zip(&d_s3_from4.data)
        .for_each(|(a, b)| *a += b);
    let d_s3_pre = relu_backward(&trace.s3, &d_s3);
    let d_pseudo = conv2d_backward(
        &params.stage3,
        &trace.pseudo,
        &d_s3_pre,
        STRIDE,
        PAD,
        &mut grad.stage3,
    );
    pillar_encode_backward(
        &trace.pillars,
        &trace.pillar_trace,
        &d_pseudo,
        &mut grad.pillar,
    );
}
