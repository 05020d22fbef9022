//! Bird's-eye-view encoding of colored point clouds, a fixed image
//! embedding, and FiLM conditioning of BEV features on that embedding.

use std::collections::HashMap;

use crate::error::{arg, Result};
use crate::grid::GridSpec;
use crate::sim::{Image, PointCloud};
use crate::tensor::{Affine, FeatureMap};

/// Per-point feature width: position, color, offset to the pillar centroid.
pub const POINT_FEATURES: usize = 9;
/// Image embedding dimension.
pub const EMBEDDING_DIM: usize = 384;
pub const DEFAULT_MAX_POINTS: usize = 32;

/// Points of one occupied BEV cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Pillar {
    pub row: usize,
    pub col: usize,
    /// `(x, y, z, r, g, b, dx, dy, dz)` per point, in input order.
    pub features: Vec<[f64; POINT_FEATURES]>,
}

/// Point accounting of a pillarization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PillarStats {
    pub kept: usize,
    pub out_of_extent: usize,
    pub over_cap: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PillarTensor {
    pub max_points: usize,
    /// Pillars in order of first occupancy.
    pub pillars: Vec<Pillar>,
    pub stats: PillarStats,
}

/// Groups points into vertical pillars over `grid`.
///
/// Points outside the grid are discarded; once a pillar holds `max_points`
/// points, later points falling into it are dropped. Offsets are taken
/// against the centroid of the kept points.
pub fn pillarize(cloud: &PointCloud, grid: &GridSpec, max_points: usize) -> Result<PillarTensor> {
    grid.validate()?;
    if max_points == 0 {
        return arg("max points per pillar must be at least 1");
    }
    let mut stats = PillarStats::default();
    let mut slots: HashMap<(usize, usize), usize> = HashMap::new();
    let mut members: Vec<(usize, usize, Vec<usize>)> = Vec::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let Some(cell) = grid.locate(p.xyz[0], p.xyz[1]) else {
            stats.out_of_extent += 1;
            continue;
        };
        let slot = *slots.entry(cell).or_insert_with(|| {
            members.push((cell.0, cell.1, Vec::new()));
            members.len() - 1
        });
        if members[slot].2.len() < max_points {
            members[slot].2.push(i);
            stats.kept += 1;
        } else {
            stats.over_cap += 1;
        }
    }
    let pillars = members
        .into_iter()
        .map(|(row, col, idx)| {
            let n = idx.len() as f64;
            let mut centroid = [0.0; 3];
            for &i in &idx {
                for k in 0..3 {
                    centroid[k] += cloud.points[i].xyz[k];
                }
            }
            centroid.iter_mut().for_each(|c| *c /= n);
            let features = idx
                .iter()
                .map(|&i| {
                    let p = &cloud.points[i];
                    [
                        p.xyz[0],
                        p.xyz[1],
                        p.xyz[2],
                        p.rgb[0],
                        p.rgb[1],
                        p.rgb[2],
                        p.xyz[0] - centroid[0],
                        p.xyz[1] - centroid[1],
                        p.xyz[2] - centroid[2],
                    ]
                })
                .collect();
            Pillar { row, col, features }
        })
        .collect();
    Ok(PillarTensor {
        max_points,
        pillars,
        stats,
    })
}

/// BEV pseudo-image on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeatureMap {
    pub grid: GridSpec,
    pub features: FeatureMap,
}

impl BevFeatureMap {
    pub fn channels(&self) -> usize {
        self.features.channels
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.features.at(channel, row, col)
    }
}

/// Which point won the max-pool for each `(pillar, channel)`; `None` where
/// the pooled response was clamped to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarTrace {
    pub winners: Vec<Option<usize>>,
}

/// Per-point affine map, ReLU, then channel-wise max over each pillar's
/// points, scattered into a `C x rows x cols` map. Empty cells stay zero.
pub fn pillar_encode(
    pt: &PillarTensor,
    weights: &Affine,
    grid: &GridSpec,
) -> Result<BevFeatureMap> {
    Ok(pillar_encode_traced(pt, weights, grid)?.0)
}

pub fn pillar_encode_traced(
    pt: &PillarTensor,
    weights: &Affine,
    grid: &GridSpec,
) -> Result<(BevFeatureMap, PillarTrace)> {
    weights.check()?;
    if weights.inputs() != POINT_FEATURES {
        return arg(format!(
            "pillar encoder expects {POINT_FEATURES} inputs, has {}",
            weights.inputs()
        ));
    }
    let c = weights.outputs();
    let mut features = FeatureMap::zeros(c, grid.rows, grid.cols);
    let mut winners = Vec::with_capacity(pt.pillars.len() * c);
    for pillar in &pt.pillars {
        if pillar.row >= grid.rows || pillar.col >= grid.cols {
            return arg("pillar lies outside the feature grid");
        }
        let mut best = vec![(0.0f64, None); c];
        for (k, f) in pillar.features.iter().enumerate() {
            for (ch, z) in weights.forward(f).into_iter().enumerate() {
                if z > best[ch].0 {
                    best[ch] = (z, Some(k));
                }
            }
        }
        for (ch, (v, w)) in best.into_iter().enumerate() {
            *features.at_mut(ch, pillar.row, pillar.col) = v;
            winners.push(w);
        }
    }
    Ok((
        BevFeatureMap {
            grid: *grid,
            features,
        },
        PillarTrace { winners },
    ))
}

/// Accumulates encoder gradients given `dL/d(pseudo-image)`.
pub fn pillar_encode_backward(
    pt: &PillarTensor,
    trace: &PillarTrace,
    grad_out: &FeatureMap,
    grad: &mut Affine,
) {
    let c = grad_out.channels;
    for (p, pillar) in pt.pillars.iter().enumerate() {
        for ch in 0..c {
            let Some(k) = trace.winners[p * c + ch] else {
                continue;
            };
            let g = grad_out.at(ch, pillar.row, pillar.col);
            if g == 0.0 {
                continue;
            }
            grad.bias.data[ch] += g;
            let f = &pillar.features[k];
            for (w, x) in grad.weight.data[ch * POINT_FEATURES..(ch + 1) * POINT_FEATURES]
                .iter_mut()
                .zip(f)
            {
                *w += g * x;
            }
        }
    }
}

/// Fixed-length image descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

const HIST_BINS: usize = 64;
const THUMB: usize = 8;

fn bin_of(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * HIST_BINS as f64) as usize).min(HIST_BINS - 1)
}

fn luminance(px: [f64; 3]) -> f64 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

/// Deterministic handcrafted stand-in for a learned image encoder.
///
/// Layout: three 64-bin color histograms, a 64-bin histogram of luminance
/// gradient magnitude, an 8x8 area-averaged luminance thumbnail, then zero
/// padding to 384. Histograms are fractions of the pixel count. The result
/// is L2-normalized unless it is all zero.
pub fn embed_image(img: &Image) -> EmbeddingVector {
    let (h, w) = (img.height, img.width);
    let n = (h * w) as f64;
    let mut v = vec![0.0; EMBEDDING_DIM];
    let lum: Vec<f64> = (0..h * w)
        .map(|i| luminance(img.pixel(i / w, i % w)))
        .collect();
    for r in 0..h {
        for c in 0..w {
            let px = img.pixel(r, c);
            for k in 0..3 {
                v[k * HIST_BINS + bin_of(px[k])] += 1.0 / n;
            }
            let l = |rr: usize, cc: usize| lum[rr * w + cc];
            let gx = (l(r, (c + 1).min(w - 1)) - l(r, c.saturating_sub(1))) / 2.0;
            let gy = (l((r + 1).min(h - 1), c) - l(r.saturating_sub(1), c)) / 2.0;
            v[3 * HIST_BINS + bin_of(gx.hypot(gy))] += 1.0 / n;
        }
    }
    let thumb = 4 * HIST_BINS;
    let span = |i: usize, len: usize| {
        let a = i * len / THUMB;
        let b = ((i + 1) * len / THUMB).max(a + 1).min(len);
        (a.min(len - 1), b)
    };
    for tr in 0..THUMB {
        let (r0, r1) = span(tr, h);
        for tc in 0..THUMB {
            let (c0, c1) = span(tc, w);
            let mut sum = 0.0;
            for r in r0..r1 {
                for c in c0..c1 {
                    sum += lum[r * w + c];
                }
            }
            v[thumb + tr * THUMB + tc] = sum / ((r1 - r0) * (c1 - c0)) as f64;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    EmbeddingVector(v)
}

/// Two-layer MLP mapping an embedding to per-channel `(gamma, beta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmParams {
    pub hidden: Affine,
    /// Produces `[gamma_0..gamma_C, beta_0..beta_C]`.
    pub out: Affine,
}

/// Intermediate values of a FiLM head, kept for backprop.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmCoefficients {
    pub hidden: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl FilmParams {
    /// Head that always emits `gamma = 1`, `beta = 0`.
    pub fn identity(embedding_dim: usize, hidden: usize, channels: usize) -> Self {
        let mut out = Affine::zeros(hidden, 2 * channels);
        out.bias.data[..channels].iter_mut().for_each(|g| *g = 1.0);
        Self {
            hidden: Affine::zeros(embedding_dim, hidden),
            out,
        }
    }

    pub fn channels(&self) -> usize {
        self.out.outputs() / 2
    }

    pub fn check(&self) -> Result<()> {
        self.hidden.check()?;
        self.out.check()?;
        if self.out.inputs() != self.hidden.outputs() || !self.out.outputs().is_multiple_of(2) {
            return arg("FiLM head layers are inconsistent");
        }
        Ok(())
    }

    pub fn coefficients(&self, emb: &EmbeddingVector) -> Result<FilmCoefficients> {
        self.check()?;
        if emb.0.len() != self.hidden.inputs() {
            return arg(format!(
                "FiLM head expects a {}-d embedding, got {}",
                self.hidden.inputs(),
                emb.0.len()
            ));
        }
        let hidden: Vec<f64> = self
            .hidden
            .forward(&emb.0)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let out = self.out.forward(&hidden);
        let c = self.channels();
        Ok(FilmCoefficients {
            hidden,
            gamma: out[..c].to_vec(),
            beta: out[c..].to_vec(),
        })
    }

    /// Accumulates head gradients from `dL/dgamma` and `dL/dbeta`.
    pub fn backward(
        &self,
        emb: &EmbeddingVector,
        coeffs: &FilmCoefficients,
        d_gamma: &[f64],
        d_beta: &[f64],
        grad: &mut FilmParams,
    ) {
        let mut d_out = d_gamma.to_vec();
        d_out.extend_from_slice(d_beta);
        let d_hidden = self.out.backward(&coeffs.hidden, &d_out, &mut grad.out);
        let d_pre: Vec<f64> = d_hidden
            .iter()
            .zip(&coeffs.hidden)
            .map(|(g, h)| if *h > 0.0 { *g } else { 0.0 })
            .collect();
        self.hidden.backward(&emb.0, &d_pre, &mut grad.hidden);
    }
}

/// `out[c, i, j] = gamma[c] * x[c, i, j] + beta[c]`.
pub fn apply_film(x: &FeatureMap, gamma: &[f64], beta: &[f64]) -> FeatureMap {
    let plane = x.plane();
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let c = i / plane;
            gamma[c] * v + beta[c]
        })
        .collect();
    FeatureMap { data, ..*x }
}

/// Channel-wise affine modulation of a BEV map conditioned on an embedding.
pub fn film_modulate(
    feat: &BevFeatureMap,
    emb: &EmbeddingVector,
    params: &FilmParams,
) -> Result<BevFeatureMap> {
    if params.channels() != feat.channels() {
        return arg(format!(
            "FiLM head emits {} channels, feature map has {}",
            params.channels(),
            feat.channels()
        ));
    }
    let k = params.coefficients(emb)?;
    Ok(BevFeatureMap {
        grid: feat.grid,
        features: apply_film(&feat.features, &k.gamma, &k.beta),
    })
}
