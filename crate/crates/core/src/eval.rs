//! Metrics, the ablation harness and costmap export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::grid::{DenseCostmap, GridSpec};
use crate::net::{forward, forward_without_image, ModelParams, Sample};
use crate::raster::{decode_pbm, decode_pgm, encode_pbm, encode_pgm_ascii, write_atomic, Graymap};
use crate::sim::sidecar_path;

fn error_sums(pred: &DenseCostmap, target: &DenseCostmap) -> Result<(f64, f64, usize)> {
    if pred.grid != target.grid {
        return arg("prediction and target grids differ");
    }
    let (mut abs, mut sq, mut n) = (0.0, 0.0, 0);
    for i in 0..target.values.len() {
        if target.valid[i] {
            let e = pred.values[i] - target.values[i];
            abs += e.abs();
            sq += e * e;
            n += 1;
        }
    }
    if n == 0 {
        return arg("target has no valid cells");
    }
    Ok((abs, sq, n))
}

/// Mean absolute error over the target's valid cells.
pub fn mae(pred: &DenseCostmap, target: &DenseCostmap) -> Result<f64> {
    let (abs, _, n) = error_sums(pred, target)?;
    Ok(abs / n as f64)
}

/// Mean squared error over the target's valid cells.
pub fn mse(pred: &DenseCostmap, target: &DenseCostmap) -> Result<f64> {
    let (_, sq, n) = error_sums(pred, target)?;
    Ok(sq / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Baseline,
    NoColorPointcloud,
    NoImageEncoder,
    OccludeImage,
    SparsePointcloud,
    GaussianNoise,
}

impl AblationMode {
    pub const ALL: [AblationMode; 6] = [
        Self::Baseline,
        Self::NoColorPointcloud,
        Self::NoImageEncoder,
        Self::OccludeImage,
        Self::SparsePointcloud,
        Self::GaussianNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::NoColorPointcloud => "no_color_pointcloud",
            Self::NoImageEncoder => "no_image_encoder",
            Self::OccludeImage => "occlude_image",
            Self::SparsePointcloud => "sparse_pointcloud",
            Self::GaussianNoise => "gaussian_noise",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }

    /// Whether predictions bypass the image branch.
    pub fn bypasses_image(self) -> bool {
        self == Self::NoImageEncoder
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    pub mode: AblationMode,
    pub occlusion_fraction: f64,
    pub drop_fraction: f64,
    pub image_noise_sigma: f64,
    /// Meters.
    pub point_noise_sigma: f64,
    pub seed: u64,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            mode: AblationMode::Baseline,
            occlusion_fraction: 0.3,
            drop_fraction: 0.3,
            image_noise_sigma: 0.02,
            point_noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl AblationSpec {
    pub fn new(mode: AblationMode, seed: u64) -> Self {
        Self {
            mode,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("occlusion_fraction", self.occlusion_fraction),
            ("drop_fraction", self.drop_fraction),
        ] {
            if !(0.0..1.0).contains(&f) {
                return arg(format!("{name} must lie in [0, 1), got {f}"));
            }
        }
        if !(self.image_noise_sigma >= 0.0 && self.point_noise_sigma >= 0.0) {
            return arg("noise sigma must be non-negative");
        }
        Ok(())
    }
}

/// Corrupts the inputs of `sample` as `spec.mode` prescribes; the target is
/// never touched. Randomness comes from `spec.seed` only.
///
/// `no_image_encoder` writes the mean image color into every point; the
/// matching prediction path ([`predict`]) also drops FiLM modulation.
pub fn apply_ablation(sample: &Sample, spec: &AblationSpec) -> Sample {
    let mut out = sample.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.mode {
        AblationMode::Baseline => {}
        AblationMode::NoColorPointcloud => {
            out.cloud.points.iter_mut().for_each(|p| p.rgb = [0.0; 3])
        }
        AblationMode::NoImageEncoder => {
            let n = (out.image.height * out.image.width) as f64;
            let mut mean = [0.0; 3];
            for px in out.image.pixels.chunks_exact(3) {
                (0..3).for_each(|c| mean[c] += px[c]);
            }
            mean.iter_mut().for_each(|m| *m /= n);
            out.cloud.points.iter_mut().for_each(|p| p.rgb = mean);
        }
        AblationMode::OccludeImage => {
            let (h, w) = (out.image.height, out.image.width);
            let (rh, rw) = occlusion_size(h, w, spec.occlusion_fraction, &mut rng);
            if rh > 0 && rw > 0 {
                let r0 = rng.random_range(0..=h - rh);
                let c0 = rng.random_range(0..=w - rw);
                for r in r0..r0 + rh {
                    out.image.pixels[3 * (r * w + c0)..3 * (r * w + c0 + rw)].fill(0.0);
                }
            }
        }
        AblationMode::SparsePointcloud => {
            let n = out.cloud.points.len();
            let keep = ((1.0 - spec.drop_fraction) * n as f64).round() as usize;
            let mut idx = index::sample(&mut rng, n, keep).into_vec();
            idx.sort_unstable();
            out.cloud.points = idx.into_iter().map(|i| sample.cloud.points[i]).collect();
        }
        AblationMode::GaussianNoise => {
            if spec.image_noise_sigma > 0.0 {
                let d = Normal::new(0.0, spec.image_noise_sigma).expect("validated sigma");
                out.image
                    .pixels
                    .iter_mut()
                    .for_each(|v| *v = (*v + d.sample(&mut rng)).clamp(0.0, 1.0));
            }
            if spec.point_noise_sigma > 0.0 {
                let d = Normal::new(0.0, spec.point_noise_sigma).expect("validated sigma");
                for p in &mut out.cloud.points {
                    p.xyz.iter_mut().for_each(|v| *v += d.sample(&mut rng));
                }
            }
        }
    }
    out
}

/// Rectangle whose area is as close as possible to `fraction` of the image.
fn occlusion_size(h: usize, w: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let area = (fraction * (h * w) as f64).round() as usize;
    if area == 0 {
        return (0, 0);
    }
    let min_h = area.div_ceil(w);
    let rh = rng.random_range(min_h..=h);
    let rw = ((area as f64 / rh as f64).round() as usize).clamp(1, w);
    (rh, rw)
}

/// Model output for one sample under `mode`.
pub fn predict(params: &ModelParams, sample: &Sample, mode: AblationMode) -> Result<DenseCostmap> {
    let grid = &sample.target.grid;
    if mode.bypasses_image() {
        forward_without_image(params, &sample.cloud, grid)
    } else {
        forward(params, &sample.cloud, &sample.image, grid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub mode: AblationMode,
    /// Pooled over every valid target cell of every sample.
    pub mae: f64,
    pub mse: f64,
    /// Number of samples.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn row(&self, mode: AblationMode) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,mae,mse,n\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.mode.name(), r.mae, r.mse, r.n);
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<22}{:>10}{:>10}{:>7}\n", "mode", "MAE", "MSE", "n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<22}{:>10.4}{:>10.4}{:>7}",
                r.mode.name(),
                r.mae,
                r.mse,
                r.n
            );
        }
        out
    }
}

fn sample_seed(base: u64, i: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(i as u64)
}

/// Evaluates one ablation over a dataset, pooling errors over valid cells.
pub fn evaluate_mode(
    params: &ModelParams,
    dataset: &[Sample],
    spec: &AblationSpec,
) -> Result<MetricsRow> {
    spec.validate()?;
    if dataset.is_empty() {
        return arg("evaluation dataset is empty");
    }
    let parts: Vec<(f64, f64, usize)> = dataset
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let per = AblationSpec {
                seed: sample_seed(spec.seed, i),
                ..*spec
            };
            let ablated = apply_ablation(s, &per);
            error_sums(&predict(params, &ablated, spec.mode)?, &ablated.target)
        })
        .collect::<Result<_>>()?;
    let (mut abs, mut sq, mut n) = (0.0, 0.0, 0);
    for (a, s, k) in parts {
        abs += a;
        sq += s;
        n += k;
    }
    Ok(MetricsRow {
        mode: spec.mode,
        mae: abs / n as f64,
        mse: sq / n as f64,
        n: dataset.len(),
    })
}

/// Plain evaluation without any corruption.
pub fn evaluate(params: &ModelParams, dataset: &[Sample]) -> Result<MetricsRow> {
    evaluate_mode(params, dataset, &AblationSpec::default())
}

/// One report row per spec, all from the same weights.
pub fn run_ablation_suite(
    params: &ModelParams,
    dataset: &[Sample],
    specs: &[AblationSpec],
) -> Result<MetricsReport> {
    let rows = specs
        .iter()
        .map(|s| evaluate_mode(params, dataset, s))
        .collect::<Result<_>>()?;
    Ok(MetricsReport { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Pgm,
    Csv,
}

/// Sidecar describing an exported costmap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostmapMeta {
    pub origin: [f64; 2],
    pub resolution: f64,
    pub rows: usize,
    pub cols: usize,
    /// Value mapped to raster level 0.
    pub min: f64,
    /// Value mapped to raster level 65535.
    pub max: f64,
    /// Validity mask file name, relative to the sidecar.
    pub mask: Option<String>,
}

const LEVELS: f64 = 65535.0;

fn mask_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("costmap");
    path.with_file_name(format!("{stem}.mask.pbm"))
}

/// Writes `map` plus a `.meta.json` sidecar.
///
/// PGM output is an ASCII 16-bit raster whose levels span the valid value
/// range, with a PBM validity mask next to it; raster row `i` is grid row
/// `i`. CSV output lists `i,j,value,valid` per cell with exact values.
pub fn export_costmap(map: &DenseCostmap, path: &Path, format: ExportFormat) -> Result<()> {
    let g = map.grid;
    let (min, max) = map.valid_range().unwrap_or((0.0, 0.0));
    let mut meta = CostmapMeta {
        origin: g.origin,
        resolution: g.resolution,
        rows: g.rows,
        cols: g.cols,
        min,
        max,
        mask: None,
    };
    match format {
        ExportFormat::Pgm => {
            let span = max - min;
            let pixels = map
                .values
                .iter()
                .zip(&map.valid)
                .map(|(&v, &ok)| {
                    if ok && span > 0.0 {
                        ((v - min) / span * LEVELS).round().clamp(0.0, LEVELS) as u32
                    } else {
                        0
                    }
                })
                .collect();
            let raster = Graymap {
                width: g.cols,
                height: g.rows,
                maxval: LEVELS as u32,
                pixels,
            };
            let mask = mask_path(path);
            write_atomic(&mask, &encode_pbm(g.cols, g.rows, &map.valid))?;
            meta.mask = mask.file_name().and_then(|n| n.to_str()).map(String::from);
            write_atomic(path, &encode_pgm_ascii(&raster))?;
        }
        ExportFormat::Csv => {
            let mut out = String::from("i,j,value,valid\n");
            for r in 0..g.rows {
                for c in 0..g.cols {
                    let _ = writeln!(
                        out,
                        "{r},{c},{},{}",
                        map.get(r, c),
                        u8::from(map.is_valid(r, c))
                    );
                }
            }
            write_atomic(path, out.as_bytes())?;
        }
    }
    let json = serde_json::to_vec_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&sidecar_path(path), &json)
}

/// Reads a costmap written by [`export_costmap`].
pub fn import_costmap(path: &Path, format: ExportFormat) -> Result<DenseCostmap> {
    let meta_path = sidecar_path(path);
    let meta: CostmapMeta = serde_json::from_slice(&std::fs::read(&meta_path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
    let grid = GridSpec::new(meta.origin, meta.resolution, meta.rows, meta.cols)?;
    match format {
        ExportFormat::Pgm => {
            let raster = decode_pgm(&std::fs::read(path)?)?;
            if (raster.height, raster.width) != (grid.rows, grid.cols) {
                return Err(Error::Format(
                    "raster size disagrees with its sidecar".into(),
                ));
            }
            let valid = match &meta.mask {
                Some(name) => {
                    let (w, h, bits) = decode_pbm(&std::fs::read(path.with_file_name(name))?)?;
                    if (h, w) != (grid.rows, grid.cols) {
                        return Err(Error::Format("mask size disagrees with its sidecar".into()));
                    }
                    bits
                }
                None => vec![true; grid.len()],
            };
            let scale = (meta.max - meta.min) / raster.maxval as f64;
            let values = raster
                .pixels
                .iter()
                .zip(&valid)
                .map(|(&p, &ok)| if ok { meta.min + p as f64 * scale } else { 0.0 })
                .collect();
            DenseCostmap::with_mask(grid, values, valid)
        }
        ExportFormat::Csv => {
            let text = std::fs::read_to_string(path)?;
            let mut map = DenseCostmap::empty(grid);
            let mut seen = vec![false; grid.len()];
            for (ln, line) in text
                .lines()
                .enumerate()
                .skip(1)
                .filter(|(_, l)| !l.trim().is_empty())
            {
                let bad = || Error::Format(format!("costmap csv: malformed row {}", ln + 1));
                let f: Vec<&str> = line.split(',').map(str::trim).collect();
                if f.len() != 4 {
                    return Err(bad());
                }
                let (r, c): (usize, usize) = (
                    f[0].parse().map_err(|_| bad())?,
                    f[1].parse().map_err(|_| bad())?,
                );
                if r >= grid.rows || c >= grid.cols {
                    return Err(bad());
                }
                let i = grid.index(r, c);
                map.values[i] = f[2].parse().map_err(|_| bad())?;
                map.valid[i] = match f[3] {
                    "1" => true,
                    "0" => false,
                    _ => return Err(bad()),
                };
                seen[i] = true;
            }
            if seen.iter().any(|s| !s) {
                return Err(Error::Format(
                    "costmap csv does not cover every cell".into(),
                ));
            }
            Ok(map)
        }
    }
}
