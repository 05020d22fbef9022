use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use marscost::dataset::{
    build_samples, holdout_split, label_runs, read_run, simulate_all, write_run, SimRun,
};
use marscost::eval::{
    evaluate, export_costmap, import_costmap, predict, run_ablation_suite, AblationMode,
    ExportFormat, MetricsReport,
};
use marscost::net::{fit_from, history_csv, load_checkpoint, save_checkpoint, ModelParams, Sample};
use marscost::raster::{encode_pgm_binary, write_atomic, Graymap};
use marscost::sim::{sidecar_path, Heightfield, HeightmapMeta};

use crate::config::{Layout, RunConfig};

/// Bad configuration, bad usage or a missing prerequisite; exits with 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

pub struct Context {
    pub cfg: RunConfig,
    pub seed: u64,
    pub layout: Layout,
}

impl Context {
    pub fn load(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Self> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => return usage(format!("cannot read config {}: {e}", path.display())),
        };
        let cfg = match RunConfig::parse(&text) {
            Ok(c) => c,
            Err(e) => return usage(format!("invalid config {}: {e}", path.display())),
        };
        let base = out
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let layout = Layout::new(&base, &cfg.paths);
        Ok(Self {
            seed: seed.unwrap_or(cfg.seed),
            cfg,
            layout,
        })
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        usage(format!(
            "missing {what}: {} (run the earlier pipeline step first)",
            path.display()
        ))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_heightmap(path: &Path, hf: &Heightfield) -> Result<()> {
    let (lo, hi) = hf
        .elevations
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &h| {
            (a.min(h), b.max(h))
        });
    let span = hi - lo;
    let pixels = hf
        .elevations
        .iter()
        .map(|&h| {
            if span > 0.0 {
                ((h - lo) / span * 65535.0).round() as u32
            } else {
                0
            }
        })
        .collect();
    let map = Graymap {
        width: hf.cols,
        height: hf.rows,
        maxval: 65535,
        pixels,
    };
    write_file(path, &encode_pgm_binary(&map))?;
    let meta = HeightmapMeta {
        min_height_m: lo,
        max_height_m: hi,
        cell_size_m: Some(hf.cell_size),
    };
    write_file(&sidecar_path(path), &serde_json::to_vec_pretty(&meta)?)
}

pub fn simulate(ctx: &Context) -> Result<()> {
    let (hf, runs) = simulate_all(&ctx.cfg.sim, ctx.seed)?;
    fs::create_dir_all(&ctx.layout.dataset)
        .with_context(|| format!("creating {}", ctx.layout.dataset.display()))?;
    write_heightmap(&ctx.layout.dataset.join("terrain.pgm"), &hf)?;
    for (k, run) in runs.iter().enumerate() {
        let dir = ctx.layout.run_dir(k);
        write_run(&dir, run).with_context(|| format!("writing {}", dir.display()))?;
        println!(
            "run {k}: {} poses, {} imu samples, {} keyframes -> {}",
            run.trajectory.len(),
            run.imu.len(),
            run.keyframes.len(),
            dir.display()
        );
    }
    Ok(())
}

fn load_runs(ctx: &Context) -> Result<Vec<SimRun>> {
    let n = ctx.cfg.sim.runs.len();
    (0..n)
        .map(|k| {
            let dir = ctx.layout.run_dir(k);
            require(&dir.join("trajectory.csv"), "simulated run")?;
            read_run(&dir).with_context(|| format!("reading {}", dir.display()))
        })
        .collect()
}

pub fn label(ctx: &Context) -> Result<()> {
    let runs = load_runs(ctx)?;
    let labels = label_runs(&runs, &ctx.cfg.labeling)?;
    for (k, (run, dense)) in labels.runs.iter().zip(&labels.normalized).enumerate() {
        let dir = ctx.layout.label_dir(k);
        write_file(&dir.join("sparse.csv"), run.sparse.to_csv().as_bytes())?;
        let path = dir.join("dense.pgm");
        export_costmap(dense, &path, ExportFormat::Pgm)
            .with_context(|| format!("writing {}", path.display()))?;
        println!(
            "run {k}: {} labeled cells, {}x{} dense map ({} valid) -> {}",
            run.sparse.entries.len(),
            dense.grid.rows,
            dense.grid.cols,
            dense.valid_count(),
            dir.display()
        );
    }
    let norm = serde_json::json!({ "min": labels.min, "max": labels.max, "degenerate": labels.degenerate });
    write_file(
        &ctx.layout.labels.join("normalization.json"),
        serde_json::to_string_pretty(&norm)?.as_bytes(),
    )?;
    if labels.degenerate {
        println!(
            "warning: every label had the same raw cost {}; normalized labels are all zero",
            labels.min
        );
    }
    println!("raw cost range [{}, {}]", labels.min, labels.max);
    Ok(())
}

/// Train and held-out samples, split by the global seed.
fn load_samples(ctx: &Context) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let runs = load_runs(ctx)?;
    let labels = (0..runs.len())
        .map(|k| {
            let path = ctx.layout.label_dir(k).join("dense.pgm");
            require(&path, "label map")?;
            import_costmap(&path, ExportFormat::Pgm)
                .with_context(|| format!("reading {}", path.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let samples = build_samples(&runs, &labels, &ctx.cfg.bev.grid()?)?;
    if samples.is_empty() {
        anyhow::bail!("no keyframe has a labeled BEV cell");
    }
    let (train, test) = holdout_split(samples.len(), ctx.cfg.eval.test_fraction, ctx.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    Ok((pick(&train), pick(&test)))
}

pub fn train(ctx: &Context) -> Result<()> {
    let (train, test) = load_samples(ctx)?;
    let tc = ctx.cfg.train_config();
    tc.validate()?;
    println!(
        "training on {} samples ({} held out)",
        train.len(),
        test.len()
    );
    let init = ModelParams::init(&ctx.cfg.model, ctx.seed);
    println!("model parameters: {}", init.num_params());
    let (params, history) = fit_from(init, &train, &tc, |step, r| {
        if step == 1 || step % 50 == 0 {
            println!(
                "step {step:>5}  huber {:.6}  smooth {:.6}  total {:.6}",
                r.huber, r.smooth, r.total
            );
        }
    })?;
    let ckpt = &ctx.layout.checkpoint;
    if let Some(dir) = ckpt.parent() {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(&params, ckpt).with_context(|| format!("writing {}", ckpt.display()))?;
    write_file(&ctx.layout.train_log(), history_csv(&history).as_bytes())?;
    println!("{} steps; checkpoint -> {}", history.len(), ckpt.display());
    Ok(())
}

fn load_model_and_test(ctx: &Context) -> Result<(ModelParams, Vec<Sample>)> {
    require(&ctx.layout.checkpoint, "checkpoint")?;
    let params = load_checkpoint(&ctx.layout.checkpoint)
        .with_context(|| format!("reading {}", ctx.layout.checkpoint.display()))?;
    let (train, test) = load_samples(ctx)?;
    // with no held-out share configured, score the training samples
    Ok((params, if test.is_empty() { train } else { test }))
}

fn write_report(ctx: &Context, name: &str, report: &MetricsReport) -> Result<()> {
    print!("{}", report.to_table());
    let path = ctx.layout.reports.join(name);
    write_file(&path, report.to_csv().as_bytes())?;
    println!("report -> {}", path.display());
    Ok(())
}

pub fn eval(ctx: &Context) -> Result<()> {
    let (params, test) = load_model_and_test(ctx)?;
    let row = evaluate(&params, &test)?;
    write_report(ctx, "metrics.csv", &MetricsReport { rows: vec![row] })
}

pub fn ablate(ctx: &Context) -> Result<()> {
    let (params, test) = load_model_and_test(ctx)?;
    let report = run_ablation_suite(&params, &test, &ctx.cfg.eval.specs(ctx.seed))?;
    write_report(ctx, "ablation.csv", &report)
}

pub fn export(ctx: &Context) -> Result<()> {
    let (params, test) = load_model_and_test(ctx)?;
    let format = ctx.cfg.eval.export_format;
    let ext = match format {
        ExportFormat::Pgm => "pgm",
        ExportFormat::Csv => "csv",
    };
    let dir = ctx.layout.reports.join("predictions");
    fs::create_dir_all(&dir)?;
    for (i, s) in test.iter().enumerate() {
        let pred = predict(&params, s, AblationMode::Baseline)?;
        export_costmap(&pred, &dir.join(format!("pred_{i}.{ext}")), format)?;
        export_costmap(&s.target, &dir.join(format!("target_{i}.{ext}")), format)?;
    }
    println!(
        "{} prediction/target pairs -> {}",
        test.len(),
        dir.display()
    );
    Ok(())
}
