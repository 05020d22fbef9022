use crate::error::{arg, Result};
use crate::grid::DenseCostmap;

/// Masked mean Huber loss over the target's valid cells, and its gradient
/// with respect to every prediction cell.
pub fn huber_with_grad(
    pred: &DenseCostmap,
    target: &DenseCostmap,
    delta: f64,
) -> Result<(f64, Vec<f64>)> {
    if pred.grid != target.grid {
        return arg("prediction and target grids differ");
    }
    if !(delta > 0.0) {
        return arg("huber delta must be positive");
    }
    let n = target.valid_count();
    if n == 0 {
        return arg("target has no valid cells");
    }
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; pred.values.len()];
    for (i, ((p, t), ok)) in pred
        .values
        .iter()
        .zip(&target.values)
        .zip(&target.valid)
        .enumerate()
    {
        if !*ok {
            continue;
        }
        let e = p - t;
        let (v, d) = huber_point(e, delta);
        total += v;
        grad[i] = d * scale;
    }
    Ok((total * scale, grad))
}

/// Huber value and derivative at residual `e`.
pub fn huber_point(e: f64, delta: f64) -> (f64, f64) {
    if e.abs() < delta {
        (0.5 * e * e, e)
    } else {
        (delta * (e.abs() - 0.5 * delta), delta * e.signum())
    }
}

pub fn huber_loss(pred: &DenseCostmap, target: &DenseCostmap, delta: f64) -> Result<f64> {
    Ok(huber_with_grad(pred, target, delta)?.0)
}

/// Anisotropic total variation of the full map, each direction normalized
/// by its number of neighbor pairs; a direction without pairs contributes 0.
pub fn smoothness_with_grad(pred: &DenseCostmap, lambda: f64) -> (f64, Vec<f64>) {
    let (h, w) = (pred.grid.rows, pred.grid.cols);
    let v = &pred.values;
    let mut grad = vec![0.0; v.len()];
    let mut total = 0.0;
    if h >= 2 {
        let norm = lambda / ((h - 1) * w) as f64;
        let mut sum = 0.0;
        for r in 0..h - 1 {
            for c in 0..w {
                let (a, b) = (r * w + c, (r + 1) * w + c);
                let d = v[b] - v[a];
                sum += d.abs();
                let s = sign(d) * norm;
                grad[b] += s;
                grad[a] -= s;
            }
        }
        total += sum * norm;
    }
    if w >= 2 {
        let norm = lambda / (h * (w - 1)) as f64;
        let mut sum = 0.0;
        for r in 0..h {
            for c in 0..w - 1 {
                let (a, b) = (r * w + c, r * w + c + 1);
                let d = v[b] - v[a];
                sum += d.abs();
                let s = sign(d) * norm;
                grad[b] += s;
                grad[a] -= s;
            }
        }
        total += sum * norm;
    }
    (total, grad)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn smoothness_loss(pred: &DenseCostmap, lambda: f64) -> f64 {
    smoothness_with_grad(pred, lambda).0
}
