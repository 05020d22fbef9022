//! Dense f64 tensors and the handful of layer primitives the costmap network
//! needs, each with an explicit backward pass.

use rand::Rng;

use crate::error::{arg, Result};

/// Row-major tensor with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return arg(format!(
                "tensor of shape {shape:?} cannot hold {} values",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn fan_in_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Fully connected layer `y = W x + b` with `W` of shape `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Affine {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[outputs, inputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::fan_in_uniform(&[outputs, inputs], inputs, rng),
            bias: Tensor::fan_in_uniform(&[outputs], inputs, rng),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn check(&self) -> Result<()> {
        if self.weight.shape.len() != 2 || self.bias.shape != [self.weight.shape[0]] {
            return arg(format!(
                "inconsistent affine shapes {:?} / {:?}",
                self.weight.shape, self.bias.shape
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let n = self.inputs();
        self.weight
            .data
            .chunks_exact(n)
            .zip(&self.bias.data)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], grad_out: &[f64], grad: &mut Affine) -> Vec<f64> {
        let n = self.inputs();
        let mut grad_in = vec![0.0; n];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias.data[o] += g;
            let row = &self.weight.data[o * n..(o + 1) * n];
            let grow = &mut grad.weight.data[o * n..(o + 1) * n];
            for i in 0..n {
                grow[i] += g * x[i];
                grad_in[i] += g * row[i];
            }
        }
        grad_in
    }
}

/// Square-kernel 2D convolution with weight shape `[out, in, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv2d {
    pub fn zeros(inputs: usize, outputs: usize, kernel: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[outputs, inputs, kernel, kernel]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn init<R: Rng>(inputs: usize, outputs: usize, kernel: usize, rng: &mut R) -> Self {
        let fan_in = inputs * kernel * kernel;
        Self {
            weight: Tensor::fan_in_uniform(&[outputs, inputs, kernel, kernel], fan_in, rng),
            bias: Tensor::fan_in_uniform(&[outputs], fan_in, rng),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape[2]
    }

    pub fn check(&self) -> Result<()> {
        let s = &self.weight.shape;
        if s.len() != 4 || s[2] != s[3] || self.bias.shape != [s[0]] {
            return arg(format!(
                "inconsistent conv shapes {:?} / {:?}",
                s, self.bias.shape
            ));
        }
        Ok(())
    }
}

/// Channel-major feature map `[channels, rows, cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, rows: usize, cols: usize) -> Self {
        Self {
            channels,
            rows,
            cols,
            data: vec![0.0; channels * rows * cols],
        }
    }

    pub fn plane(&self) -> usize {
        self.rows * self.cols
    }

    pub fn at(&self, c: usize, r: usize, col: usize) -> f64 {
        self.data[(c * self.rows + r) * self.cols + col]
    }

    pub fn at_mut(&mut self, c: usize, r: usize, col: usize) -> &mut f64 {
        &mut self.data[(c * self.rows + r) * self.cols + col]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.plane()..(c + 1) * self.plane()]
    }

    /// Stacks `other`'s channels after this map's channels.
    pub fn concat(&self, other: &FeatureMap) -> FeatureMap {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        FeatureMap {
            channels: self.channels + other.channels,
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    /// Splits off the first `channels` channels.
    pub fn split(&self, channels: usize) -> (FeatureMap, FeatureMap) {
        let cut = channels * self.plane();
        (
            FeatureMap {
                channels,
                rows: self.rows,
                cols: self.cols,
                data: self.data[..cut].to_vec(),
            },
            FeatureMap {
                channels: self.channels - channels,
                rows: self.rows,
                cols: self.cols,
                data: self.data[cut..].to_vec(),
            },
        )
    }
}

/// Output size of a convolution along one axis.
pub fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

/// Unfolds `x` into a `[in * k * k, oh * ow]` row-major patch matrix.
fn im2col(x: &FeatureMap, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Vec<f64> {
    let p = oh * ow;
    let mut cols = vec![0.0; x.channels * k * k * p];
    for i in 0..x.channels {
        let xin = x.channel(i);
        for kr in 0..k {
            for kc in 0..k {
                let row = &mut cols[((i * k + kr) * k + kc) * p..][..p];
                for orow in 0..oh {
                    let r = (orow * stride + kr) as isize - pad as isize;
                    if r < 0 || r as usize >= x.rows {
                        continue;
                    }
                    let base = r as usize * x.cols;
                    for ocol in 0..ow {
                        let c = (ocol * stride + kc) as isize - pad as isize;
                        if c >= 0 && (c as usize) < x.cols {
                            row[orow * ow + ocol] = xin[base + c as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adds the patch-matrix gradient back onto the input positions it came from.
fn col2im(
    cols: &[f64],
    x: &mut FeatureMap,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let p = oh * ow;
    let (rows, width, plane) = (x.rows, x.cols, x.plane());
    for i in 0..x.channels {
        for kr in 0..k {
            for kc in 0..k {
                let row = &cols[((i * k + kr) * k + kc) * p..][..p];
                for orow in 0..oh {
                    let r = (orow * stride + kr) as isize - pad as isize;
                    if r < 0 || r as usize >= rows {
                        continue;
                    }
                    let base = i * plane + r as usize * width;
                    for ocol in 0..ow {
                        let c = (ocol * stride + kc) as isize - pad as isize;
                        if c >= 0 && (c as usize) < width {
                            x.data[base + c as usize] += row[orow * ow + ocol];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c = beta * c + a * b` with explicit strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides describe in-bounds views of `a` (m x k), `b` (k x n)
    // and `c` (m x n, row-major), and `c` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(conv: &Conv2d, x: &FeatureMap, stride: usize, pad: usize) -> FeatureMap {
    let k = conv.kernel();
    let (oh, ow) = (
        conv_out_size(x.rows, k, stride, pad),
        conv_out_size(x.cols, k, stride, pad),
    );
    let (p, q) = (oh * ow, conv.inputs() * k * k);
    let mut out = FeatureMap::zeros(conv.outputs(), oh, ow);
    for (o, chunk) in out.data.chunks_mut(p.max(1)).enumerate() {
        chunk.iter_mut().for_each(|v| *v = conv.bias.data[o]);
    }
    let cols = im2col(x, k, stride, pad, oh, ow);
    gemm(
        conv.outputs(),
        q,
        p,
        &conv.weight.data,
        (q, 1),
        &cols,
        (p, 1),
        1.0,
        &mut out.data,
    );
    out
}

/// Accumulates parameter gradients into `grad` and returns `dL/dx`.
pub fn conv2d_backward(
    conv: &Conv2d,
    x: &FeatureMap,
    grad_out: &FeatureMap,
    stride: usize,
    pad: usize,
    grad: &mut Conv2d,
) -> FeatureMap {
    let k = conv.kernel();
    let (oh, ow) = (grad_out.rows, grad_out.cols);
    let (p, q, no) = (oh * ow, conv.inputs() * k * k, conv.outputs());
    for o in 0..no {
        grad.bias.data[o] += grad_out.channel(o).iter().sum::<f64>();
    }
    let cols = im2col(x, k, stride, pad, oh, ow);
    // dW += dY * cols^T
    gemm(
        no,
        p,
        q,
        &grad_out.data,
        (p, 1),
        &cols,
        (1, p),
        1.0,
        &mut grad.weight.data,
    );
    // dcols = W^T * dY
    let mut dcols = vec![0.0; q * p];
    gemm(
        q,
        no,
        p,
        &conv.weight.data,
        (1, q),
        &grad_out.data,
        (p, 1),
        0.0,
        &mut dcols,
    );
    let mut grad_in = FeatureMap::zeros(x.channels, x.rows, x.cols);
    col2im(&dcols, &mut grad_in, k, stride, pad, oh, ow);
    grad_in
}

pub fn relu(x: &FeatureMap) -> FeatureMap {
    FeatureMap {
        data: x.data.iter().map(|v| v.max(0.0)).collect(),
        ..*x
    }
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(out: &FeatureMap, grad_out: &FeatureMap) -> FeatureMap {
    FeatureMap {
        data: out
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(y, g)| if *y > 0.0 { *g } else { 0.0 })
            .collect(),
        ..*grad_out
    }
}

/// Gradient of `gamma[c] * x + beta[c]`: returns `(dL/dx, dL/dgamma, dL/dbeta)`.
pub fn apply_film_grad(
    x: &FeatureMap,
    gamma: &[f64],
    grad_out: &FeatureMap,
) -> (FeatureMap, Vec<f64>, Vec<f64>) {
    let plane = x.plane();
    let mut d_gamma = vec![0.0; x.channels];
    let mut d_beta = vec![0.0; x.channels];
    let mut d_x = FeatureMap::zeros(x.channels, x.rows, x.cols);
    for c in 0..x.channels {
        for i in c * plane..(c + 1) * plane {
            let g = grad_out.data[i];
            d_gamma[c] += g * x.data[i];
            d_beta[c] += g;
            d_x.data[i] = g * gamma[c];
        }
    }
    (d_x, d_gamma, d_beta)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Bilinear resampling between two grid sizes with half-pixel centers
/// (the "align corners = false" convention); source coordinates are clamped
/// to the border.
#[derive(Debug, Clone, PartialEq)]
pub struct Resampler {
    pub in_rows: usize,
    pub in_cols: usize,
    pub out_rows: usize,
    pub out_cols: usize,
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl Resampler {
    pub fn new(in_rows: usize, in_cols: usize, out_rows: usize, out_cols: usize) -> Self {
        Self {
            in_rows,
            in_cols,
            out_rows,
            out_cols,
            rows: axis_taps(in_rows, out_rows),
            cols: axis_taps(in_cols, out_cols),
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let mut out = FeatureMap::zeros(x.channels, self.out_rows, self.out_cols);
        for c in 0..x.channels {
            let src = x.channel(c);
            for (orow, &(r0, r1, fr)) in self.rows.iter().enumerate() {
                for (ocol, &(c0, c1, fc)) in self.cols.iter().enumerate() {
                    let top = src[r0 * x.cols + c0] * (1.0 - fc) + src[r0 * x.cols + c1] * fc;
                    let bottom = src[r1 * x.cols + c0] * (1.0 - fc) + src[r1 * x.cols + c1] * fc;
                    *out.at_mut(c, orow, ocol) = top * (1.0 - fr) + bottom * fr;
                }
            }
        }
        out
    }

    pub fn backward(&self, grad_out: &FeatureMap) -> FeatureMap {
        let mut g = FeatureMap::zeros(grad_out.channels, self.in_rows, self.in_cols);
        let cols = self.in_cols;
        for c in 0..grad_out.channels {
            let base = c * self.in_rows * cols;
            for (orow, &(r0, r1, fr)) in self.rows.iter().enumerate() {
                for (ocol, &(c0, c1, fc)) in self.cols.iter().enumerate() {
                    let go = grad_out.at(c, orow, ocol);
                    g.data[base + r0 * cols + c0] += go * (1.0 - fr) * (1.0 - fc);
                    g.data[base + r0 * cols + c1] += go * (1.0 - fr) * fc;
                    g.data[base + r1 * cols + c0] += go * fr * (1.0 - fc);
                    g.data[base + r1 * cols + c1] += go * fr * fc;
                }
            }
        }
        g
    }
}
