//! Minimal layer library with hand-written backward passes.
//!
//! Activations are `[batch, channels, time]`. Every learnable tensor is a
//! 2-D [`Param`] carrying its own gradient accumulator. Layers do not cache
//! activations; the caller keeps whatever the backward pass needs.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

impl Param {
    pub fn new(value: Array2<f64>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        Self::new(Array2::from_shape_fn((rows, cols), |_| {
            rng.random_range(-bound..=bound)
        }))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

pub fn leaky_relu(x: &Array3<f64>, slope: f64) -> Array3<f64> {
    x.mapv(|v| if v > 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(x: &Array3<f64>, dy: &Array3<f64>, slope: f64) -> Array3<f64> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v <= 0.0 {
            *d *= slope;
        }
    });
    dx
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Unfolds `[c, t_in]` into `[c * kernel, t_out]` columns.
fn im2col(
    x: ArrayView2<f64>,
    kernel: usize,
    stride: usize,
    padding: usize,
    t_out: usize,
) -> Array2<f64> {
    let (c, t_in) = x.dim();
    let mut col = Array2::zeros((c * kernel, t_out));
    for ci in 0..c {
        for k in 0..kernel {
            let mut row = col.row_mut(ci * kernel + k);
            for t in 0..t_out {
                let src = (stride * t + k) as isize - padding as isize;
                if src >= 0 && (src as usize) < t_in {
                    row[t] = x[[ci, src as usize]];
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters columns back onto `[c, t_in]`.
fn col2im(
    col: ArrayView2<f64>,
    c: usize,
    t_in: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Array2<f64> {
    let t_out = col.ncols();
    let mut x = Array2::zeros((c, t_in));
    for ci in 0..c {
        for k in 0..kernel {
            let row = col.row(ci * kernel + k);
            for t in 0..t_out {
                let dst = (stride * t + k) as isize - padding as isize;
                if dst >= 0 && (dst as usize) < t_in {
                    x[[ci, dst as usize]] += row[t];
                }
            }
        }
    }
    x
}

fn add_channel_bias(y: &mut Array3<f64>, bias: &Array2<f64>) {
    for mut item in y.outer_iter_mut() {
        for (mut row, b) in item.outer_iter_mut().zip(bias.column(0)) {
            row += *b;
        }
    }
}

fn accumulate_bias_grad(bias: &mut Param, dy: &Array3<f64>) {
    let sums = dy.sum_axis(Axis(2)).sum_axis(Axis(0));
    bias.grad.column_mut(0).zip_mut_with(&sums, |g, s| *g += s);
}

/// 1-D convolution over time. Weight layout `[out, in * kernel]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: Param,
    pub bias: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((in_channels * kernel) as f64).sqrt();
        Self {
            weight: Param::uniform(out_channels, in_channels * kernel, bound, rng),
            bias: Param::uniform(out_channels, 1, bound, rng),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_len(&self, t_in: usize) -> usize {
        (t_in + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn columns(&self, x: ArrayView2<f64>) -> Array2<f64> {
        im2col(x, self.kernel, self.stride, self.padding, self.out_len(x.ncols()))
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (b, c, t) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let t_out = self.out_len(t);
        let mut y = Array3::zeros((b, self.out_channels, t_out));
        for (item, mut out) in x.outer_iter().zip(y.outer_iter_mut()) {
            out.assign(&self.weight.value.dot(&self.columns(item)));
        }
        add_channel_bias(&mut y, &self.bias.value);
        y
    }

    pub fn backward(&mut self, x: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
        let mut dx = Array3::zeros(x.raw_dim());
        for ((item, d_out), mut d_in) in x.outer_iter().zip(dy.outer_iter()).zip(dx.outer_iter_mut())
        {
            let col = self.columns(item);
            self.weight.grad += &d_out.dot(&col.t());
            let dcol = self.weight.value.t().dot(&d_out);
            d_in.assign(&col2im(
                dcol.view(),
                self.in_channels,
                item.ncols(),
                self.kernel,
                self.stride,
                self.padding,
            ));
        }
        accumulate_bias_grad(&mut self.bias, dy);
        dx
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

/// Transposed 1-D convolution. Weight layout `[in, out * kernel]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose1d {
    pub weight: Param,
    pub bias: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose1d {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((out_channels * kernel) as f64).sqrt();
        Self {
            weight: Param::uniform(in_channels, out_channels * kernel, bound, rng),
            bias: Param::uniform(out_channels, 1, bound, rng),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_len(&self, t_in: usize) -> usize {
        (t_in - 1) * self.stride + self.kernel - 2 * self.padding
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (b, c, t) = x.dim();
        assert_eq!(c, self.in_channels, "transposed conv input channels");
        let t_out = self.out_len(t);
        let mut y = Array3::zeros((b, self.out_channels, t_out));
        for (item, mut out) in x.outer_iter().zip(y.outer_iter_mut()) {
            let col = self.weight.value.t().dot(&item);
            out.assign(&col2im(
                col.view(),
                self.out_channels,
                t_out,
                self.kernel,
                self.stride,
                self.padding,
            ));
        }
        add_channel_bias(&mut y, &self.bias.value);
        y
    }

    pub fn backward(&mut self, x: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
        let mut dx = Array3::zeros(x.raw_dim());
        for ((item, d_out), mut d_in) in x.outer_iter().zip(dy.outer_iter()).zip(dx.outer_iter_mut())
        {
            let dcol = im2col(d_out, self.kernel, self.stride, self.padding, item.ncols());
            self.weight.grad += &item.dot(&dcol.t());
            d_in.assign(&self.weight.value.dot(&dcol));
        }
        accumulate_bias_grad(&mut self.bias, dy);
        dx
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

/// Per-channel batch normalization over the batch and time axes.
#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub gamma: Param,
    pub beta: Param,
    /// `[channels, 2]`: running mean and running variance.
    pub running: Array2<f64>,
    pub eps: f64,
    pub momentum: f64,
}

pub struct BatchNormCache {
    normalized: Array3<f64>,
    inv_std: Array1<f64>,
    /// Batch statistics; `None` in inference mode.
    batch_stats: Option<(Array1<f64>, Array1<f64>)>,
    count: usize,
}

impl BatchNorm1d {
    pub fn new(channels: usize, eps: f64) -> Self {
        let mut running = Array2::zeros((channels, 2));
        running.column_mut(1).fill(1.0);
        Self {
            gamma: Param::new(Array2::ones((channels, 1))),
            beta: Param::new(Array2::zeros((channels, 1))),
            running,
            eps,
            momentum: 0.1,
        }
    }

    /// Normalizes with batch statistics when `train`, running statistics
    /// otherwise. Running statistics are only changed by [`Self::update_running`].
    pub fn forward(&self, x: &Array3<f64>, train: bool) -> (Array3<f64>, BatchNormCache) {
        let (b, c, t) = x.dim();
        let n = (b * t) as f64;
        let (mean, var) = if train {
            let mean = x.sum_axis(Axis(2)).sum_axis(Axis(0)) / n;
            let mut var = Array1::zeros(c);
            for item in x.outer_iter() {
                for (ci, row) in item.outer_iter().enumerate() {
                    var[ci] += row.iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
                }
            }
            var /= n;
            (mean, var)
        } else {
            (
                self.running.column(0).to_owned(),
                self.running.column(1).to_owned(),
            )
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut normalized = x.clone();
        for mut item in normalized.outer_iter_mut() {
            for (ci, mut row) in item.outer_iter_mut().enumerate() {
                row.mapv_inplace(|v| (v - mean[ci]) * inv_std[ci]);
            }
        }
        let mut y = normalized.clone();
        for mut item in y.outer_iter_mut() {
            for (ci, mut row) in item.outer_iter_mut().enumerate() {
                let (g, bt) = (self.gamma.value[[ci, 0]], self.beta.value[[ci, 0]]);
                row.mapv_inplace(|v| g * v + bt);
            }
        }
        (
            y,
            BatchNormCache {
                normalized,
                inv_std,
                batch_stats: train.then_some((mean, var)),
                count: b * t,
            },
        )
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// estimates (unbiased variance).
    pub fn update_running(&mut self, cache: &BatchNormCache) {
        let Some((mean, var)) = &cache.batch_stats else {
            return;
        };
        let n = cache.count as f64;
        let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for ci in 0..mean.len() {
            self.running[[ci, 0]] =
                (1.0 - self.momentum) * self.running[[ci, 0]] + self.momentum * mean[ci];
            self.running[[ci, 1]] =
                (1.0 - self.momentum) * self.running[[ci, 1]] + self.momentum * var[ci] * unbiased;
        }
    }

    pub fn backward(&mut self, cache: &BatchNormCache, dy: &Array3<f64>) -> Array3<f64> {
        let (b, c, t) = dy.dim();
        let n = (b * t) as f64;
        let mut sum_dy = Array1::<f64>::zeros(c);
        let mut sum_dy_xhat = Array1::<f64>::zeros(c);
        for (d_item, x_item) in dy.outer_iter().zip(cache.normalized.outer_iter()) {
            for ci in 0..c {
                let (dr, xr) = (d_item.row(ci), x_item.row(ci));
                sum_dy[ci] += dr.sum();
                sum_dy_xhat[ci] += dr.dot(&xr);
            }
        }
        for ci in 0..c {
            self.gamma.grad[[ci, 0]] += sum_dy_xhat[ci];
            self.beta.grad[[ci, 0]] += sum_dy[ci];
        }
        let mut dx = Array3::zeros(dy.raw_dim());
        for ((d_item, x_item), mut out) in dy
            .outer_iter()
            .zip(cache.normalized.outer_iter())
            .zip(dx.outer_iter_mut())
        {
            for ci in 0..c {
                let g = self.gamma.value[[ci, 0]] * cache.inv_std[ci];
                let (dr, xr) = (d_item.row(ci), x_item.row(ci));
                let mut o = out.row_mut(ci);
                for k in 0..t {
                    o[k] = if cache.batch_stats.is_some() {
                        g * (dr[k] - sum_dy[ci] / n - xr[k] * sum_dy_xhat[ci] / n)
                    } else {
                        g * dr[k]
                    };
                }
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        vec![("gamma", &mut self.gamma), ("beta", &mut self.beta)]
    }
}

/// Single-layer unidirectional GRU, zero initial state. Gate order r, z, n.
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_ih: Param,
    pub w_hh: Param,
    pub b_ih: Param,
    pub b_hh: Param,
    pub input_size: usize,
    pub hidden: usize,
}

/// Per-step gate activations, each `[time, hidden, batch]`.
pub struct GruCache {
    gates_r: Array3<f64>,
    gates_z: Array3<f64>,
    gates_n: Array3<f64>,
    hidden_n: Array3<f64>,
    /// `[time + 1, hidden, batch]`, entry 0 is the zero initial state.
    states: Array3<f64>,
}

impl Gru {
    pub fn new<R: Rng>(input_size: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: Param::uniform(3 * hidden, input_size, bound, rng),
            w_hh: Param::uniform(3 * hidden, hidden, bound, rng),
            b_ih: Param::uniform(3 * hidden, 1, bound, rng),
            b_hh: Param::uniform(3 * hidden, 1, bound, rng),
            input_size,
            hidden,
        }
    }

    /// Returns the output sequence `[batch, hidden, time]`; the last time
    /// step is the final state.
    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, GruCache) {
        let (b, c, t) = x.dim();
        assert_eq!(c, self.input_size, "gru input size");
        let h = self.hidden;
        let mut projected = Array3::zeros((b, 3 * h, t));
        for (item, mut out) in x.outer_iter().zip(projected.outer_iter_mut()) {
            out.assign(&self.w_ih.value.dot(&item));
        }
        add_channel_bias(&mut projected, &self.b_ih.value);

        let mut cache = GruCache {
            gates_r: Array3::zeros((t, h, b)),
            gates_z: Array3::zeros((t, h, b)),
            gates_n: Array3::zeros((t, h, b)),
            hidden_n: Array3::zeros((t, h, b)),
            states: Array3::zeros((t + 1, h, b)),
        };
        let b_hh = self.b_hh.value.column(0);
        for step in 0..t {
            let prev = cache.states.index_axis(Axis(0), step).to_owned();
            let recurrent = self.w_hh.value.dot(&prev);
            let mut next = Array2::zeros((h, b));
            for j in 0..b {
                for i in 0..h {
                    let r = sigmoid(projected[[j, i, step]] + recurrent[[i, j]] + b_hh[i]);
                    let z = sigmoid(projected[[j, h + i, step]] + recurrent[[h + i, j]] + b_hh[h + i]);
                    let hn = recurrent[[2 * h + i, j]] + b_hh[2 * h + i];
                    let n = (projected[[j, 2 * h + i, step]] + r * hn).tanh();
                    next[[i, j]] = (1.0 - z) * n + z * prev[[i, j]];
                    cache.gates_r[[step, i, j]] = r;
                    cache.gates_z[[step, i, j]] = z;
                    cache.gates_n[[step, i, j]] = n;
                    cache.hidden_n[[step, i, j]] = hn;
                }
            }
            cache.states.index_axis_mut(Axis(0), step + 1).assign(&next);
        }
        let mut out = Array3::zeros((b, h, t));
        for step in 0..t {
            let state = cache.states.index_axis(Axis(0), step + 1);
            for j in 0..b {
                out.slice_mut(s![j, .., step]).assign(&state.column(j));
            }
        }
        (out, cache)
    }

    /// `d_out` is the gradient with respect to every output step.
    pub fn backward(&mut self, x: &Array3<f64>, cache: &GruCache, d_out: &Array3<f64>) -> Array3<f64> {
        let (b, _, t) = x.dim();
        let h = self.hidden;
        let mut d_projected = Array3::zeros((b, 3 * h, t));
        let mut dh = Array2::<f64>::zeros((h, b));
        for step in (0..t).rev() {
            for j in 0..b {
                for i in 0..h {
                    dh[[i, j]] += d_out[[j, i, step]];
                }
            }
            let prev = cache.states.index_axis(Axis(0), step);
            let mut d_rec = Array2::zeros((3 * h, b));
            let mut dh_prev = Array2::zeros((h, b));
            for j in 0..b {
                for i in 0..h {
                    let r = cache.gates_r[[step, i, j]];
                    let z = cache.gates_z[[step, i, j]];
                    let n = cache.gates_n[[step, i, j]];
                    let hn = cache.hidden_n[[step, i, j]];
                    let g = dh[[i, j]];
                    let dn_pre = g * (1.0 - z) * (1.0 - n * n);
                    let dz_pre = g * (prev[[i, j]] - n) * z * (1.0 - z);
                    let dr_pre = dn_pre * hn * r * (1.0 - r);
                    dh_prev[[i, j]] = g * z;
                    d_projected[[j, i, step]] = dr_pre;
                    d_projected[[j, h + i, step]] = dz_pre;
                    d_projected[[j, 2 * h + i, step]] = dn_pre;
                    d_rec[[i, j]] = dr_pre;
                    d_rec[[h + i, j]] = dz_pre;
                    d_rec[[2 * h + i, j]] = dn_pre * r;
                }
            }
            self.w_hh.grad += &d_rec.dot(&prev.t());
            self.b_hh
                .grad
                .column_mut(0)
                .zip_mut_with(&d_rec.sum_axis(Axis(1)), |g, v| *g += v);
            dh = dh_prev + self.w_hh.value.t().dot(&d_rec);
        }
        let mut dx = Array3::zeros(x.raw_dim());
        for ((item, d_proj), mut d_in) in x
            .outer_iter()
            .zip(d_projected.outer_iter())
            .zip(dx.outer_iter_mut())
        {
            self.w_ih.grad += &d_proj.dot(&item.t());
            d_in.assign(&self.w_ih.value.t().dot(&d_proj));
        }
        accumulate_bias_grad(&mut self.b_ih, &d_projected);
        dx
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        vec![
            ("w_ih", &mut self.w_ih),
            ("w_hh", &mut self.w_hh),
            ("b_ih", &mut self.b_ih),
            ("b_hh", &mut self.b_hh),
        ]
    }
}

/// Dense layer on row vectors: `[n, in] -> [n, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: Param::uniform(outputs, inputs, bound, rng),
            bias: Param::uniform(outputs, 1, bound, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.value.t()) + &self.bias.value.column(0)
    }

    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        self.weight.grad += &dy.t().dot(x);
        self.bias
            .grad
            .column_mut(0)
            .zip_mut_with(&dy.sum_axis(Axis(0)), |g, v| *g += v);
        dy.dot(&self.weight.value)
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer. Moment buffers are matched to parameters by
/// position, so callers must always pass parameters in the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Array2<f64>>,
    pub second: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn update(&mut self, params: &mut [&mut Param]) {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Array2::zeros(p.value.raw_dim())).collect();
            self.second = self.first.clone();
        }
        assert_eq!(self.first.len(), params.len(), "parameter list changed");
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *w -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}
