use std::ops::Range;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::{inverse_softplus, sigmoid, softplus, Activation};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv1d {
        filters: usize,
        width: usize,
        stride: usize,
        activation: Activation,
    },
    Lstm {
        units: usize,
    },
    Dense {
        units: usize,
        activation: Activation,
    },
    /// Dense layer with a factorized Gaussian posterior over kernel and bias.
    VariationalDense {
        units: usize,
        activation: Activation,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Seq { len: usize, channels: usize },
    Flat(usize),
}

impl Shape {
    fn size(self) -> usize {
        match self {
            Shape::Seq { len, channels } => len * channels,
            Shape::Flat(n) => n,
        }
    }
}

#[derive(Debug, Clone)]
struct Layer {
    spec: LayerSpec,
    offset: usize,
    input: Shape,
    output: Shape,
}

impl Layer {
    fn num_params(&self) -> usize {
        match (&self.spec, self.input) {
            (LayerSpec::Conv1d { filters, width, .. }, Shape::Seq { channels, .. }) => {
                width * channels * filters + filters
            }
            (LayerSpec::Lstm { units }, Shape::Seq { channels, .. }) => (channels + units) * 4 * units + 4 * units,
            (LayerSpec::Dense { units, .. } | LayerSpec::VariationalDense { units, .. }, input) => {
                input.size() * units + units
            }
            _ => unreachable!("shapes validated at construction"),
        }
    }
}

/// Per-sample activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    /// `acts[i]` is the input of layer `i`; the last entry is the output.
    acts: Vec<Vec<f64>>,
    lstm: Option<LstmCache>,
}

impl Cache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("cache holds at least the input")
    }
}

#[derive(Debug, Clone)]
struct LstmCache {
    /// `T x 4H` post-activation gates in `i, f, g, o` order.
    gates: Vec<f64>,
    /// `(T + 1) x H`, row 0 is the zero initial state.
    cells: Vec<f64>,
    hidden: Vec<f64>,
}

/// Layout of the variational block inside the parameter store.
#[derive(Debug, Clone)]
struct VariationalBlock {
    /// Means, inside the twin layout.
    means: Range<usize>,
    /// Softplus-parameterised standard deviations, after the twin layout.
    rhos: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct Network {
    input_len: usize,
    input_channels: usize,
    layers: Vec<Layer>,
    twin_len: usize,
    variational: Option<VariationalBlock>,
}

impl Network {
    pub fn new(input_len: usize, input_channels: usize, specs: &[LayerSpec]) -> Result<Self> {
        if input_len == 0 || input_channels == 0 {
            return Err(Error::InvalidParameter("empty network input".into()));
        }
        if specs.is_empty() {
            return Err(Error::InvalidParameter("network has no layers".into()));
        }
        let mut shape = Shape::Seq {
            len: input_len,
            channels: input_channels,
        };
        let mut offset = 0;
        let mut layers = Vec::with_capacity(specs.len());
        let mut variational = None;
        for (i, spec) in specs.iter().enumerate() {
            let output = match (spec, shape) {
                (
                    LayerSpec::Conv1d {
                        filters,
                        width,
                        stride,
                        ..
                    },
                    Shape::Seq { len, .. },
                ) => {
                    if *filters == 0 || *width == 0 || *stride == 0 {
                        return Err(Error::InvalidParameter(format!("layer {i}: zero-sized convolution")));
                    }
                    if *width > len {
                        return Err(Error::InvalidParameter(format!(
                            "layer {i}: kernel width {width} exceeds sequence length {len}"
                        )));
                    }
                    Shape::Seq {
                        len: (len - width) / stride + 1,
                        channels: *filters,
                    }
                }
                (LayerSpec::Conv1d { .. }, Shape::Flat(_)) => {
                    return Err(Error::InvalidParameter(format!(
                        "layer {i}: convolution after a flat layer"
                    )))
                }
                (LayerSpec::Lstm { units }, Shape::Seq { .. }) => {
                    if *units == 0 {
                        return Err(Error::InvalidParameter(format!("layer {i}: zero LSTM units")));
                    }
                    Shape::Flat(*units)
                }
                (LayerSpec::Lstm { .. }, Shape::Flat(_)) => {
                    return Err(Error::InvalidParameter(format!("layer {i}: LSTM after a flat layer")))
                }
                (LayerSpec::Dense { units, .. } | LayerSpec::VariationalDense { units, .. }, _) => {
                    if *units == 0 {
                        return Err(Error::InvalidParameter(format!("layer {i}: zero dense units")));
                    }
                    Shape::Flat(*units)
                }
            };
            let layer = Layer {
                spec: spec.clone(),
                offset,
                input: shape,
                output,
            };
            let n = layer.num_params();
            if matches!(spec, LayerSpec::VariationalDense { .. }) {
                if variational.is_some() {
                    return Err(Error::InvalidParameter("at most one variational layer".into()));
                }
                variational = Some(offset..offset + n);
            }
            offset += n;
            shape = output;
            layers.push(layer);
        }
        let twin_len = offset;
        let variational = variational.map(|means| VariationalBlock {
            rhos: twin_len..twin_len + means.len(),
            means,
        });
        Ok(Self {
            input_len,
            input_channels,
            layers,
            twin_len,
            variational,
        })
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(|l| l.output.size()).unwrap_or(0)
    }

    /// Length of the full parameter store.
    pub fn num_params(&self) -> usize {
        self.twin_len + self.variational.as_ref().map_or(0, |v| v.rhos.len())
    }

    /// Length of a realized (deterministic) parameter vector.
    pub fn twin_len(&self) -> usize {
        self.twin_len
    }

    pub fn is_variational(&self) -> bool {
        self.variational.is_some()
    }

    pub fn num_variational_weights(&self) -> usize {
        self.variational.as_ref().map_or(0, |v| v.means.len())
    }

    /// Glorot-uniform kernels, orthogonal recurrent kernels, zero biases
    /// (LSTM forget gate bias 1), posterior std `posterior_std`.
    pub fn init<R: Rng>(&self, rng: &mut R, posterior_std: f64) -> Vec<f64> {
        let mut p = vec![0.0; self.num_params()];
        for layer in &self.layers {
            let o = layer.offset;
            match (&layer.spec, layer.input) {
                (LayerSpec::Conv1d { filters, width, .. }, Shape::Seq { channels, .. }) => {
                    let n = width * channels * filters;
                    glorot(rng, &mut p[o..o + n], width * channels, width * filters);
                }
                (LayerSpec::Lstm { units }, Shape::Seq { channels, .. }) => {
                    let h = *units;
                    let wx = channels * 4 * h;
                    glorot(rng, &mut p[o..o + wx], channels, 4 * h);
                    orthogonal(rng, &mut p[o + wx..o + wx + h * 4 * h], h);
                    let b = o + wx + h * 4 * h;
                    p[b + h..b + 2 * h].iter_mut().for_each(|x| *x = 1.0);
                }
                (LayerSpec::Dense { units, .. } | LayerSpec::VariationalDense { units, .. }, input) => {
                    let n = input.size() * units;
                    glorot(rng, &mut p[o..o + n], input.size(), *units);
                }
                _ => unreachable!(),
            }
        }
        if let Some(v) = &self.variational {
            let rho = inverse_softplus(posterior_std.max(1e-300));
            p[v.rhos.clone()].iter_mut().for_each(|x| *x = rho);
        }
        p
    }

    /// Standard-normal noise for one draw of the variational weights.
    pub fn sample_noise<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.num_variational_weights())
            .map(|_| StandardNormal.sample(rng))
            .collect()
    }

    /// Deterministic twin parameters: `mean + std * noise` for the
    /// variational block, or the means when `noise` is `None`.
    pub fn realize(&self, store: &[f64], noise: Option<&[f64]>) -> Vec<f64> {
        let mut twin = store[..self.twin_len].to_vec();
        if let (Some(v), Some(eps)) = (&self.variational, noise) {
            for ((w, rho), e) in twin[v.means.clone()].iter_mut().zip(&store[v.rhos.clone()]).zip(eps) {
                *w += softplus(*rho) * e;
            }
        }
        twin
    }

    /// Maps a gradient w.r.t. realized parameters back onto the store.
    pub fn fold_gradient(&self, store: &[f64], noise: Option<&[f64]>, twin_grad: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; self.num_params()];
        grad[..self.twin_len].copy_from_slice(twin_grad);
        if let (Some(v), Some(eps)) = (&self.variational, noise) {
            let g_means = &twin_grad[v.means.clone()];
            for (((g, rho), e), gm) in grad[v.rhos.clone()]
                .iter_mut()
                .zip(&store[v.rhos.clone()])
                .zip(eps)
                .zip(g_means)
            {
                *g = gm * e * sigmoid(*rho);
            }
        }
        grad
    }

    /// Posterior `(means, stds)` of the variational block.
    pub fn posterior<'a>(&self, store: &'a [f64]) -> Option<(&'a [f64], Vec<f64>)> {
        self.variational.as_ref().map(|v| {
            (
                &store[v.means.clone()],
                store[v.rhos.clone()].iter().map(|&r| softplus(r)).collect(),
            )
        })
    }

    /// Adds `scale * dKL/dparam` (KL against N(0, 1)) to `grad`.
    pub fn add_kl_gradient(&self, store: &[f64], scale: f64, grad: &mut [f64]) {
        let Some(v) = &self.variational else { return };
        for (g, mu) in grad[v.means.clone()].iter_mut().zip(&store[v.means.clone()]) {
            *g += scale * mu;
        }
        for (g, rho) in grad[v.rhos.clone()].iter_mut().zip(&store[v.rhos.clone()]) {
            let s = softplus(*rho);
            *g += scale * (s - 1.0 / s) * sigmoid(*rho);
        }
    }

    pub fn forward(&self, twin: &[f64], input: &[f64]) -> Cache {
        debug_assert_eq!(input.len(), self.input_len * self.input_channels);
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        let mut lstm = None;
        for layer in &self.layers {
            let x = acts.last().unwrap();
            let out = match (&layer.spec, layer.input, layer.output) {
                (
                    LayerSpec::Conv1d {
                        width,
                        stride,
                        activation,
                        ..
                    },
                    Shape::Seq { channels, .. },
                    Shape::Seq { len: out_len, channels: filters },
                ) => conv_forward(
                    &twin[layer.offset..],
                    x,
                    channels,
                    filters,
                    *width,
                    *stride,
                    out_len,
                    *activation,
                ),
                (LayerSpec::Lstm { units }, Shape::Seq { len, channels }, _) => {
                    let cache = lstm_forward(&twin[layer.offset..], x, len, channels, *units);
                    let h = cache.hidden[len * units..].to_vec();
                    lstm = Some(cache);
                    h
                }
                (
                    LayerSpec::Dense { units, activation } | LayerSpec::VariationalDense { units, activation },
                    input,
                    _,
                ) => dense_forward(&twin[layer.offset..], x, input.size(), *units, *activation),
                _ => unreachable!(),
            };
            acts.push(out);
        }
        Cache { acts, lstm }
    }

    /// Accumulates `d loss / d twin` into `grad` given `d loss / d output`.
    pub fn backward(&self, twin: &[f64], cache: &Cache, d_out: &[f64], grad: &mut [f64]) {
        let mut delta = d_out.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.acts[i];
            let y = &cache.acts[i + 1];
            let need_dx = i > 0;
            let (w, g) = (&twin[layer.offset..], &mut grad[layer.offset..]);
            delta = match (&layer.spec, layer.input, layer.output) {
                (
                    LayerSpec::Conv1d {
                        width,
                        stride,
                        activation,
                        ..
                    },
                    Shape::Seq { channels, .. },
                    Shape::Seq { len: out_len, channels: filters },
                ) => conv_backward(
                    w, g, x, y, &delta, channels, filters, *width, *stride, out_len, *activation, need_dx,
                ),
                (LayerSpec::Lstm { units }, Shape::Seq { len, channels }, _) => lstm_backward(
                    w,
                    g,
                    x,
                    cache.lstm.as_ref().expect("lstm cache"),
                    &delta,
                    len,
                    channels,
                    *units,
                    need_dx,
                ),
                (
                    LayerSpec::Dense { units, activation } | LayerSpec::VariationalDense { units, activation },
                    input,
                    _,
                ) => dense_backward(w, g, x, y, &delta, input.size(), *units, *activation, need_dx),
                _ => unreachable!(),
            };
        }
    }
}

/// KL divergence of `prod N(mean_i, std_i^2)` from `N(0, 1)`, summed.
pub fn gaussian_kl_to_standard(means: &[f64], stds: &[f64]) -> f64 {
    means
        .iter()
        .zip(stds)
        .map(|(m, s)| 0.5 * (s * s + m * m - 1.0) - s.ln())
        .sum()
}

fn glorot<R: Rng>(rng: &mut R, out: &mut [f64], fan_in: usize, fan_out: usize) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    out.iter_mut().for_each(|w| *w = dist.sample(rng));
}

/// Fills an `h x 4h` (row-major, input-major) recurrent kernel with
/// orthonormal rows.
fn orthogonal<R: Rng>(rng: &mut R, out: &mut [f64], h: usize) {
    let a = DMatrix::<f64>::from_fn(4 * h, h, |_, _| StandardNormal.sample(rng));
    let q = a.qr().q();
    for j in 0..h {
        for k in 0..4 * h {
            out[j * 4 * h + k] = q[(k, j)];
        }
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    w: &[f64],
    x: &[f64],
    channels: usize,
    filters: usize,
    width: usize,
    stride: usize,
    out_len: usize,
    act: Activation,
) -> Vec<f64> {
    let bias = &w[width * channels * filters..width * channels * filters + filters];
    let mut out = vec![0.0; out_len * filters];
    for (t, o) in out.chunks_exact_mut(filters).enumerate() {
        o.copy_from_slice(bias);
        let base = t * stride;
        for k in 0..width {
            let row = &x[(base + k) * channels..(base + k + 1) * channels];
            for (c, &xv) in row.iter().enumerate() {
                let wr = &w[(k * channels + c) * filters..(k * channels + c + 1) * filters];
                axpy(o, xv, wr);
            }
        }
        o.iter_mut().for_each(|v| *v = act.apply(*v));
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    w: &[f64],
    g: &mut [f64],
    x: &[f64],
    y: &[f64],
    dy: &[f64],
    channels: usize,
    filters: usize,
    width: usize,
    stride: usize,
    out_len: usize,
    act: Activation,
    need_dx: bool,
) -> Vec<f64> {
    let n_kernel = width * channels * filters;
    let dz: Vec<f64> = dy
        .iter()
        .zip(y)
        .map(|(d, y)| d * act.derivative_from_output(*y))
        .collect();
    let mut dx = if need_dx { vec![0.0; x.len()] } else { Vec::new() };
    for t in 0..out_len {
        let dzt = &dz[t * filters..(t + 1) * filters];
        axpy(&mut g[n_kernel..n_kernel + filters], 1.0, dzt);
        let base = t * stride;
        for k in 0..width {
            for c in 0..channels {
                let xi = (base + k) * channels + c;
                let wi = (k * channels + c) * filters;
                axpy(&mut g[wi..wi + filters], x[xi], dzt);
                if need_dx {
                    dx[xi] += dot(&w[wi..wi + filters], dzt);
                }
            }
        }
    }
    dx
}

fn lstm_forward(w: &[f64], x: &[f64], len: usize, channels: usize, h: usize) -> LstmCache {
    let g4 = 4 * h;
    let wx = &w[..channels * g4];
    let wh = &w[channels * g4..(channels + h) * g4];
    let b = &w[(channels + h) * g4..(channels + h) * g4 + g4];
    let mut gates = vec![0.0; len * g4];
    let mut cells = vec![0.0; (len + 1) * h];
    let mut hidden = vec![0.0; (len + 1) * h];
    let mut z = vec![0.0; g4];
    for t in 0..len {
        z.copy_from_slice(b);
        for (j, &xv) in x[t * channels..(t + 1) * channels].iter().enumerate() {
            axpy(&mut z, xv, &wx[j * g4..(j + 1) * g4]);
        }
        for j in 0..h {
            let hv = hidden[t * h + j];
            axpy(&mut z, hv, &wh[j * g4..(j + 1) * g4]);
        }
        let gt = &mut gates[t * g4..(t + 1) * g4];
        for k in 0..h {
            gt[k] = sigmoid(z[k]);
            gt[h + k] = sigmoid(z[h + k]);
            gt[2 * h + k] = z[2 * h + k].tanh();
            gt[3 * h + k] = sigmoid(z[3 * h + k]);
        }
        for k in 0..h {
            let c = gt[h + k] * cells[t * h + k] + gt[k] * gt[2 * h + k];
            cells[(t + 1) * h + k] = c;
            hidden[(t + 1) * h + k] = gt[3 * h + k] * c.tanh();
        }
    }
    LstmCache { gates, cells, hidden }
}

#[allow(clippy::too_many_arguments)]
fn lstm_backward(
    w: &[f64],
    g: &mut [f64],
    x: &[f64],
    cache: &LstmCache,
    dh_last: &[f64],
    len: usize,
    channels: usize,
    h: usize,
    need_dx: bool,
) -> Vec<f64> {
    let g4 = 4 * h;
    let (gwx, rest) = g.split_at_mut(channels * g4);
    let (gwh, rest) = rest.split_at_mut(h * g4);
    let gb = &mut rest[..g4];
    let wx = &w[..channels * g4];
    let wh = &w[channels * g4..(channels + h) * g4];
    let mut dx = if need_dx { vec![0.0; x.len()] } else { Vec::new() };
    let mut dh = dh_last.to_vec();
    let mut dc = vec![0.0; h];
    let mut dz = vec![0.0; g4];
    for t in (0..len).rev() {
        let gt = &cache.gates[t * g4..(t + 1) * g4];
        let c_prev = &cache.cells[t * h..(t + 1) * h];
        let c_now = &cache.cells[(t + 1) * h..(t + 2) * h];
        for k in 0..h {
            let (i, f, gg, o) = (gt[k], gt[h + k], gt[2 * h + k], gt[3 * h + k]);
            let tc = c_now[k].tanh();
            let dck = dc[k] + dh[k] * o * (1.0 - tc * tc);
            dz[k] = dck * gg * i * (1.0 - i);
            dz[h + k] = dck * c_prev[k] * f * (1.0 - f);
            dz[2 * h + k] = dck * i * (1.0 - gg * gg);
            dz[3 * h + k] = dh[k] * tc * o * (1.0 - o);
            dc[k] = dck * f;
        }
        axpy(gb, 1.0, &dz);
        let xt = &x[t * channels..(t + 1) * channels];
        for (j, &xv) in xt.iter().enumerate() {
            axpy(&mut gwx[j * g4..(j + 1) * g4], xv, &dz);
            if need_dx {
                dx[t * channels + j] = dot(&wx[j * g4..(j + 1) * g4], &dz);
            }
        }
        let h_prev = &cache.hidden[t * h..(t + 1) * h];
        for j in 0..h {
            let row = j * g4..(j + 1) * g4;
            axpy(&mut gwh[row.clone()], h_prev[j], &dz);
            dh[j] = dot(&wh[row], &dz);
        }
    }
    dx
}

fn dense_forward(w: &[f64], x: &[f64], n_in: usize, n_out: usize, act: Activation) -> Vec<f64> {
    let mut out = w[n_in * n_out..n_in * n_out + n_out].to_vec();
    for (j, &xv) in x.iter().enumerate() {
        axpy(&mut out, xv, &w[j * n_out..(j + 1) * n_out]);
    }
    out.iter_mut().for_each(|v| *v = act.apply(*v));
    out
}

#[allow(clippy::too_many_arguments)]
fn dense_backward(
    w: &[f64],
    g: &mut [f64],
    x: &[f64],
    y: &[f64],
    dy: &[f64],
    n_in: usize,
    n_out: usize,
    act: Activation,
    need_dx: bool,
) -> Vec<f64> {
    let dz: Vec<f64> = dy
        .iter()
        .zip(y)
        .map(|(d, y)| d * act.derivative_from_output(*y))
        .collect();
    axpy(&mut g[n_in * n_out..n_in * n_out + n_out], 1.0, &dz);
    let mut dx = if need_dx { vec![0.0; n_in] } else { Vec::new() };
    for (j, &xv) in x.iter().enumerate() {
        axpy(&mut g[j * n_out..(j + 1) * n_out], xv, &dz);
        if need_dx {
            dx[j] = dot(&w[j * n_out..(j + 1) * n_out], &dz);
        }
    }
    dx
}
