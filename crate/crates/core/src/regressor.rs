//! Small regressor `f(x_t; t, c)`: per-entry timestep embedding, a SiLU MLP
//! (flat or token-symmetric) and hand-written reverse-mode gradients.

use std::f64::consts::PI;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpolant::SampleBatch;
use crate::rng::RandomSource;
use crate::tensor::Tensor;

/// Timestep embedding widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedSpec {
    /// Number of sine/cosine frequency pairs.
    pub n_freq: usize,
    /// Embedded width per timestep entry.
    pub compressed_dim: usize,
}

impl Default for EmbedSpec {
    fn default() -> Self {
        Self {
            n_freq: 8,
            compressed_dim: 4,
        }
    }
}

impl EmbedSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_freq == 0 || self.compressed_dim == 0 {
            return Err(Error::InvalidConfig(
                "embedding needs n_freq >= 1 and compressed_dim >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.n_freq
    }
}

/// `[sin(π·2^k·t), cos(π·2^k·t)]` for `k < n_freq`, written into `out`.
///
/// The base frequency is π rather than 2π so that `t = 0` and `t = 1` get
/// different features; graded sampling feeds the model entries sitting at 1.
pub fn frequency_features_into(t: f64, n_freq: usize, out: &mut [f64]) {
    let mut w = PI;
    for k in 0..n_freq {
        let (s, c) = (w * t).sin_cos();
        out[2 * k] = s;
        out[2 * k + 1] = c;
        w *= 2.0;
    }
}

pub fn frequency_features(t: f64, n_freq: usize) -> Vec<f64> {
    let mut out = vec![0.0; 2 * n_freq];
    frequency_features_into(t, n_freq, &mut out);
    out
}

/// Network layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// One MLP over the whole record.
    Flat {
        data_dim: usize,
        hidden: Vec<usize>,
        n_classes: usize,
    },
    /// Shared per-token encoder, mean pooling, shared per-token decoder fed
    /// `[h_i, mean_j h_j]`. Equivariant to token permutations.
    TokenSet {
        parts: usize,
        token_width: usize,
        encoder: Vec<usize>,
        decoder: Vec<usize>,
        n_classes: usize,
    },
}

impl Architecture {
    pub fn n_classes(&self) -> usize {
        match self {
            Architecture::Flat { n_classes, .. } | Architecture::TokenSet { n_classes, .. } => {
                *n_classes
            }
        }
    }

    /// Shape of one record, without the batch axis.
    pub fn record_shape(&self) -> Vec<usize> {
        match self {
            Architecture::Flat { data_dim, .. } => vec![*data_dim],
            Architecture::TokenSet {
                parts, token_width, ..
            } => vec![*parts, *token_width],
        }
    }

    pub fn record_len(&self) -> usize {
        self.record_shape().iter().product()
    }
}

/// Architecture plus embedding widths; determines the parameter layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    #[serde(default)]
    pub embed: EmbedSpec,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.embed.validate()?;
        let positive = |v: &[usize]| v.iter().all(|&w| w > 0);
        match &self.architecture {
            Architecture::Flat {
                data_dim,
                hidden,
                n_classes,
            } => {
                if *data_dim == 0 || *n_classes == 0 || !positive(hidden) {
                    return Err(Error::InvalidConfig(
                        "flat model needs positive data_dim, n_classes and widths".into(),
                    ));
                }
            }
            Architecture::TokenSet {
                parts,
                token_width,
                encoder,
                decoder,
                n_classes,
            } => {
                if *parts == 0 || *token_width == 0 || *n_classes == 0 {
                    return Err(Error::InvalidConfig(
                        "token model needs positive parts, token_width and n_classes".into(),
                    ));
                }
                if encoder.is_empty() || !positive(encoder) || !positive(decoder) {
                    return Err(Error::InvalidConfig(
                        "token model needs at least one positive encoder layer".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let mut alloc = Alloc::default();
        let c = self.embed.compressed_dim;
        let embed = alloc.dense("embed", self.embed.feature_dim(), c);
        let mut mlps = Vec::new();
        match &self.architecture {
            Architecture::Flat {
                data_dim,
                hidden,
                n_classes,
            } => {
                let inp = data_dim * (1 + c) + n_classes;
                mlps.push(alloc.mlp("mlp", inp, hidden, *data_dim, false));
            }
            Architecture::TokenSet {
                token_width,
                encoder,
                decoder,
                n_classes,
                ..
            } => {
                let inp = token_width * (1 + c) + n_classes;
                let (last, rest) = encoder.split_last().expect("validated non-empty");
                mlps.push(alloc.mlp("encoder", inp, rest, *last, true));
                mlps.push(alloc.mlp("decoder", 2 * last, decoder, *token_width, false));
            }
        }
        Layout {
            embed,
            mlps,
            names: alloc.names,
            total: alloc.total,
        }
    }

    pub fn param_count(&self) -> Result<usize> {
        self.validate()?;
        Ok(self.layout().total)
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    inp: usize,
    out: usize,
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Mlp {
    layers: Vec<Dense>,
    act_last: bool,
}

struct Layout {
    embed: Dense,
    mlps: Vec<Mlp>,
    names: Vec<(String, Range<usize>)>,
    total: usize,
}

#[derive(Default)]
struct Alloc {
    total: usize,
    names: Vec<(String, Range<usize>)>,
}

impl Alloc {
    fn dense(&mut self, name: &str, inp: usize, out: usize) -> Dense {
        let w = self.total;
        let b = w + inp * out;
        self.total = b + out;
        self.names.push((format!("{name}.weight"), w..b));
        self.names.push((format!("{name}.bias"), b..self.total));
        Dense { inp, out, w, b }
    }

    fn mlp(&mut self, name: &str, inp: usize, hidden: &[usize], out: usize, act_last: bool) -> Mlp {
        let mut widths = vec![inp];
        widths.extend_from_slice(hidden);
        widths.push(out);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| self.dense(&format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Mlp { layers, act_last }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..a.len() {
        s += a[j] * b[j];
    }
    s
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `y += a[0]·x0 + a[1]·x1 + a[2]·x2 + a[3]·x3`.
fn axpy4(y: &mut [f64], a: [f64; 4], x: [&[f64]; 4]) {
    let n = y.len();
    let (x0, x1, x2, x3) = (&x[0][..n], &x[1][..n], &x[2][..n], &x[3][..n]);
    for j in 0..n {
        y[j] += a[0] * x0[j] + a[1] * x1[j] + a[2] * x2[j] + a[3] * x3[j];
    }
}

/// Four dot products of `w` against `x0..x3`, sharing the loads of `w`.
fn dot4(w: &[f64], x: [&[f64]; 4]) -> [f64; 4] {
    let n = w.len();
    let (x0, x1, x2, x3) = (&x[0][..n], &x[1][..n], &x[2][..n], &x[3][..n]);
    let mut acc = [[0.0; 2]; 4];
    let pairs = n / 2;
    for i in 0..pairs {
        let j = 2 * i;
        let (wa, wb) = (w[j], w[j + 1]);
        acc[0][0] += wa * x0[j];
        acc[0][1] += wb * x0[j + 1];
        acc[1][0] += wa * x1[j];
        acc[1][1] += wb * x1[j + 1];
        acc[2][0] += wa * x2[j];
        acc[2][1] += wb * x2[j + 1];
        acc[3][0] += wa * x3[j];
        acc[3][1] += wb * x3[j + 1];
    }
    let mut out = [acc[0][0] + acc[0][1], acc[1][0] + acc[1][1], acc[2][0] + acc[2][1], acc[3][0] + acc[3][1]];
    if n % 2 == 1 {
        let j = n - 1;
        out[0] += w[j] * x0[j];
        out[1] += w[j] * x1[j];
        out[2] += w[j] * x2[j];
        out[3] += w[j] * x3[j];
    }
    out
}

impl Dense {
    fn forward(&self, p: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
        let (inp, out) = (self.inp, self.out);
        let w = &p[self.w..self.b];
        let b = &p[self.b..self.b + out];
        let mut y = vec![0.0; rows * out];
        let row = |r: usize| &x[r * inp..(r + 1) * inp];
        let blocked = rows / 4 * 4;
        for r in (0..blocked).step_by(4) {
            let xs = [row(r), row(r + 1), row(r + 2), row(r + 3)];
            for o in 0..out {
                let d = dot4(&w[o * inp..(o + 1) * inp], xs);
                for k in 0..4 {
                    y[(r + k) * out + o] = b[o] + d[k];
                }
            }
        }
        for r in blocked..rows {
            for o in 0..out {
                y[r * out + o] = b[o] + dot(&w[o * inp..(o + 1) * inp], row(r));
            }
        }
        y
    }

    /// Accumulates parameter gradients in ascending row order; returns the
    /// input gradient when asked.
    fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], rows: usize, grad: &mut [f64], need_dx: bool) -> Vec<f64> {
        let (inp, out) = (self.inp, self.out);
        let w = &p[self.w..self.b];
        let row = |r: usize| &x[r * inp..(r + 1) * inp];
        let blocked = rows / 4 * 4;
        for r in (0..blocked).step_by(4) {
            let xs = [row(r), row(r + 1), row(r + 2), row(r + 3)];
            for o in 0..out {
                let g = [dy[r * out + o], dy[(r + 1) * out + o], dy[(r + 2) * out + o], dy[(r + 3) * out + o]];
                grad[self.b + o] += (g[0] + g[1]) + (g[2] + g[3]);
                let gw = self.w + o * inp;
                axpy4(&mut grad[gw..gw + inp], g, xs);
            }
        }
        for r in blocked..rows {
            for o in 0..out {
                let g = dy[r * out + o];
                grad[self.b + o] += g;
                let gw = self.w + o * inp;
                axpy(&mut grad[gw..gw + inp], g, row(r));
            }
        }
        if !need_dx {
            return Vec::new();
        }
        let mut dx = vec![0.0; rows * inp];
        let wrow = |o: usize| &w[o * inp..(o + 1) * inp];
        let oblocked = out / 4 * 4;
        for r in 0..rows {
            let dxr = &mut dx[r * inp..(r + 1) * inp];
            let dyr = &dy[r * out..(r + 1) * out];
            for o in (0..oblocked).step_by(4) {
                axpy4(dxr, [dyr[o], dyr[o + 1], dyr[o + 2], dyr[o + 3]], [wrow(o), wrow(o + 1), wrow(o + 2), wrow(o + 3)]);
            }
            for o in oblocked..out {
                axpy(dxr, dyr[o], wrow(o));
            }
        }
        dx
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

struct MlpTrace {
    /// Input of every layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of every layer.
    pre: Vec<Vec<f64>>,
    rows: usize,
}

impl Mlp {
    fn forward(&self, p: &[f64], x: Vec<f64>, rows: usize) -> (Vec<f64>, MlpTrace) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(p, &h, rows);
            let activate = i + 1 < self.layers.len() || self.act_last;
            let next = if activate {
                z.iter().map(|&v| silu(v)).collect()
            } else {
                z.clone()
            };
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        (h, MlpTrace { inputs, pre, rows })
    }

    fn backward(&self, p: &[f64], trace: &MlpTrace, dout: Vec<f64>, grad: &mut [f64], need_dx: bool) -> Vec<f64> {
        let mut d = dout;
        let n = self.layers.len();
        for i in (0..n).rev() {
            if i + 1 < n || self.act_last {
                for (di, &z) in d.iter_mut().zip(&trace.pre[i]) {
                    *di *= silu_grad(z);
                }
            }
            d = self.layers[i].backward(p, &trace.inputs[i], &d, trace.rows, grad, i > 0 || need_dx);
        }
        d
    }
}

/// All weights of a model, stored as one flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        let n = spec.param_count()?;
        Ok(Self {
            spec,
            values: vec![0.0; n],
        })
    }

    /// Fan-in scaled normal weights, zero biases, zero output layer: the
    /// initial prediction is identically zero.
    pub fn init(spec: ModelSpec, rng: &mut RandomSource) -> Result<Self> {
        let mut p = Self::zeros(spec)?;
        let layout = p.spec.layout();
        let last = layout.mlps.last().and_then(|m| m.layers.last()).map(|d| d.w);
        for d in std::iter::once(&layout.embed).chain(layout.mlps.iter().flat_map(|m| &m.layers)) {
            if Some(d.w) == last {
                continue;
            }
            let std = 1.0 / (d.inp as f64).sqrt();
            for w in &mut p.values[d.w..d.b] {
                *w = std * rng.normal();
            }
        }
        Ok(p)
    }

    /// Every parameter random, including biases and the output layer; used
    /// for gradient checks where a zero layer would hide errors.
    pub fn random(spec: ModelSpec, rng: &mut RandomSource) -> Result<Self> {
        let mut p = Self::zeros(spec)?;
        let layout = p.spec.layout();
        for d in std::iter::once(&layout.embed).chain(layout.mlps.iter().flat_map(|m| &m.layers)) {
            let std = 1.0 / (d.inp as f64).sqrt();
            for w in &mut p.values[d.w..d.b + d.out] {
                *w = std * rng.normal();
            }
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Named slices of the flat vector (`embed.weight`, `mlp.0.bias`, ...).
    pub fn views(&self) -> Vec<(String, Range<usize>)> {
        self.spec.layout().names
    }

    pub fn view(&self, name: &str) -> Option<&[f64]> {
        self.views()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| &self.values[r])
    }

    pub fn view_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.views().into_iter().find(|(n, _)| n == name)?.1;
        Some(&mut self.values[range])
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

struct Trace {
    features: Vec<f64>,
    entries: usize,
    mlps: Vec<MlpTrace>,
    /// Token model: encoder output width and token count.
    token: Option<(usize, usize)>,
    records: usize,
}

fn check_inputs(spec: &ModelSpec, x: &Tensor, labels: &[usize]) -> Result<usize> {
    // Flat models take any record shape of the right size.
    let want = spec.architecture.record_shape();
    let fits = match spec.architecture {
        Architecture::Flat { data_dim, .. } => x.rank() >= 2 && x.record_len() == data_dim,
        Architecture::TokenSet { .. } => x.rank() == want.len() + 1 && x.shape()[1..] == want[..],
    };
    if !fits {
        return Err(Error::ShapeMismatch(format!(
            "model expects records of shape {want:?}, got tensor {:?}",
            x.shape()
        )));
    }
    let n = x.records();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{} labels for {n} records", labels.len())));
    }
    let k = spec.architecture.n_classes();
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::ShapeMismatch(format!("class label {bad} with {k} classes")));
    }
    Ok(n)
}

/// Rows of `[x entries, embedded t per entry, class one-hot]`, one row per
/// `row_width` entries of `x`.
fn assemble_rows(
    p: &[f64],
    spec: &ModelSpec,
    embed: &Dense,
    x: &Tensor,
    t: &Tensor,
    labels: &[usize],
    row_width: usize,
    rows_per_record: usize,
) -> (Vec<f64>, Vec<f64>) {
    let fdim = spec.embed.feature_dim();
    let c = spec.embed.compressed_dim;
    let k = spec.architecture.n_classes();
    let entries = x.len();
    let mut features = vec![0.0; entries * fdim];
    for (i, &ti) in t.data().iter().enumerate() {
        frequency_features_into(ti, spec.embed.n_freq, &mut features[i * fdim..(i + 1) * fdim]);
    }
    let emb = embed.forward(p, &features, entries);
    let width = row_width * (1 + c) + k;
    let rows = entries / row_width;
    let mut out = vec![0.0; rows * width];
    for r in 0..rows {
        let row = &mut out[r * width..(r + 1) * width];
        row[..row_width].copy_from_slice(&x.data()[r * row_width..(r + 1) * row_width]);
        row[row_width..row_width * (1 + c)].copy_from_slice(&emb[r * row_width * c..(r + 1) * row_width * c]);
        row[row_width * (1 + c) + labels[r / rows_per_record]] = 1.0;
    }
    (out, features)
}

fn forward_trace(params: &ModelParams, x: &Tensor, t: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Trace)> {
    let n = check_inputs(&params.spec, x, labels)?;
    let t = t.broadcast_to(x.shape())?;
    let layout = params.spec.layout();
    let p = &params.values;
    match &params.spec.architecture {
        Architecture::Flat { data_dim, .. } => {
            let (rows, features) = assemble_rows(p, &params.spec, &layout.embed, x, &t, labels, *data_dim, 1);
            let (out, tr) = layout.mlps[0].forward(p, rows, n);
            Ok((
                out,
                Trace {
                    features,
                    entries: x.len(),
                    mlps: vec![tr],
                    token: None,
                    records: n,
                },
            ))
        }
        Architecture::TokenSet {
            parts, token_width, ..
        } => {
            let (rows, features) =
                assemble_rows(p, &params.spec, &layout.embed, x, &t, labels, *token_width, *parts);
            let (h, enc) = layout.mlps[0].forward(p, rows, n * parts);
            let e = layout.mlps[0].layers.last().expect("non-empty").out;
            let mut dec_in = vec![0.0; n * parts * 2 * e];
            for r in 0..n {
                let mut pooled = vec![0.0; e];
                for l in 0..*parts {
                    axpy(&mut pooled, 1.0 / *parts as f64, &h[(r * parts + l) * e..(r * parts + l + 1) * e]);
                }
                for l in 0..*parts {
                    let row = (r * parts + l) * 2 * e;
                    dec_in[row..row + e].copy_from_slice(&h[(r * parts + l) * e..(r * parts + l + 1) * e]);
                    dec_in[row + e..row + 2 * e].copy_from_slice(&pooled);
                }
            }
            let (out, dec) = layout.mlps[1].forward(p, dec_in, n * parts);
            Ok((
                out,
                Trace {
                    features,
                    entries: x.len(),
                    mlps: vec![enc, dec],
                    token: Some((e, *parts)),
                    records: n,
                },
            ))
        }
    }
}

fn backward(params: &ModelParams, trace: &Trace, dout: Vec<f64>) -> Vec<f64> {
    let layout = params.spec.layout();
    let p = &params.values;
    let mut grad = vec![0.0; params.len()];
    let d_rows = match trace.token {
        None => layout.mlps[0].backward(p, &trace.mlps[0], dout, &mut grad, true),
        Some((e, parts)) => {
            let d_dec = layout.mlps[1].backward(p, &trace.mlps[1], dout, &mut grad, true);
            let mut dh = vec![0.0; trace.records * parts * e];
            for r in 0..trace.records {
                let mut dpooled = vec![0.0; e];
                for l in 0..parts {
                    let row = (r * parts + l) * 2 * e;
                    axpy(&mut dh[(r * parts + l) * e..(r * parts + l + 1) * e], 1.0, &d_dec[row..row + e]);
                    axpy(&mut dpooled, 1.0, &d_dec[row + e..row + 2 * e]);
                }
                for l in 0..parts {
                    axpy(&mut dh[(r * parts + l) * e..(r * parts + l + 1) * e], 1.0 / parts as f64, &dpooled);
                }
            }
            layout.mlps[0].backward(p, &trace.mlps[0], dh, &mut grad, true)
        }
    };
    // Route the embedded-timestep slots of each input row back to the
    // embedding layer.
    let c = params.spec.embed.compressed_dim;
    let row_width = match &params.spec.architecture {
        Architecture::Flat { data_dim, .. } => *data_dim,
        Architecture::TokenSet { token_width, .. } => *token_width,
    };
    let width = row_width * (1 + c) + params.spec.architecture.n_classes();
    let rows = trace.entries / row_width;
    let mut d_emb = vec![0.0; trace.entries * c];
    for r in 0..rows {
        d_emb[r * row_width * c..(r + 1) * row_width * c]
            .copy_from_slice(&d_rows[r * width + row_width..r * width + row_width * (1 + c)]);
    }
    layout
        .embed
        .backward(p, &trace.features, &d_emb, trace.entries, &mut grad, false);
    grad
}

/// Prediction with the shape of `x_t`. `t` must broadcast to `x_t`.
pub fn forward(params: &ModelParams, x_t: &Tensor, t: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (out, _) = forward_trace(params, x_t, t, labels)?;
    Tensor::from_vec(x_t.shape().to_vec(), out)
}

/// Embedded timesteps, shape `t.shape × compressed_dim`.
pub fn embed_timesteps(params: &ModelParams, t: &Tensor) -> Tensor {
    let layout = params.spec.layout();
    let fdim = params.spec.embed.feature_dim();
    let mut features = vec![0.0; t.len() * fdim];
    for (i, &ti) in t.data().iter().enumerate() {
        frequency_features_into(ti, params.spec.embed.n_freq, &mut features[i * fdim..(i + 1) * fdim]);
    }
    let emb = layout.embed.forward(&params.values, &features, t.len());
    let mut shape = t.shape().to_vec();
    shape.push(params.spec.embed.compressed_dim);
    Tensor::from_vec(shape, emb).expect("embedding shape")
}

/// Mean over records of the squared error `‖pred − target‖²`.
pub fn loss(params: &ModelParams, batch: &SampleBatch) -> Result<f64> {
    let pred = forward(params, &batch.x_t, &batch.t, &batch.class_labels)?;
    mse(&pred, &batch.target)
}

fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.records().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Loss and its exact gradient with respect to every parameter.
pub fn loss_and_grad(params: &ModelParams, batch: &SampleBatch) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let (out, trace) = forward_trace(params, &batch.x_t, &batch.t, &batch.class_labels)?;
    let pred = Tensor::from_vec(batch.x_t.shape().to_vec(), out)?;
    let l = mse(&pred, &batch.target)?;
    let scale = 2.0 / batch.len() as f64;
    let dout = pred
        .data()
        .iter()
        .zip(batch.target.data())
        .map(|(a, b)| scale * (a - b))
        .collect();
    Ok((l, backward(params, &trace, dout)))
}

/// Floor on the denominator of the relative gradient error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Max over parameters of `|g − g_fd| / max(|g|, |g_fd|, 1e-6)`, with `g_fd`
/// the central difference of the loss at step `h`.
pub fn finite_diff_check(params: &ModelParams, batch: &SampleBatch, h: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Precondition(format!(
            "finite-difference step {h} outside [1e-7, 1e-3]"
        )));
    }
    let (_, grad) = loss_and_grad(params, batch)?;
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let orig = probe.values[i];
        probe.values[i] = orig + h;
        let plus = loss(&probe, batch)?;
        probe.values[i] = orig - h;
        let minus = loss(&probe, batch)?;
        probe.values[i] = orig;
        let fd = (plus - minus) / (2.0 * h);
        let denom = grad[i].abs().max(fd.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max((grad[i] - fd).abs() / denom);
    }
    Ok(worst)
}

/// Largest `‖f(a) − f(b)‖ / ‖a − b‖` over `pairs` random point pairs in the
/// unit box at a shared random timestep. Diagnostic only.
pub fn lipschitz_estimate(params: &ModelParams, pairs: usize, label: usize, rng: &mut RandomSource) -> Result<f64> {
    let shape: Vec<usize> = std::iter::once(1)
        .chain(params.spec.architecture.record_shape())
        .collect();
    let d = params.spec.architecture.record_len();
    let mut best: f64 = 0.0;
    for _ in 0..pairs {
        let a: Vec<f64> = (0..d).map(|_| rng.uniform()).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.uniform()).collect();
        let t = Tensor::scalar(rng.uniform());
        let fa = forward(params, &Tensor::from_vec(shape.clone(), a.clone())?, &t, &[label])?;
        let fb = forward(params, &Tensor::from_vec(shape.clone(), b.clone())?, &t, &[label])?;
        let num = fa.sub(&fb)?.norm();
        let den: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        if den > 0.0 {
            best = best.max(num / den);
        }
    }
    Ok(best)
}

/// Metadata stored next to a parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: ModelSpec,
    pub seed: u64,
    pub step: u64,
    pub n_params: usize,
    /// Free-form run information (resolved config, dataset normalization).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub const PARAMS_FILE: &str = "params.csv";
pub const OPTIM_FILE: &str = "optim.csv";
pub const HEADER_FILE: &str = "checkpoint.json";

/// Writes `params.csv`, `checkpoint.json` and, when given, `optim.csv`
/// (optimizer moments as a `(2, P)` tensor) into `dir`.
pub fn save_checkpoint(dir: &Path, params: &ModelParams, header: &CheckpointHeader, optim: Option<&Tensor>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Tensor::from_vec([params.len()], params.values.clone())?.write_csv(&dir.join(PARAMS_FILE))?;
    std::fs::write(dir.join(HEADER_FILE), serde_json::to_string_pretty(header)?)?;
    if let Some(m) = optim {
        m.write_csv(&dir.join(OPTIM_FILE))?;
    }
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, CheckpointHeader, Option<Tensor>)> {
    let header: CheckpointHeader = serde_json::from_str(&std::fs::read_to_string(dir.join(HEADER_FILE))?)?;
    let values = Tensor::read_csv(&dir.join(PARAMS_FILE))?.into_data();
    let expected = header.spec.param_count()?;
    if values.len() != expected || header.n_params != expected {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint holds {} parameters, spec needs {expected}",
            values.len()
        )));
    }
    let optim_path = dir.join(OPTIM_FILE);
    let optim = if optim_path.exists() {
        Some(Tensor::read_csv(&optim_path)?)
    } else {
        None
    };
    Ok((
        ModelParams {
            spec: header.spec.clone(),
            values,
        },
        header,
        optim,
    ))
}
