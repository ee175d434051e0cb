//! Euler ODE/SDE sampling: synchronized schedules, graded-control schedules
//! with per-entry start times, and the iterative structured-set loop.

use serde::{Deserialize, Serialize};

use crate::data::StructuredSpec;
use crate::error::{Error, Result};
use crate::interpolant::PredictionKind;
use crate::regressor::{forward, ModelParams};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    OdeEuler,
    SdeEuler,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepScheme {
    /// Every entry takes `K` steps of its own size `(1 − m)/K`.
    UniformStepNumber,
    /// All entries share the step `1/K`; entries that reach 1 stop moving.
    UniformStepsize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_integrator")]
    pub integrator: Integrator,
    #[serde(default = "default_scheme")]
    pub scheme: StepScheme,
    #[serde(default)]
    pub sde_noise_scale: f64,
    #[serde(default = "default_prediction")]
    pub prediction: PredictionKind,
}

fn default_steps() -> usize {
    250
}
fn default_integrator() -> Integrator {
    Integrator::OdeEuler
}
fn default_scheme() -> StepScheme {
    StepScheme::UniformStepNumber
}
fn default_prediction() -> PredictionKind {
    PredictionKind::Velocity
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            integrator: default_integrator(),
            scheme: default_scheme(),
            sde_noise_scale: 0.0,
            prediction: default_prediction(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("sampler needs at least one step".into()));
        }
        if self.integrator == Integrator::SdeEuler && !(self.sde_noise_scale >= 0.0) {
            return Err(Error::InvalidConfig("sde_noise_scale must be nonnegative".into()));
        }
        Ok(())
    }

    fn noise_scale(&self) -> f64 {
        match self.integrator {
            Integrator::OdeEuler => 0.0,
            Integrator::SdeEuler => self.sde_noise_scale,
        }
    }
}

/// Anything that maps `(x_t, t, labels)` to a prediction of the same shape.
pub trait Predictor {
    /// Shape of one record, without the batch axis.
    fn record_shape(&self) -> Vec<usize>;
    fn predict(&self, x: &Tensor, t: &Tensor, labels: &[usize]) -> Result<Tensor>;
}

impl Predictor for ModelParams {
    fn record_shape(&self) -> Vec<usize> {
        self.spec.architecture.record_shape()
    }

    fn predict(&self, x: &Tensor, t: &Tensor, labels: &[usize]) -> Result<Tensor> {
        forward(self, x, t, labels)
    }
}

/// A model viewed with a given record shape (e.g. a flat model over
/// `(C, H, W)` grid records).
pub struct ShapedModel<'a> {
    pub params: &'a ModelParams,
    pub record_shape: Vec<usize>,
}

impl Predictor for ShapedModel<'_> {
    fn record_shape(&self) -> Vec<usize> {
        self.record_shape.clone()
    }

    fn predict(&self, x: &Tensor, t: &Tensor, labels: &[usize]) -> Result<Tensor> {
        forward(self.params, x, t, labels)
    }
}

/// Closure-backed predictor for hand-built fields.
pub struct FnPredictor<F> {
    pub shape: Vec<usize>,
    pub f: F,
}

impl<F> Predictor for FnPredictor<F>
where
    F: Fn(&Tensor, &Tensor, &[usize]) -> Result<Tensor>,
{
    fn record_shape(&self) -> Vec<usize> {
        self.shape.clone()
    }

    fn predict(&self, x: &Tensor, t: &Tensor, labels: &[usize]) -> Result<Tensor> {
        (self.f)(x, t, labels)
    }
}

/// Below this remaining time a data prediction yields zero velocity.
const DATA_VELOCITY_EPS: f64 = 1e-9;

/// Velocity implied by a prediction: itself, or `(x̂1 − x)/(1 − t)`.
fn velocity(kind: PredictionKind, pred: Tensor, x: &Tensor, t: &Tensor) -> Result<Tensor> {
    match kind {
        PredictionKind::Velocity => Ok(pred),
        PredictionKind::Data => {
            let t = t.broadcast_to(x.shape())?;
            let data = pred
                .data()
                .iter()
                .zip(x.data())
                .zip(t.data())
                .map(|((&p, &xi), &ti)| {
                    let rem = 1.0 - ti;
                    if rem < DATA_VELOCITY_EPS {
                        0.0
                    } else {
                        (p - xi) / rem
                    }
                })
                .collect();
            Tensor::from_vec(x.shape().to_vec(), data)
        }
    }
}

/// One Euler step from `t_now` to `t_next` (entrywise). With a positive
/// `noise_scale` and `xi`, adds `sqrt(Δt)·σ(t_now)·ξ`, `σ(t) = scale·(1 − t)`.
pub fn sit_step(
    x: &Tensor,
    v_hat: &Tensor,
    t_now: &Tensor,
    t_next: &Tensor,
    noise_scale: f64,
    xi: Option<&Tensor>,
) -> Result<Tensor> {
    let shape = x.shape();
    let t0 = t_now.broadcast_to(shape)?;
    let t1 = t_next.broadcast_to(shape)?;
    let v = v_hat.broadcast_to(shape)?;
    if let Some(i) = t0.data().iter().zip(t1.data()).position(|(a, b)| b < a) {
        return Err(Error::NegativeStep {
            index: i,
            t_now: t0.data()[i],
            t_next: t1.data()[i],
        });
    }
    let mut out: Vec<f64> = x
        .data()
        .iter()
        .zip(v.data())
        .zip(t0.data().iter().zip(t1.data()))
        .map(|((&xi, &vi), (&a, &b))| xi + (b - a) * vi)
        .collect();
    if noise_scale > 0.0 {
        let xi = xi.ok_or_else(|| Error::Precondition("SDE step needs a noise tensor".into()))?;
        let xi = xi.broadcast_to(shape)?;
        for (i, o) in out.iter_mut().enumerate() {
            let dt = t1.data()[i] - t0.data()[i];
            *o += dt.sqrt() * noise_scale * (1.0 - t0.data()[i]) * xi.data()[i];
        }
    }
    Tensor::from_vec(shape.to_vec(), out)
}

/// Stream layout: record `r` owns `source.child(r)`; its noise start comes
/// from child 0 of that, SDE noise for step `k` from child `k + 1`.
fn initial_noise(n: usize, record_len: usize, source: &RandomSource) -> Vec<f64> {
    let mut z = Vec::with_capacity(n * record_len);
    for r in 0..n {
        let mut g = source.child(r as u64).child(0);
        z.extend((0..record_len).map(|_| g.normal()));
    }
    z
}

fn step_noise(n: usize, record_len: usize, step: usize, source: &RandomSource) -> Vec<f64> {
    let mut xi = Vec::with_capacity(n * record_len);
    for r in 0..n {
        let mut g = source.child(r as u64).child(step as u64 + 1);
        xi.extend((0..record_len).map(|_| g.normal()));
    }
    xi
}

fn batch_shape(model: &dyn Predictor, n: usize) -> Vec<usize> {
    std::iter::once(n).chain(model.record_shape()).collect()
}

/// Synchronized sampling: `t_k = k/K` shared by every entry.
pub fn sample_sync(
    model: &dyn Predictor,
    n: usize,
    cfg: &SamplerConfig,
    class_label: usize,
    source: &RandomSource,
) -> Result<Tensor> {
    cfg.validate()?;
    let shape = batch_shape(model, n);
    let record_len: usize = shape[1..].iter().product();
    let labels = vec![class_label; n];
    let mut x = Tensor::from_vec(shape.clone(), initial_noise(n, record_len, source))?;
    let k_total = cfg.steps;
    let mut t_shape = vec![1; shape.len()];
    t_shape[0] = n;
    for k in 0..k_total {
        let t_now = Tensor::full(t_shape.clone(), k as f64 / k_total as f64);
        let t_next = Tensor::full(t_shape.clone(), (k + 1) as f64 / k_total as f64);
        let pred = model.predict(&x, &t_now, &labels)?;
        let v = velocity(cfg.prediction, pred, &x, &t_now)?;
        let xi = (cfg.noise_scale() > 0.0)
            .then(|| Tensor::from_vec(shape.clone(), step_noise(n, record_len, k, source)))
            .transpose()?;
        x = sit_step(&x, &v, &t_now, &t_next, cfg.noise_scale(), xi.as_ref())?;
    }
    Ok(x)
}

/// Per-entry preservation weights in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradedMask {
    pub m: Tensor,
}

impl GradedMask {
    pub fn new(m: Tensor) -> Result<Self> {
        if let Some(bad) = m.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Precondition(format!("mask entry {bad} outside [0, 1]")));
        }
        Ok(Self { m })
    }

    pub fn constant(shape: impl Into<Vec<usize>>, value: f64) -> Result<Self> {
        Self::new(Tensor::full(shape, value))
    }
}

/// Result of graded sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct GradedOutput {
    pub x: Tensor,
    /// Final per-entry timesteps (all exactly 1).
    pub t: Tensor,
    pub steps_taken: usize,
}

/// Iterations the uniform-stepsize scheme needs for its slowest entry.
pub fn uniform_stepsize_steps(mask: &GradedMask, k: usize) -> usize {
    let min_m = mask.m.min().unwrap_or(0.0);
    // Tolerate rounding in (1 − m)·K before taking the ceiling.
    ((1.0 - min_m) * k as f64 - 1e-9).ceil().max(0.0) as usize
}

fn schedule(scheme: StepScheme, m: &[f64], k: usize, k_total: usize, steps: usize) -> Vec<f64> {
    m.iter()
        .map(|&mi| {
            if k >= steps {
                return 1.0;
            }
            match scheme {
                StepScheme::UniformStepNumber => (mi + (1.0 - mi) * (k as f64 / k_total as f64)).min(1.0),
                StepScheme::UniformStepsize => (mi + k as f64 / k_total as f64).min(1.0),
            }
        })
        .collect()
}

/// Graded-control sampling from `x^(0) = (1 − m)⊙z + m⊙x1`, `t^(0) = m`.
///
/// Uniform step number uses `t^(k) = min(1, m + (1 − m)·k/K)`, the closed
/// form of accumulating `Δt = (1 − m)/K`, with `t^(K) = 1`. Uniform stepsize
/// uses `t^(k) = min(1, m + k/K)` until every entry has reached 1. ODE only.
pub fn sample_graded(
    model: &dyn Predictor,
    x1: &Tensor,
    mask: &GradedMask,
    cfg: &SamplerConfig,
    class_label: usize,
    source: &RandomSource,
) -> Result<GradedOutput> {
    cfg.validate()?;
    if cfg.integrator != Integrator::OdeEuler {
        return Err(Error::InvalidConfig(
            "graded sampling supports ode_euler only".into(),
        ));
    }
    let n = x1.records();
    let shape = batch_shape(model, n);
    if x1.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "reference {:?} does not match model records {shape:?}",
            x1.shape()
        )));
    }
    let record_len: usize = shape[1..].iter().product();
    let m = mask.m.broadcast_to(&shape)?;
    let z = Tensor::from_vec(shape.clone(), initial_noise(n, record_len, source))?;
    let mut x = crate::interpolant::interpolate(&z, x1, &m)?;
    let labels = vec![class_label; n];
    let k_total = cfg.steps;
    let steps = match cfg.scheme {
        StepScheme::UniformStepNumber => k_total,
        StepScheme::UniformStepsize => uniform_stepsize_steps(mask, k_total),
    };
    let mut t_now = Tensor::from_vec(shape.clone(), schedule(cfg.scheme, m.data(), 0, k_total, steps))?;
    for k in 0..steps {
        let t_next = Tensor::from_vec(shape.clone(), schedule(cfg.scheme, m.data(), k + 1, k_total, steps))?;
        let pred = model.predict(&x, &t_now, &labels)?;
        let v = velocity(cfg.prediction, pred, &x, &t_now)?;
        x = sit_step(&x, &v, &t_now, &t_next, 0.0, None)?;
        t_now = t_next;
    }
    // With no steps (mask all ones) the schedule already sits at 1.
    let t = if steps == 0 { Tensor::ones(shape) } else { t_now };
    Ok(GradedOutput {
        x,
        t,
        steps_taken: steps,
    })
}

/// Sets every existence entry to 0/1 at `threshold` and zeroes dead tokens.
pub fn binarize_structures(x: &mut Tensor, spec: &StructuredSpec, threshold: f64) {
    let v = spec.token_width();
    for tok in x.data_mut().chunks_mut(v) {
        if tok[0] >= threshold {
            tok[0] = 1.0;
        } else {
            tok.iter_mut().for_each(|e| *e = 0.0);
        }
    }
}

/// Iterative structured sampling on the synchronized schedule `t_k = k/iters`:
/// predict `x̂1`, binarize its existence entries, re-diffuse to `t_{k+1}`
/// with the noise implied by the current point, repeat. Returns the last
/// binarized prediction.
pub fn sample_structured(
    model: &dyn Predictor,
    spec: &StructuredSpec,
    n: usize,
    iters: usize,
    class_label: usize,
    source: &RandomSource,
    exist_threshold: f64,
) -> Result<Tensor> {
    spec.validate()?;
    if iters == 0 {
        return Err(Error::InvalidConfig("structured sampling needs at least one iteration".into()));
    }
    let shape = batch_shape(model, n);
    if shape[1..] != [spec.parts, spec.token_width()] {
        return Err(Error::ShapeMismatch(format!(
            "model records {:?} do not match the structured layout",
            &shape[1..]
        )));
    }
    let record_len = spec.parts * spec.token_width();
    let labels = vec![class_label; n];
    let mut x = Tensor::from_vec(shape.clone(), initial_noise(n, record_len, source))?;
    let mut t_shape = vec![1; shape.len()];
    t_shape[0] = n;
    let mut x1_hat = x.clone();
    for k in 0..iters {
        let t = k as f64 / iters as f64;
        let t_next = (k + 1) as f64 / iters as f64;
        x1_hat = model.predict(&x, &Tensor::full(t_shape.clone(), t), &labels)?;
        binarize_structures(&mut x1_hat, spec, exist_threshold);
        if k + 1 < iters {
            // x = (1 − t')·ẑ + t'·x̂1 with ẑ = (x − t·x̂1)/(1 − t).
            let data = x
                .data()
                .iter()
                .zip(x1_hat.data())
                .map(|(&xi, &pi)| {
                    let z_hat = (xi - t * pi) / (1.0 - t);
                    (1.0 - t_next) * z_hat + t_next * pi
                })
                .collect();
            x = Tensor::from_vec(shape.clone(), data)?;
        }
    }
    Ok(x1_hat)
}

/// Which attribute groups keep their values during assembly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeSet {
    pub shape_code: bool,
    pub bbox_size: bool,
}

/// Per-token mask for assembly: `weight` on existence and on frozen groups,
/// 0 on box centers and free groups. Box layout is `(cx, cy, w, h)`.
pub fn assembly_mask(spec: &StructuredSpec, freeze: FreezeSet, weight: f64) -> Result<GradedMask> {
    let v = spec.token_width();
    let mut token = vec![0.0; v];
    token[0] = weight;
    if freeze.bbox_size {
        token[3] = weight;
        token[4] = weight;
    }
    if freeze.shape_code {
        token[5..].iter_mut().for_each(|e| *e = weight);
    }
    let data = (0..spec.parts).flat_map(|_| token.iter().copied()).collect();
    GradedMask::new(Tensor::from_vec([1, spec.parts, v], data)?)
}

/// Regenerates part positions of given structures while holding the frozen
/// groups near their inputs, then binarizes existence.
pub fn assemble_parts(
    model: &dyn Predictor,
    parts: &Tensor,
    spec: &StructuredSpec,
    mask: &GradedMask,
    cfg: &SamplerConfig,
    class_label: usize,
    source: &RandomSource,
) -> Result<Tensor> {
    let mut out = sample_graded(model, parts, mask, cfg, class_label, source)?.x;
    binarize_structures(&mut out, spec, 0.5);
    Ok(out)
}

/// Mean absolute change of frozen-group entries (shape codes) and of
/// position entries `(cx, cy)` over tokens live in `before`.
pub fn assembly_drift(before: &Tensor, after: &Tensor, spec: &StructuredSpec) -> Result<(f64, f64)> {
    if before.shape() != after.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            before.shape(),
            after.shape()
        )));
    }
    let v = spec.token_width();
    let (mut frozen, mut nf, mut free, mut np) = (0.0, 0usize, 0.0, 0usize);
    for (a, b) in before.data().chunks(v).zip(after.data().chunks(v)) {
        if a[0] < 0.5 {
            continue;
        }
        for j in 5..v {
            frozen += (a[j] - b[j]).abs();
            nf += 1;
        }
        for j in 1..3 {
            free += (a[j] - b[j]).abs();
            np += 1;
        }
    }
    if nf == 0 {
        return Err(Error::Precondition("no live parts to compare".into()));
    }
    Ok((frozen / nf as f64, free / np as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regressor::{Architecture, EmbedSpec, ModelSpec};

    fn zero_model(dim: usize) -> FnPredictor<impl Fn(&Tensor, &Tensor, &[usize]) -> Result<Tensor>> {
        FnPredictor {
            shape: vec![dim],
            f: |x: &Tensor, _: &Tensor, _: &[usize]| Ok(Tensor::zeros(x.shape().to_vec())),
        }
    }

    fn v1(vals: &[f64]) -> Tensor {
        Tensor::from_vec([vals.len()], vals.to_vec()).unwrap()
    }

    #[test]
    fn sit_step_cases() {
        let x = v1(&[0.0]);
        let v = v1(&[1.0]);
        assert_eq!(sit_step(&x, &v, &v1(&[0.3]), &v1(&[0.3]), 0.0, None).unwrap(), x);
        assert_eq!(sit_step(&x, &v, &v1(&[0.0]), &v1(&[1.0]), 0.0, None).unwrap(), v1(&[1.0]));
        assert!(matches!(
            sit_step(&x, &v, &v1(&[0.5]), &v1(&[0.4]), 0.0, None),
            Err(Error::NegativeStep { .. })
        ));
        let xi = v1(&[0.7]);
        assert_eq!(
            sit_step(&x, &v, &v1(&[0.2]), &v1(&[0.6]), 0.0, Some(&xi)).unwrap(),
            sit_step(&x, &v, &v1(&[0.2]), &v1(&[0.6]), 0.0, None).unwrap()
        );
    }

    #[test]
    fn one_step_zero_model_returns_noise() {
        let cfg = SamplerConfig {
            steps: 1,
            ..Default::default()
        };
        let src = RandomSource::new(3);
        let out = sample_sync(&zero_model(2), 4, &cfg, 0, &src).unwrap();
        assert_eq!(out.data(), initial_noise(4, 2, &src).as_slice());
    }

    #[test]
    fn sde_zero_scale_equals_ode() {
        let p = ModelParams::random(
            ModelSpec {
                architecture: Architecture::Flat {
                    data_dim: 2,
                    hidden: vec![8],
                    n_classes: 1,
                },
                embed: EmbedSpec::default(),
            },
            &mut RandomSource::new(1),
        )
        .unwrap();
        let ode = SamplerConfig {
            steps: 10,
            ..Default::default()
        };
        let sde = SamplerConfig {
            integrator: Integrator::SdeEuler,
            ..ode.clone()
        };
        let src = RandomSource::new(2);
        assert_eq!(
            sample_sync(&p, 5, &ode, 0, &src).unwrap(),
            sample_sync(&p, 5, &sde, 0, &src).unwrap()
        );
        let noisy = SamplerConfig {
            sde_noise_scale: 0.5,
            ..sde
        };
        assert_ne!(
            sample_sync(&p, 5, &ode, 0, &src).unwrap(),
            sample_sync(&p, 5, &noisy, 0, &src).unwrap()
        );
    }

    #[test]
    fn graded_sde_rejected() {
        let cfg = SamplerConfig {
            integrator: Integrator::SdeEuler,
            ..Default::default()
        };
        let mask = GradedMask::constant([1, 2], 0.5).unwrap();
        let x1 = Tensor::zeros([1, 2]);
        assert!(sample_graded(&zero_model(2), &x1, &mask, &cfg, 0, &RandomSource::new(0)).is_err());
    }

    #[test]
    fn mask_range_checked() {
        assert!(GradedMask::new(v1(&[0.5, 1.2])).is_err());
    }

    #[test]
    fn stepsize_step_count() {
        let m = GradedMask::new(v1(&[0.5, 0.75])).unwrap();
        assert_eq!(uniform_stepsize_steps(&m, 20), 10);
        let m = GradedMask::constant([2], 1.0).unwrap();
        assert_eq!(uniform_stepsize_steps(&m, 20), 0);
    }

    #[test]
    fn assembly_mask_layout() {
        let spec = StructuredSpec::default();
        let m = assembly_mask(
            &spec,
            FreezeSet {
                shape_code: true,
                bbox_size: false,
            },
            0.9,
        )
        .unwrap();
        let tok = &m.m.data()[..13];
        assert_eq!(tok[0], 0.9);
        assert_eq!(&tok[1..5], &[0.0; 4]);
        assert!(tok[5..].iter().all(|&v| v == 0.9));
    }
}
