//! Training loop: batch draws under a timestep-splitting mode, regression
//! targets, AdamW updates, periodic sample-quality evaluation.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_2d_dataset, make_structured_dataset, pack_points, unpack_points, StructuredSpec, ToyKind};
use crate::error::{Error, Result};
use crate::interpolant::{sample_timesteps, DataLayout, PredictionKind, SampleBatch, UnsyncConfig, UnsyncMode};
use crate::metrics::energy_distance;
use crate::regressor::{
    load_checkpoint, loss_and_grad, save_checkpoint, Architecture, CheckpointHeader, EmbedSpec, ModelParams,
    ModelSpec,
};
use crate::rng::RandomSource;
use crate::sampler::{sample_structured, sample_sync, SamplerConfig, ShapedModel};
use crate::tensor::{sample_normal, Tensor};

/// Training data source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// 2D points packed `height × width` per record as `(2, h, w)` grids.
    Toy {
        toy: ToyKind,
        size: usize,
        heldout: usize,
        #[serde(default = "default_pack")]
        pack: [usize; 2],
    },
    /// Part-structured objects, `size`/`heldout` records per class.
    Structured {
        #[serde(default)]
        spec: StructuredSpec,
        size: usize,
        heldout: usize,
        #[serde(default = "default_classes")]
        classes: usize,
    },
}

fn default_pack() -> [usize; 2] {
    [1, 2]
}
fn default_classes() -> usize {
    2
}

impl DatasetConfig {
    pub fn layout(&self) -> DataLayout {
        match self {
            DatasetConfig::Toy { pack, .. } => DataLayout::Grid {
                channels: 2,
                height: pack[0],
                width: pack[1],
            },
            DatasetConfig::Structured { spec, .. } => spec.layout(),
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            DatasetConfig::Toy { .. } => 1,
            DatasetConfig::Structured { classes, .. } => *classes,
        }
    }
}

/// Network widths; the architecture kind follows from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_token_widths")]
    pub encoder: Vec<usize>,
    #[serde(default = "default_token_widths")]
    pub decoder: Vec<usize>,
    #[serde(default)]
    pub embed: EmbedSpec,
}

fn default_hidden() -> Vec<usize> {
    vec![128, 128, 128]
}
fn default_token_widths() -> Vec<usize> {
    vec![64, 64]
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            encoder: default_token_widths(),
            decoder: default_token_widths(),
            embed: EmbedSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }
}

/// Timestep splitting; the layout comes from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnsyncSettings {
    pub mode: UnsyncMode,
    #[serde(default = "default_mix")]
    pub mix_fraction: f64,
    #[serde(default)]
    pub blend: f64,
}

fn default_mix() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset: DatasetConfig,
    pub unsync: UnsyncSettings,
    #[serde(default = "default_prediction")]
    pub prediction: PredictionKind,
    #[serde(default = "default_true")]
    pub compensate: bool,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub steps: u64,
    #[serde(default)]
    pub seed: u64,
    /// Zero disables periodic evaluation; the final step is always evaluated
    /// when there is held-out data.
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    /// Generated records per class and evaluation.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    /// Sampler steps (or structured iterations) used for evaluation.
    #[serde(default = "default_eval_steps")]
    pub eval_steps: usize,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn default_prediction() -> PredictionKind {
    PredictionKind::Velocity
}
fn default_true() -> bool {
    true
}
fn default_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    256
}
fn default_eval_every() -> u64 {
    1000
}
fn default_eval_samples() -> usize {
    2048
}
fn default_eval_steps() -> usize {
    100
}

impl TrainConfig {
    pub fn unsync_config(&self) -> UnsyncConfig {
        UnsyncConfig {
            mode: self.unsync.mode,
            mix_fraction: self.unsync.mix_fraction,
            blend: self.unsync.blend,
            layout: self.dataset.layout(),
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        let architecture = match &self.dataset {
            DatasetConfig::Toy { pack, .. } => Architecture::Flat {
                data_dim: 2 * pack[0] * pack[1],
                hidden: self.model.hidden.clone(),
                n_classes: 1,
            },
            DatasetConfig::Structured { spec, classes, .. } => Architecture::TokenSet {
                parts: spec.parts,
                token_width: spec.token_width(),
                encoder: self.model.encoder.clone(),
                decoder: self.model.decoder.clone(),
                n_classes: *classes,
            },
        };
        ModelSpec {
            architecture,
            embed: self.model.embed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate {} must be finite and nonnegative",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        match &self.dataset {
            DatasetConfig::Toy { size, heldout, pack, .. } => {
                if *size == 0 || pack[0] == 0 || pack[1] == 0 {
                    return Err(Error::InvalidConfig("empty toy dataset".into()));
                }
                if *heldout == 1 {
                    return Err(Error::InvalidConfig("heldout needs 0 or at least 2 records".into()));
                }
            }
            DatasetConfig::Structured {
                spec,
                size,
                heldout,
                classes,
            } => {
                spec.validate()?;
                if *size == 0 || *classes == 0 || *classes > 2 {
                    return Err(Error::InvalidConfig(
                        "structured dataset needs size >= 1 and 1..=2 classes".into(),
                    ));
                }
                if *heldout == 1 {
                    return Err(Error::InvalidConfig("heldout needs 0 or at least 2 records per class".into()));
                }
            }
        }
        self.unsync_config().validate()?;
        self.model_spec().validate()
    }
}

/// Training and held-out records.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub train: Tensor,
    pub train_labels: Vec<usize>,
    pub heldout: Tensor,
    pub heldout_labels: Vec<usize>,
    /// Toy normalization (mean, scale) for reporting raw coordinates.
    pub normalization: Option<crate::data::Normalization>,
}

/// Stream layout under `RandomSource::new(seed)`: child 1 dataset, child 2
/// initialization, child 3 training steps, child 4 evaluation.
const DATA_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const STEP_STREAM: u64 = 3;
const EVAL_STREAM: u64 = 4;

pub fn build_data(cfg: &DatasetConfig, seed: u64) -> Result<TrainData> {
    let root = RandomSource::new(seed).child(DATA_STREAM);
    match cfg {
        DatasetConfig::Toy {
            toy,
            size,
            heldout,
            pack,
        } => {
            let per = pack[0] * pack[1];
            let mut src = root.child(0);
            let train = make_2d_dataset(toy, size * per, &mut src)?;
            let packed = pack_points(&train.samples, pack[0], pack[1])?;
            let heldout = if *heldout > 0 {
                let mut src = root.child(1);
                let raw = make_2d_dataset(toy, heldout * per, &mut src)?.denormalized();
                // Held-out points share the training normalization.
                let mut pts = raw;
                for r in 0..pts.records() {
                    train.normalization.normalize(pts.record_mut(r));
                }
                pack_points(&pts, pack[0], pack[1])?
            } else {
                Tensor::zeros(vec![0, 2, pack[0], pack[1]])
            };
            Ok(TrainData {
                train_labels: vec![0; packed.records()],
                heldout_labels: vec![0; heldout.records()],
                train: packed,
                heldout,
                normalization: Some(train.normalization),
            })
        }
        DatasetConfig::Structured {
            spec,
            size,
            heldout,
            classes,
        } => {
            let mut parts = Vec::new();
            let mut labels = Vec::new();
            let mut hparts = Vec::new();
            let mut hlabels = Vec::new();
            for c in 0..*classes {
                let ds = make_structured_dataset(spec, c, *size, &mut root.child(2 * c as u64))?;
                parts.extend_from_slice(ds.samples.data());
                labels.extend(ds.labels);
                if *heldout > 0 {
                    let hd = make_structured_dataset(spec, c, *heldout, &mut root.child(2 * c as u64 + 1))?;
                    hparts.extend_from_slice(hd.samples.data());
                    hlabels.extend(hd.labels);
                }
            }
            let v = spec.token_width();
            Ok(TrainData {
                train: Tensor::from_vec([labels.len(), spec.parts, v], parts)?,
                train_labels: labels,
                heldout: Tensor::from_vec([hlabels.len(), spec.parts, v], hparts)?,
                heldout_labels: hlabels,
                normalization: None,
            })
        }
    }
}

impl TrainData {
    /// Records in raw data coordinates (toy points denormalized).
    pub fn raw(&self, records: &Tensor) -> Result<Tensor> {
        let Some(norm) = &self.normalization else {
            return Ok(records.clone());
        };
        let mut pts = unpack_points(records)?;
        for r in 0..pts.records() {
            norm.denormalize(pts.record_mut(r));
        }
        pack_points(&pts, records.shape()[2], records.shape()[3])
    }

    /// Held-out records of class `c`.
    pub fn heldout_class(&self, c: usize) -> Tensor {
        let rows: Vec<usize> = (0..self.heldout.records())
            .filter(|&r| self.heldout_labels[r] == c)
            .collect();
        self.heldout.select_records(&rows)
    }
}

/// Null level of the evaluation metric: energy distance between the two
/// halves of each class's held-out records in raw coordinates, averaged over
/// classes.
pub fn heldout_null(data: &TrainData, classes: usize) -> Result<f64> {
    let mut total = 0.0;
    for c in 0..classes {
        let held = data.raw(&data.heldout_class(c))?;
        let half = held.records() / 2;
        if half == 0 {
            return Err(Error::Precondition(format!("class {c} has fewer than 2 held-out records")));
        }
        let a: Vec<usize> = (0..half).collect();
        let b: Vec<usize> = (half..2 * half).collect();
        total += energy_distance(&held.select_records(&a), &held.select_records(&b))?;
    }
    Ok(total / classes as f64)
}

/// AdamW moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Update number `t` (1-based) with decoupled weight decay.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64, cfg: &AdamConfig, t: u64) {
        let b1t = 1.0 - cfg.beta1.powf(t as f64);
        let b2t = 1.0 - cfg.beta2.powf(t as f64);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * params[i]);
        }
    }

    fn to_tensor(&self) -> Tensor {
        let mut d = self.m.clone();
        d.extend_from_slice(&self.v);
        Tensor::from_vec([2, self.m.len()], d).expect("moment shape")
    }

    fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        if t.shape() != [2, n] {
            return Err(Error::ShapeMismatch(format!(
                "optimizer state {:?} for {n} parameters",
                t.shape()
            )));
        }
        Ok(Self {
            m: t.record(0).to_vec(),
            v: t.record(1).to_vec(),
        })
    }
}

/// One evaluation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub energy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Loss of update `i + 1` at index `i`.
    pub losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub step_seconds: Vec<f64>,
    /// Held-out half-vs-half energy distance.
    pub null: f64,
    /// Pass threshold, twice the null.
    pub tau: f64,
}

impl TrainLog {
    /// `step,loss,metric` with the metric empty between evaluations.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,metric\n");
        let mut evals = self.evals.iter().peekable();
        if let Some(e) = evals.next_if(|e| e.step == 0) {
            let _ = writeln!(s, "0,,{}", e.energy);
        }
        for (i, l) in self.losses.iter().enumerate() {
            let step = i as u64 + 1;
            match evals.next_if(|e| e.step == step) {
                Some(e) => {
                    let _ = writeln!(s, "{step},{l},{}", e.energy);
                }
                None => {
                    let _ = writeln!(s, "{step},{l},");
                }
            }
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("step,seconds\n");
        for (i, t) in self.step_seconds.iter().enumerate() {
            let _ = writeln!(s, "{},{t}", i + 1);
        }
        s
    }

    pub fn final_energy(&self) -> Option<f64> {
        self.evals.last().map(|e| e.energy)
    }

    /// Trailing `window`-step mean loss ending at update `step`.
    pub fn moving_average(&self, step: usize, window: usize) -> Option<f64> {
        if step < window || step > self.losses.len() {
            return None;
        }
        Some(self.losses[step - window..step].iter().sum::<f64>() / window as f64)
    }
}

/// Optimization state for one configuration.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Updates applied so far.
    pub step: u64,
    pub data: TrainData,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let data = build_data(&cfg.dataset, cfg.seed)?;
        let mut init = RandomSource::new(cfg.seed).child(INIT_STREAM);
        let params = ModelParams::init(cfg.model_spec(), &mut init)?;
        let adam = AdamState::new(params.len());
        Ok(Self {
            cfg,
            params,
            adam,
            step: 0,
            data,
        })
    }

    pub fn record_shape(&self) -> Vec<usize> {
        self.cfg.dataset.layout().record_shape()
    }

    /// Batch for update number `step + 1`; depends only on the seed and step.
    pub fn draw_batch(&self, step: u64) -> Result<SampleBatch> {
        let s = RandomSource::new(self.cfg.seed).child(STEP_STREAM).child(step);
        let b = self.cfg.batch_size;
        let n = self.data.train.records();
        let mut pick = s.child(0);
        let rows: Vec<usize> = (0..b).map(|_| pick.below(n)).collect();
        let x1 = self.data.train.select_records(&rows);
        let labels = rows.iter().map(|&r| self.data.train_labels[r]).collect();
        let z = sample_normal(&mut s.child(1), x1.shape());
        let t = sample_timesteps(&self.cfg.unsync_config(), b, &s.child(2))?;
        SampleBatch::build(z, x1, t, labels, self.cfg.prediction, self.cfg.compensate)
    }

    /// One AdamW update; returns the batch loss before the update.
    pub fn train_step(&mut self) -> Result<f64> {
        let batch = self.draw_batch(self.step)?;
        let (loss, grad) = loss_and_grad(&self.params, &batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: self.step + 1,
                dump: batch_dump(&batch),
            });
        }
        self.step += 1;
        self.adam
            .update(&mut self.params.values, &grad, self.cfg.learning_rate, &self.cfg.adam, self.step);
        Ok(loss)
    }

    /// Energy distance in raw coordinates between `eval_samples` fresh
    /// samples and the held-out records, averaged over classes.
    pub fn evaluate(&self) -> Result<f64> {
        let src = RandomSource::new(self.cfg.seed).child(EVAL_STREAM);
        let classes = self.cfg.dataset.n_classes();
        let n = self.cfg.eval_samples;
        let mut total = 0.0;
        for c in 0..classes {
            let reference = self.data.raw(&self.data.heldout_class(c))?;
            let samples = match &self.cfg.dataset {
                DatasetConfig::Toy { .. } => {
                    let model = ShapedModel {
                        params: &self.params,
                        record_shape: self.record_shape(),
                    };
                    let scfg = SamplerConfig {
                        steps: self.cfg.eval_steps,
                        prediction: self.cfg.prediction,
                        ..Default::default()
                    };
                    sample_sync(&model, n, &scfg, c, &src.child(c as u64))?
                }
                DatasetConfig::Structured { spec, .. } => sample_structured(
                    &self.params,
                    spec,
                    n,
                    self.cfg.eval_steps,
                    c,
                    &src.child(c as u64),
                    0.5,
                )?,
            };
            total += energy_distance(&self.data.raw(&samples)?, &reference)?;
        }
        Ok(total / classes as f64)
    }

    pub fn header(&self) -> Result<CheckpointHeader> {
        Ok(CheckpointHeader {
            spec: self.params.spec.clone(),
            seed: self.cfg.seed,
            step: self.step,
            n_params: self.params.len(),
            extra: serde_json::json!({
                "config": self.cfg,
                "normalization": self.data.normalization,
            }),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.params, &self.header()?, Some(&self.adam.to_tensor()))
    }

    /// Restores a trainer saved with [`Trainer::save`]; the dataset is
    /// regenerated from the stored config.
    pub fn load(dir: &Path) -> Result<Self> {
        let (params, header, optim) = load_checkpoint(dir)?;
        let cfg: TrainConfig = serde_json::from_value(header.extra["config"].clone())?;
        let data = build_data(&cfg.dataset, cfg.seed)?;
        let adam = match optim {
            Some(t) => AdamState::from_tensor(&t, params.len())?,
            None => AdamState::new(params.len()),
        };
        Ok(Self {
            cfg,
            params,
            adam,
            step: header.step,
            data,
        })
    }
}

fn batch_dump(batch: &SampleBatch) -> String {
    serde_json::json!({
        "x1": batch.x1.data(),
        "z": batch.z.data(),
        "t": batch.t.data(),
        "target": batch.target.data(),
        "shape": batch.x1.shape(),
    })
    .to_string()
}

/// Runs `cfg.steps` updates with periodic evaluation. Writes the checkpoint
/// and logs into `out` when given.
pub fn train_run(cfg: &TrainConfig, out: Option<&Path>) -> Result<(ModelParams, TrainLog)> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut log = TrainLog::default();
    let evaluating = cfg.eval_samples > 0 && trainer.data.heldout.records() > 0;
    if evaluating {
        log.null = heldout_null(&trainer.data, cfg.dataset.n_classes())?;
        log.tau = 2.0 * log.null;
    }
    for _ in 0..cfg.steps {
        let start = Instant::now();
        let loss = trainer.train_step()?;
        log.step_seconds.push(start.elapsed().as_secs_f64());
        log.losses.push(loss);
        let at_eval = cfg.eval_every > 0 && trainer.step % cfg.eval_every == 0;
        if evaluating && (at_eval || trainer.step == cfg.steps) {
            log.evals.push(EvalPoint {
                step: trainer.step,
                energy: trainer.evaluate()?,
            });
        }
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        trainer.save(&dir.join("checkpoint"))?;
        std::fs::write(dir.join("log.csv"), log.to_csv())?;
        std::fs::write(dir.join("timing.csv"), log.timing_csv())?;
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&serde_json::json!({
                "mode": cfg.unsync.mode.name(),
                "seed": cfg.seed,
                "steps": cfg.steps,
                "null": log.null,
                "tau": log.tau,
                "evals": log.evals,
                "final_energy": log.final_energy(),
            }))?,
        )?;
    }
    Ok((trainer.params, log))
}

/// Trains one run per mode with otherwise identical settings; run outputs go
/// to `out/<mode>` when given.
pub fn train_sweep(
    cfg: &TrainConfig,
    modes: &[UnsyncMode],
    out: Option<&Path>,
) -> Result<Vec<(UnsyncMode, ModelParams, TrainLog)>> {
    modes
        .iter()
        .map(|&mode| {
            let mut c = cfg.clone();
            c.unsync.mode = mode;
            let dir = out.map(|d| d.join(mode.name()));
            let (p, log) = train_run(&c, dir.as_deref())?;
            Ok((mode, p, log))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_cfg() -> TrainConfig {
        TrainConfig {
            dataset: DatasetConfig::Toy {
                toy: ToyKind::from_name("two_moons").unwrap(),
                size: 256,
                heldout: 64,
                pack: [1, 2],
            },
            unsync: UnsyncSettings {
                mode: UnsyncMode::All,
                mix_fraction: 0.5,
                blend: 0.0,
            },
            prediction: PredictionKind::Velocity,
            compensate: true,
            learning_rate: 1e-3,
            batch_size: 16,
            steps: 5,
            seed: 3,
            eval_every: 0,
            eval_samples: 32,
            eval_steps: 5,
            model: ModelConfig {
                hidden: vec![16, 16],
                ..Default::default()
            },
            adam: AdamConfig::default(),
        }
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let mut cfg = small_cfg();
        cfg.steps = 0;
        let (p, log) = train_run(&cfg, None).unwrap();
        assert_eq!(p, Trainer::new(cfg).unwrap().params);
        assert!(log.losses.is_empty() && log.evals.is_empty());
    }

    #[test]
    fn first_loss_is_mean_target_norm() {
        let mut t = Trainer::new(small_cfg()).unwrap();
        let batch = t.draw_batch(0).unwrap();
        let expected = batch.target.data().iter().map(|v| v * v).sum::<f64>() / batch.len() as f64;
        let loss = t.train_step().unwrap();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let mut cfg = small_cfg();
        cfg.learning_rate = 0.0;
        let mut t = Trainer::new(cfg).unwrap();
        let before = t.params.clone();
        t.train_step().unwrap();
        t.train_step().unwrap();
        assert_eq!(t.params, before);
    }

    #[test]
    fn deterministic_losses() {
        let a = train_run(&small_cfg(), None).unwrap().1.losses;
        let b = train_run(&small_cfg(), None).unwrap().1.losses;
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_resume_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Trainer::new(small_cfg()).unwrap();
        for _ in 0..3 {
            a.train_step().unwrap();
        }
        a.save(dir.path()).unwrap();
        let mut b = Trainer::load(dir.path()).unwrap();
        let la = a.train_step().unwrap();
        let lb = b.train_step().unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.params, b.params);
        assert_eq!(a.adam, b.adam);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = small_cfg();
        cfg.batch_size = 0;
        assert!(matches!(Trainer::new(cfg).err(), Some(Error::InvalidConfig(_))));
        let mut cfg = small_cfg();
        cfg.unsync.mode = UnsyncMode::Part;
        assert!(Trainer::new(cfg).is_err());
    }

    #[test]
    fn log_csv_layout() {
        let mut cfg = small_cfg();
        cfg.steps = 4;
        cfg.eval_every = 2;
        let (_, log) = train_run(&cfg, None).unwrap();
        assert_eq!(log.evals.len(), 2);
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[1].ends_with(','));
        assert!(!lines[2].ends_with(','));
        assert!(log.tau > 0.0 && (log.tau - 2.0 * log.null).abs() == 0.0);
    }
}
