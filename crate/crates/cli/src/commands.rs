//! The six subcommands. Each resolves its typed config, writes the resolved
//! echo to `<out>/config.json`, then its artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use combostoc::data::{parts_to_record, record_to_parts, structure_validity, PartRecord, StructuredSpec};
use combostoc::interpolant::UnsyncMode;
use combostoc::metrics::energy_distance;
use combostoc::pathspace::{
    density_grid, gradient_identity_table, GridSpec, ParticleExperiment, PathMode, Point, SourceSpec,
};
use combostoc::regressor::HEADER_FILE;
use combostoc::sampler::{
    assemble_parts, assembly_drift, assembly_mask, sample_graded, sample_structured, sample_sync, FreezeSet,
    GradedMask, SamplerConfig, ShapedModel, StepScheme,
};
use combostoc::trainer::{heldout_null, train_run, DatasetConfig, TrainConfig, TrainLog, Trainer};
use combostoc::{RandomSource, Tensor};

use crate::config::{CliResult, Failure};
use crate::plot::{line_plot, smooth, Series};

fn one() -> usize {
    1
}

fn typed<T: DeserializeOwned>(v: Value) -> CliResult<T> {
    Ok(serde_json::from_value(v)?)
}

fn check_threads(threads: usize) -> CliResult<()> {
    if threads == 0 {
        return Err(Failure::Config("threads must be at least 1".into()));
    }
    Ok(())
}

/// Creates `out` and writes the resolved config echo.
fn prepare<T: Serialize>(out: &Path, cfg: &T) -> CliResult<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(())
}

fn write_json(path: &Path, v: &Value) -> CliResult<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Missing(format!("{what} {} not found", path.display())))
    }
}

fn load_trainer(dir: &Path) -> CliResult<Trainer> {
    require(&dir.join(HEADER_FILE), "checkpoint")?;
    Ok(Trainer::load(dir)?)
}

fn read_tensor(path: &Path, what: &str) -> CliResult<Tensor> {
    require(path, what)?;
    Ok(Tensor::read_csv(path)?)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

// ---------------------------------------------------------------- density

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapGrid {
    pub lo: Point,
    pub hi: Point,
    pub nx: usize,
    pub ny: usize,
}

impl Default for MapGrid {
    fn default() -> Self {
        Self {
            lo: [-1.5, -1.5],
            hi: [2.5, 2.5],
            nx: 80,
            ny: 80,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientTable {
    pub points: usize,
    pub h: f64,
    pub n_nodes: usize,
}

impl Default for GradientTable {
    fn default() -> Self {
        Self {
            points: 100,
            h: 1e-4,
            n_nodes: 2000,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityCmd {
    #[serde(default)]
    pub seed: u64,
    pub out: PathBuf,
    #[serde(default = "one")]
    pub threads: usize,
    pub x1: Point,
    #[serde(default = "standard_normal")]
    pub source: SourceSpec,
    #[serde(default)]
    pub grid: MapGrid,
    #[serde(default = "default_pairs")]
    pub n_pairs: usize,
    /// Disc radius for the near-target versus span-center comparison.
    #[serde(default = "default_disc")]
    pub disc_radius: f64,
    /// Gradient identity at random span points, with `z` the source mean.
    #[serde(default)]
    pub gradient: GradientTable,
}

fn standard_normal() -> SourceSpec {
    SourceSpec::StandardNormal
}
fn default_pairs() -> usize {
    200_000
}
fn default_disc() -> f64 {
    0.2
}

pub fn density(v: Value) -> CliResult<()> {
    let cfg: DensityCmd = typed(v)?;
    check_threads(cfg.threads)?;
    prepare(&cfg.out, &cfg)?;
    let grid = GridSpec::cells(cfg.grid.lo, cfg.grid.hi, cfg.grid.nx, cfg.grid.ny);
    grid.validate()?;
    let root = RandomSource::new(cfg.seed);
    let z = cfg.source.mean();
    let center = [(z[0] + cfg.x1[0]) / 2.0, (z[1] + cfg.x1[1]) / 2.0];
    let mut ratios = serde_json::Map::new();
    for (i, mode) in PathMode::ALL.into_iter().enumerate() {
        let map = density_grid(&cfg.source, cfg.x1, &grid, mode, cfg.n_pairs, &root.child(i as u64))?;
        let name = mode.name();
        map.write(
            &cfg.out.join(format!("density_{name}.csv")),
            &cfg.out.join(format!("density_{name}.pgm")),
        )?;
        // A grid too coarse to place a cell center inside a disc reports null.
        let near = map.annulus_mean(cfg.x1, 0.0, cfg.disc_radius).ok();
        let mid = map.annulus_mean(center, 0.0, cfg.disc_radius).ok();
        let ratio = match (near, mid) {
            (Some(a), Some(b)) if b > 0.0 => Some(a / b),
            _ => None,
        };
        ratios.insert(
            name.into(),
            json!({"near_target": near, "span_center": mid, "ratio": ratio}),
        );
    }
    let g = &cfg.gradient;
    let table = gradient_identity_table(z, cfg.x1, g.points, g.h, g.n_nodes, &root.child(2))?;
    let mut csv = String::from("x,y,projection,rhs,residual\n");
    for r in &table {
        let _ = writeln!(csv, "{},{},{},{},{}", r.x[0], r.x[1], r.projection, r.rhs, r.residual);
    }
    std::fs::write(cfg.out.join("gradient_identity.csv"), csv)?;
    let max_residual = table.iter().map(|r| r.residual).fold(0.0, f64::max);
    let min_projection = table.iter().map(|r| r.projection).fold(f64::INFINITY, f64::min);
    let fm_ratio = ratios["fm"]["ratio"].as_f64();
    write_json(
        &cfg.out.join("report.json"),
        &json!({
            "seed": cfg.seed,
            "density": ratios,
            "fm_near_target_at_least_twice_center": fm_ratio.map(|r| r >= 2.0),
            "gradient_identity": {
                "points": table.len(),
                "max_residual": max_residual,
                "min_projection": if table.is_empty() { None } else { Some(min_projection) },
                "all_projections_positive": table.iter().all(|r| r.projection > 0.0),
            },
        }),
    )
}

// -------------------------------------------------------------- particles

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticlesCmd {
    #[serde(default)]
    pub seed: u64,
    pub out: PathBuf,
    #[serde(default = "one")]
    pub threads: usize,
    #[serde(default)]
    pub experiment: ParticleExperiment,
}

pub fn particles(v: Value) -> CliResult<()> {
    let cfg: ParticlesCmd = typed(v)?;
    check_threads(cfg.threads)?;
    prepare(&cfg.out, &cfg)?;
    let runs = cfg.experiment.run(&RandomSource::new(cfg.seed))?;
    let mut counts = serde_json::Map::new();
    for run in &runs {
        let name = run.mode.name();
        std::fs::write(cfg.out.join(format!("field_{name}.csv")), run.field.to_csv_string())?;
        std::fs::write(
            cfg.out.join(format!("trajectories_{name}.csv")),
            run.particles.trajectory_csv(),
        )?;
        counts.insert(name.into(), json!(run.outliers));
    }
    let fm = runs.iter().find(|r| r.mode == PathMode::Fm).map(|r| r.outliers);
    let cs = runs.iter().find(|r| r.mode == PathMode::Combostoc).map(|r| r.outliers);
    write_json(
        &cfg.out.join("summary.json"),
        &json!({
            "seed": cfg.seed,
            "experiment": cfg.experiment,
            "outliers": counts,
            "combostoc_at_most_fm": cs <= fm,
            "combostoc_fewer_than_fm": cs < fm,
        }),
    )
}

// ------------------------------------------------------------------ train

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainCmd {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub out: PathBuf,
    #[serde(default = "one")]
    pub threads: usize,
    /// Modes to sweep with otherwise identical settings; empty trains the
    /// configured mode once.
    #[serde(default)]
    pub sweep: Vec<UnsyncMode>,
}

fn loss_plot(path: &Path, title: &str, runs: &[(String, &TrainLog)]) -> CliResult<()> {
    let series: Vec<Series> = runs
        .iter()
        .map(|(name, log)| Series {
            name: name.clone(),
            points: smooth(&log.losses, 100)
                .into_iter()
                .enumerate()
                .map(|(i, l)| ((i + 1) as f64, l))
                .collect(),
        })
        .collect();
    std::fs::write(path, line_plot(title, "step", "loss (100-step mean)", &series, false))?;
    Ok(())
}

fn metric_plot(path: &Path, title: &str, runs: &[(String, &TrainLog)]) -> CliResult<()> {
    let mut series: Vec<Series> = runs
        .iter()
        .map(|(name, log)| Series {
            name: name.clone(),
            points: log.evals.iter().map(|e| (e.step as f64, e.energy)).collect(),
        })
        .collect();
    if let Some((_, log)) = runs.first() {
        let last = log.losses.len().max(1) as f64;
        series.push(Series {
            name: "tau".into(),
            points: vec![(0.0, log.tau), (last, log.tau)],
        });
    }
    std::fs::write(path, line_plot(title, "step", "energy distance", &series, true))?;
    Ok(())
}

pub fn train(v: Value) -> CliResult<()> {
    let cfg: TrainCmd = typed(v)?;
    check_threads(cfg.threads)?;
    cfg.train.validate()?;
    prepare(&cfg.out, &cfg)?;
    if cfg.sweep.is_empty() {
        let (_, log) = train_run(&cfg.train, Some(&cfg.out))?;
        let name = cfg.train.unsync.mode.name().to_string();
        loss_plot(&cfg.out.join("loss.svg"), &name, &[(name.clone(), &log)])?;
        metric_plot(&cfg.out.join("metric.svg"), &name, &[(name.clone(), &log)])?;
        return Ok(());
    }
    let mut logs = Vec::new();
    for &mode in &cfg.sweep {
        let mut c = cfg.train.clone();
        c.unsync.mode = mode;
        let dir = cfg.out.join(mode.name());
        let (_, log) = train_run(&c, Some(&dir))?;
        loss_plot(&dir.join("loss.svg"), mode.name(), &[(mode.name().into(), &log)])?;
        logs.push((mode.name().to_string(), log));
    }
    let refs: Vec<(String, &TrainLog)> = logs.iter().map(|(n, l)| (n.clone(), l)).collect();
    loss_plot(&cfg.out.join("loss.svg"), "training loss", &refs)?;
    metric_plot(&cfg.out.join("metric.svg"), "energy distance to held-out data", &refs)?;
    let finals: serde_json::Map<String, Value> = logs
        .iter()
        .map(|(n, l)| (n.clone(), json!(l.final_energy())))
        .collect();
    let tau = logs.first().map(|(_, l)| l.tau);
    let below: serde_json::Map<String, Value> = logs
        .iter()
        .map(|(n, l)| (n.clone(), json!(l.final_energy().map(|e| e < l.tau))))
        .collect();
    write_json(
        &cfg.out.join("sweep.json"),
        &json!({
            "seed": cfg.train.seed,
            "steps": cfg.train.steps,
            "tau": tau,
            "final_energy": finals,
            "below_tau": below,
        }),
    )
}

// ----------------------------------------------------------------- sample

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleCmd {
    #[serde(default)]
    pub seed: u64,
    pub out: PathBuf,
    #[serde(default = "one")]
    pub threads: usize,
    pub checkpoint: PathBuf,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub label: usize,
    /// Steps double as iteration rounds for structured checkpoints; the
    /// prediction kind always follows the checkpoint.
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default = "half")]
    pub threshold: f64,
}

fn default_n() -> usize {
    2048
}
fn half() -> f64 {
    0.5
}

fn sample_header(seed: u64, s: &SamplerConfig, mask_digest: &str) -> String {
    format!(
        "# seed={seed},K={},scheme={},mask_sha256={mask_digest}\n",
        s.steps,
        serde_json::to_value(s.scheme).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
    )
}

pub fn sample(v: Value) -> CliResult<()> {
    let mut cfg: SampleCmd = typed(v)?;
    check_threads(cfg.threads)?;
    let trainer = load_trainer(&cfg.checkpoint)?;
    cfg.sampler.prediction = trainer.cfg.prediction;
    prepare(&cfg.out, &cfg)?;
    let src = RandomSource::new(cfg.seed);
    let classes = trainer.cfg.dataset.n_classes();
    if cfg.label >= classes {
        return Err(Failure::Config(format!("label {} outside 0..{classes}", cfg.label)));
    }
    let mut summary = json!({"seed": cfg.seed, "n": cfg.n, "label": cfg.label});
    let samples = match &trainer.cfg.dataset {
        DatasetConfig::Toy { .. } => {
            let model = ShapedModel {
                params: &trainer.params,
                record_shape: trainer.record_shape(),
            };
            let x = sample_sync(&model, cfg.n, &cfg.sampler, cfg.label, &src)?;
            let raw = trainer.data.raw(&x)?;
            std::fs::write(
                cfg.out.join("points.csv"),
                combostoc::data::unpack_points(&raw)?.to_csv_string(),
            )?;
            x
        }
        DatasetConfig::Structured { spec, .. } => {
            let x = sample_structured(&trainer.params, spec, cfg.n, cfg.sampler.steps, cfg.label, &src, cfg.threshold)?;
            let valid = (0..x.records())
                .filter(|&r| structure_validity(x.record(r), cfg.label, spec).binary_existence)
                .count();
            summary["binary_existence_rate"] = json!(valid as f64 / x.records().max(1) as f64);
            x
        }
    };
    let mut text = sample_header(cfg.seed, &cfg.sampler, "none");
    text.push_str(&samples.to_csv_string());
    std::fs::write(cfg.out.join("samples.csv"), text)?;
    if trainer.data.heldout.records() >= 2 && cfg.n > 0 {
        let reference = trainer.data.raw(&trainer.data.heldout_class(cfg.label))?;
        summary["energy_distance"] = json!(energy_distance(&trainer.data.raw(&samples)?, &reference)?);
        let null = heldout_null(&trainer.data, classes)?;
        summary["null"] = json!(null);
        summary["tau"] = json!(2.0 * null);
    }
    write_json(&cfg.out.join("summary.json"), &summary)
}

// ----------------------------------------------------------------- graded

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradedCmd {
    #[serde(default)]
    pub seed: u64,
    pub out: PathBuf,
    #[serde(default = "one")]
    pub threads: usize,
    pub checkpoint: PathBuf,
    /// Tensor CSV of reference records in model coordinates.
    pub reference: PathBuf,
    /// Tensor CSV of preservation weights, broadcastable to the reference.
    pub mask: PathBuf,
    #[serde(default)]
    pub label: usize,
    #[serde(default)]
    pub sampler: SamplerConfig,
}

pub fn graded(v: Value) -> CliResult<()> {
    let mut cfg: GradedCmd = typed(v)?;
    check_threads(cfg.threads)?;
    let trainer = load_trainer(&cfg.checkpoint)?;
    cfg.sampler.prediction = trainer.cfg.prediction;
    let reference = read_tensor(&cfg.reference, "reference")?;
    require(&cfg.mask, "mask")?;
    let mask_bytes = std::fs::read(&cfg.mask)?;
    let mask = GradedMask::new(Tensor::from_csv_str(&String::from_utf8_lossy(&mask_bytes))?)?;
    prepare(&cfg.out, &cfg)?;
    let model = ShapedModel {
        params: &trainer.params,
        record_shape: trainer.record_shape(),
    };
    let out = sample_graded(&model, &reference, &mask, &cfg.sampler, cfg.label, &RandomSource::new(cfg.seed))?;
    let digest = hex(&Sha256::digest(&mask_bytes));
    let mut text = sample_header(cfg.seed, &cfg.sampler, &digest);
    text.push_str(&out.x.to_csv_string());
    std::fs::write(cfg.out.join("graded.csv"), text)?;
    let us_steps = matches!(cfg.sampler.scheme, StepScheme::UniformStepsize);
    write_json(
        &cfg.out.join("summary.json"),
        &json!({
            "seed": cfg.seed,
            "steps_taken": out.steps_taken,
            "scheme_uniform_stepsize": us_steps,
            "mask_sha256": digest,
            "identical_to_reference": out.x == reference,
        }),
    )
}

// --------------------------------------------------------------- assemble

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssembleCmd {
    #[serde(default)]
    pub seed: u64,
    pub out: PathBuf,
    #[serde(default = "one")]
    pub threads: usize,
    pub checkpoint: PathBuf,
    /// JSON array of `{s, b, e}` parts.
    pub parts: PathBuf,
    #[serde(default = "default_freeze")]
    pub freeze: FreezeSet,
    #[serde(default = "default_weight")]
    pub weight: f64,
    #[serde(default)]
    pub label: usize,
    #[serde(default = "assembly_sampler")]
    pub sampler: SamplerConfig,
}

fn default_freeze() -> FreezeSet {
    FreezeSet {
        shape_code: true,
        bbox_size: true,
    }
}
fn default_weight() -> f64 {
    0.9
}
fn assembly_sampler() -> SamplerConfig {
    SamplerConfig {
        steps: 100,
        ..Default::default()
    }
}

fn structured_spec(trainer: &Trainer) -> CliResult<StructuredSpec> {
    match &trainer.cfg.dataset {
        DatasetConfig::Structured { spec, .. } => Ok(spec.clone()),
        DatasetConfig::Toy { .. } => Err(Failure::Config("assembly needs a structured checkpoint".into())),
    }
}

pub fn assemble(v: Value) -> CliResult<()> {
    let mut cfg: AssembleCmd = typed(v)?;
    check_threads(cfg.threads)?;
    let trainer = load_trainer(&cfg.checkpoint)?;
    cfg.sampler.prediction = trainer.cfg.prediction;
    let spec = structured_spec(&trainer)?;
    require(&cfg.parts, "parts file")?;
    let parts: Vec<PartRecord> = serde_json::from_str(&std::fs::read_to_string(&cfg.parts)?)?;
    let record = parts_to_record(&parts, &spec)?;
    let before = Tensor::from_vec([1, spec.parts, spec.token_width()], record)?;
    prepare(&cfg.out, &cfg)?;
    let mask = assembly_mask(&spec, cfg.freeze, cfg.weight)?;
    let model = ShapedModel {
        params: &trainer.params,
        record_shape: trainer.record_shape(),
    };
    let after = assemble_parts(&model, &before, &spec, &mask, &cfg.sampler, cfg.label, &RandomSource::new(cfg.seed))?;
    let live: Vec<PartRecord> = record_to_parts(after.record(0), &spec)
        .into_iter()
        .filter(|p| p.s >= 0.5)
        .collect();
    write_json(&cfg.out.join("assembled.json"), &serde_json::to_value(&live)?)?;
    let (frozen, free) = assembly_drift(&before, &after, &spec)?;
    let report = structure_validity(after.record(0), cfg.label, &spec);
    write_json(
        &cfg.out.join("summary.json"),
        &json!({
            "seed": cfg.seed,
            "frozen_drift": frozen,
            "free_drift": free,
            "parts_in": parts.len(),
            "parts_out": live.len(),
            "valid": report.all(),
        }),
    )
}
