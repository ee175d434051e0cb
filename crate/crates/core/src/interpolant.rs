//! Diffused samples under vectorized timesteps, regression targets, and the
//! two velocity corrections for off-diagonal sample points.
//!
//! A record `x` is interpolated entrywise as `x_t = (1 - t) ⊙ z + t ⊙ x1`,
//! where `t` is a tensor broadcastable to `x`. How finely `t` is split across
//! the record is chosen by [`UnsyncMode`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::scalar::Scalar;
use crate::tensor::{dot, Tensor};

/// Pairs with `‖x1 − z‖` below this have no usable diagonal direction.
pub const DEGENERATE_PAIR_EPS: f64 = 1e-12;
/// `cone_velocity` refuses schedules whose slowest entry is this close to 1.
pub const SCHEDULER_AT_ONE_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnsyncMode {
    None,
    /// Grid only: one timestep per spatial position.
    Patch,
    /// One timestep per channel (grid) or per attribute dimension (structured).
    Vec,
    All,
    /// Structured only: one timestep per part token.
    Part,
    /// Structured only: one timestep per attribute segment `[s, b, e]`.
    Att,
    /// Structured only: one timestep per (part, segment).
    AttPart,
}

impl UnsyncMode {
    pub const GRID: [UnsyncMode; 4] = [Self::None, Self::Patch, Self::Vec, Self::All];
    pub const STRUCTURED: [UnsyncMode; 6] = [
        Self::None,
        Self::Part,
        Self::Att,
        Self::AttPart,
        Self::Vec,
        Self::All,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Patch => "patch",
            Self::Vec => "vec",
            Self::All => "all",
            Self::Part => "part",
            Self::Att => "att",
            Self::AttPart => "att_part",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let all = [
            Self::None,
            Self::Patch,
            Self::Vec,
            Self::All,
            Self::Part,
            Self::Att,
            Self::AttPart,
        ];
        all.into_iter()
            .find(|m| m.name() == s || format!("unsync_{}", m.name()) == s)
            .ok_or_else(|| Error::UnknownKind(s.to_string()))
    }
}

/// Which axes of a record are spatial, channel, part or attribute.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataLayout {
    /// Records of shape `(C, H, W)`.
    Grid {
        channels: usize,
        height: usize,
        width: usize,
    },
    /// Records of shape `(L, V)` with `V = 1 + bbox_width + code_width`, the
    /// concatenation of existence, bounding box and shape code.
    Structured {
        parts: usize,
        bbox_width: usize,
        code_width: usize,
    },
}

impl DataLayout {
    /// 2D points stored as a `(2, 1, 1)` grid.
    pub fn points2d() -> Self {
        DataLayout::Grid {
            channels: 2,
            height: 1,
            width: 1,
        }
    }

    pub fn record_shape(&self) -> Vec<usize> {
        match *self {
            DataLayout::Grid {
                channels,
                height,
                width,
            } => vec![channels, height, width],
            DataLayout::Structured { parts, .. } => vec![parts, self.token_width()],
        }
    }

    pub fn record_len(&self) -> usize {
        self.record_shape().iter().product()
    }

    pub fn batch_shape(&self, n: usize) -> Vec<usize> {
        let mut s = vec![n];
        s.extend(self.record_shape());
        s
    }

    /// Token width `V` for structured layouts, 0 for grids.
    pub fn token_width(&self) -> usize {
        match *self {
            DataLayout::Grid { .. } => 0,
            DataLayout::Structured {
                bbox_width,
                code_width,
                ..
            } => 1 + bbox_width + code_width,
        }
    }

    /// Column ranges of the existence, bounding-box and shape-code segments.
    pub fn segments(&self) -> Option<[std::ops::Range<usize>; 3]> {
        match *self {
            DataLayout::Grid { .. } => None,
            DataLayout::Structured {
                bbox_width,
                code_width,
                ..
            } => Some([
                0..1,
                1..1 + bbox_width,
                1 + bbox_width..1 + bbox_width + code_width,
            ]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            DataLayout::Grid {
                channels,
                height,
                width,
            } => channels > 0 && height > 0 && width > 0,
            DataLayout::Structured {
                parts,
                bbox_width,
                code_width,
            } => parts > 0 && bbox_width > 0 && code_width > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("empty axis in layout {self:?}")))
        }
    }
}

/// Timestep-splitting configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnsyncConfig {
    pub mode: UnsyncMode,
    /// Leading fraction of each batch that keeps one scalar timestep per record.
    #[serde(default)]
    pub mix_fraction: f64,
    /// Pulls split timesteps toward a per-record scalar: `(1 − β)·u + β·s`.
    /// Zero disables blending.
    #[serde(default)]
    pub blend: f64,
    pub layout: DataLayout,
}

impl UnsyncConfig {
    pub fn new(mode: UnsyncMode, layout: DataLayout) -> Self {
        Self {
            mode,
            mix_fraction: 0.0,
            blend: 0.0,
            layout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if !(0.0..=1.0).contains(&self.mix_fraction) {
            return Err(Error::InvalidConfig(format!(
                "mix_fraction {} outside [0, 1]",
                self.mix_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.blend) {
            return Err(Error::InvalidConfig(format!(
                "blend {} outside [0, 1]",
                self.blend
            )));
        }
        let allowed: &[UnsyncMode] = match self.layout {
            DataLayout::Grid { .. } => &UnsyncMode::GRID,
            DataLayout::Structured { .. } => &UnsyncMode::STRUCTURED,
        };
        if !allowed.contains(&self.mode) {
            return Err(Error::InvalidConfig(format!(
                "mode `{}` does not apply to layout {:?}",
                self.mode.name(),
                self.layout
            )));
        }
        Ok(())
    }

    /// Timestep tensor shape for a batch of `n`, as tabulated per mode. For the
    /// attribute modes the last axis counts segments (3), not columns.
    pub fn timestep_shape(&self, n: usize) -> Vec<usize> {
        use UnsyncMode::*;
        match self.layout {
            DataLayout::Grid {
                channels: c,
                height: h,
                width: w,
            } => match self.mode {
                Patch => vec![n, 1, h, w],
                Vec => vec![n, c, 1, 1],
                All => vec![n, c, h, w],
                _ => vec![n, 1, 1, 1],
            },
            DataLayout::Structured { parts: l, .. } => {
                let v = self.layout.token_width();
                match self.mode {
                    Part => vec![n, l, 1],
                    Att => vec![n, 1, 3],
                    AttPart => vec![n, l, 3],
                    Vec => vec![n, 1, v],
                    All => vec![n, l, v],
                    _ => vec![n, 1, 1],
                }
            }
        }
    }

    /// Shape of the tensor [`sample_timesteps`] returns: the tabulated shape
    /// with any segment axis expanded to the full token width.
    pub fn broadcast_timestep_shape(&self, n: usize) -> Vec<usize> {
        let mut shape = self.timestep_shape(n);
        if matches!(self.mode, UnsyncMode::Att | UnsyncMode::AttPart) {
            shape[2] = self.layout.token_width();
        }
        shape
    }

    /// Number of leading records that receive a synchronized timestep.
    pub fn synchronized_count(&self, n: usize) -> usize {
        ((self.mix_fraction * n as f64).ceil() as usize).min(n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionKind {
    /// Regress the interpolation velocity `x1 − z`.
    Velocity,
    /// Regress the data sample `x1`.
    Data,
}

/// Draws a timestep tensor for `batch_size` records. Record `r` draws from
/// `source.child(r)`, so the values do not depend on batch order.
pub fn sample_timesteps(
    cfg: &UnsyncConfig,
    batch_size: usize,
    source: &RandomSource,
) -> Result<Tensor> {
    cfg.validate()?;
    let logical = cfg.timestep_shape(batch_size);
    let out_shape = cfg.broadcast_timestep_shape(batch_size);
    let per_logical: usize = logical[1..].iter().product();
    let per_record: usize = out_shape[1..].iter().product();
    let n_sync = cfg.synchronized_count(batch_size);
    let segments = cfg.layout.segments();
    let expand = per_logical != per_record;

    let mut data = Vec::with_capacity(batch_size * per_record);
    for r in 0..batch_size {
        let mut rng = source.child(r as u64);
        let shared = rng.uniform();
        if r < n_sync {
            data.extend(std::iter::repeat_n(shared, per_record));
            continue;
        }
        let mut vals: Vec<f64> = (0..per_logical).map(|_| rng.uniform()).collect();
        if cfg.blend > 0.0 {
            for v in &mut vals {
                *v = (1.0 - cfg.blend) * *v + cfg.blend * shared;
            }
        }
        if expand {
            // (rows, 3) segment values -> (rows, V) columns.
            let segs = segments.as_ref().expect("segment modes are structured");
            for row in vals.chunks(3) {
                for (k, seg) in segs.iter().enumerate() {
                    data.extend(std::iter::repeat_n(row[k], seg.len()));
                }
            }
        } else {
            data.extend(vals);
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// `(1 − t) ⊙ z + t ⊙ x1`.
pub fn interpolate<T: Scalar>(z: &Tensor<T>, x1: &Tensor<T>, t: &Tensor<T>) -> Result<Tensor<T>> {
    if z.shape() != x1.shape() {
        return Err(Error::IncompatibleShapes {
            a: z.shape().to_vec(),
            b: x1.shape().to_vec(),
        });
    }
    let t = t.broadcast_to(z.shape())?;
    let data = z
        .data()
        .iter()
        .zip(x1.data())
        .zip(t.data())
        .map(|((&zi, &xi), &ti)| (T::one() - ti) * zi + ti * xi)
        .collect();
    Tensor::from_vec(z.shape().to_vec(), data)
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::IncompatibleShapes {
            a: a.shape().to_vec(),
            b: b.shape().to_vec(),
        })
    }
}

fn drift_offset_slice<T: Scalar>(x_t: &[T], z: &[T], x1: &[T], out: &mut [T]) -> Result<()> {
    let diag: Vec<T> = x1.iter().zip(z).map(|(&a, &b)| a - b).collect();
    let len_sq = dot(&diag, &diag);
    let len = len_sq.sqrt().to_f64_lossy();
    if len < DEGENERATE_PAIR_EPS {
        return Err(Error::DegeneratePair { distance: len });
    }
    let rel: Vec<T> = x_t.iter().zip(x1).map(|(&a, &b)| a - b).collect();
    let coef = dot(&rel, &diag) / len_sq;
    for ((o, &r), &d) in out.iter_mut().zip(&rel).zip(&diag) {
        *o = r - coef * d;
    }
    Ok(())
}

/// Component of `x_t − x1` orthogonal to the diagonal direction `x1 − z`,
/// treating the whole tensor as one vector.
pub fn drift_offset<T: Scalar>(x_t: &Tensor<T>, z: &Tensor<T>, x1: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(x_t, z)?;
    same_shape(z, x1)?;
    let mut out = Tensor::zeros(x_t.shape().to_vec());
    drift_offset_slice(x_t.data(), z.data(), x1.data(), out.data_mut())?;
    Ok(out)
}

/// Negated drift offset: pulls `x_t` back toward the diagonal.
pub fn compensation_velocity<T: Scalar>(
    x_t: &Tensor<T>,
    z: &Tensor<T>,
    x1: &Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(drift_offset(x_t, z, x1)?.map(|v| -v))
}

/// [`compensation_velocity`] applied per leading-axis record.
pub fn compensation_velocity_records<T: Scalar>(
    x_t: &Tensor<T>,
    z: &Tensor<T>,
    x1: &Tensor<T>,
) -> Result<Tensor<T>> {
    same_shape(x_t, z)?;
    same_shape(z, x1)?;
    let mut out = Tensor::zeros(x_t.shape().to_vec());
    for r in 0..x_t.records() {
        drift_offset_slice(x_t.record(r), z.record(r), x1.record(r), out.record_mut(r))?;
    }
    Ok(out.map(|v| -v))
}

/// Velocity `(x1 − x_t0) / (1 − min t0)`, whose integral curves reach `x1`
/// from any point of the span.
pub fn cone_velocity<T: Scalar>(x_t0: &Tensor<T>, x1: &Tensor<T>, t0: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(x_t0, x1)?;
    let min_t = t0
        .min()
        .ok_or_else(|| Error::Precondition("empty timestep tensor".into()))?;
    if min_t.to_f64_lossy() >= 1.0 - SCHEDULER_AT_ONE_EPS {
        return Err(Error::SchedulerAtOne {
            min_t: min_t.to_f64_lossy(),
        });
    }
    let denom = T::one() - min_t;
    x1.zip_with(x_t0, |a, b| (a - b) / denom)
}

/// Euler integration of the single-pair target field from `x_t0`, every
/// entry moving on the shared clock `[min t0, 1]` until the slowest entry
/// finishes. The field is `x1 − z`, plus `v_cmpn(x)` at the current point
/// when `compensate` is set.
pub fn integrate_pair_field(
    x_t0: &Tensor,
    z: &Tensor,
    x1: &Tensor,
    t0: &Tensor,
    steps: usize,
    compensate: bool,
) -> Result<Tensor> {
    same_shape(x_t0, z)?;
    same_shape(z, x1)?;
    if steps == 0 {
        return Err(Error::InvalidConfig("integration needs at least one step".into()));
    }
    let min_t = t0
        .min()
        .ok_or_else(|| Error::Precondition("empty timestep tensor".into()))?;
    let dt = (1.0 - min_t) / steps as f64;
    let base = x1.sub(z)?;
    let mut x = x_t0.clone();
    for _ in 0..steps {
        let v = if compensate {
            base.add(&compensation_velocity(&x, z, x1)?)?
        } else {
            base.clone()
        };
        x = x.add(&v.scale(dt))?;
    }
    Ok(x)
}

/// Regression target for one batch, per leading-axis record.
pub fn regression_target<T: Scalar>(
    kind: PredictionKind,
    z: &Tensor<T>,
    x1: &Tensor<T>,
    x_t: &Tensor<T>,
    compensate: bool,
) -> Result<Tensor<T>> {
    same_shape(z, x1)?;
    same_shape(z, x_t)?;
    match kind {
        PredictionKind::Data => Ok(x1.clone()),
        PredictionKind::Velocity => {
            let v = x1.sub(z)?;
            if compensate {
                v.add(&compensation_velocity_records(x_t, z, x1)?)
            } else {
                Ok(v)
            }
        }
    }
}

/// One training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub z: Tensor,
    pub x1: Tensor,
    /// Timesteps, broadcastable to `x1`.
    pub t: Tensor,
    pub x_t: Tensor,
    pub target: Tensor,
    pub class_labels: Vec<usize>,
    pub prediction: PredictionKind,
}

impl SampleBatch {
    /// Interpolates and builds targets. Records whose pair is degenerate are
    /// dropped when compensation needs their diagonal.
    pub fn build(
        z: Tensor,
        x1: Tensor,
        t: Tensor,
        class_labels: Vec<usize>,
        prediction: PredictionKind,
        compensate: bool,
    ) -> Result<Self> {
        same_shape(&z, &x1)?;
        if class_labels.len() != z.records() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} records",
                class_labels.len(),
                z.records()
            )));
        }
        let t = t.broadcast_to(z.shape())?;
        let needs_diag = compensate && prediction == PredictionKind::Velocity;
        let keep: Vec<usize> = (0..z.records())
            .filter(|&r| {
                !needs_diag || {
                    let d: f64 = z
                        .record(r)
                        .iter()
                        .zip(x1.record(r))
                        .map(|(a, b)| (b - a) * (b - a))
                        .sum();
                    d.sqrt() >= DEGENERATE_PAIR_EPS
                }
            })
            .collect();
        let (z, x1, t, class_labels) = if keep.len() == z.records() {
            (z, x1, t, class_labels)
        } else {
            (
                z.select_records(&keep),
                x1.select_records(&keep),
                t.select_records(&keep),
                keep.iter().map(|&r| class_labels[r]).collect(),
            )
        };
        let x_t = interpolate(&z, &x1, &t)?;
        let target = regression_target(prediction, &z, &x1, &x_t, compensate)?;
        Ok(Self {
            z,
            x1,
            t,
            x_t,
            target,
            class_labels,
            prediction,
        })
    }

    pub fn len(&self) -> usize {
        self.x1.records()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
