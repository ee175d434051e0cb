//! Toy datasets: 2D point clouds and a synthetic part-structured object set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpolant::DataLayout;
use crate::rng::RandomSource;
use crate::tensor::Tensor;

/// 2D toy distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToyKind {
    TwoMoons {
        #[serde(default = "default_moon_noise")]
        noise: f64,
    },
    GaussMixture {
        centers: Vec<[f64; 2]>,
        #[serde(default = "default_mixture_std")]
        std: f64,
    },
    Checkerboard {
        #[serde(default = "default_board_cells")]
        cells: usize,
    },
    SinglePoint {
        #[serde(default = "default_point")]
        point: [f64; 2],
    },
}

fn default_moon_noise() -> f64 {
    0.05
}
fn default_mixture_std() -> f64 {
    0.1
}
fn default_board_cells() -> usize {
    4
}
fn default_point() -> [f64; 2] {
    [1.0, 1.0]
}

impl ToyKind {
    /// Default parameters for a kind name.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "two_moons" => ToyKind::TwoMoons {
                noise: default_moon_noise(),
            },
            "gauss_mixture" => ToyKind::GaussMixture {
                centers: (0..8)
                    .map(|k| {
                        let a = std::f64::consts::TAU * k as f64 / 8.0;
                        [2.0 * a.cos(), 2.0 * a.sin()]
                    })
                    .collect(),
                std: default_mixture_std(),
            },
            "checkerboard" => ToyKind::Checkerboard {
                cells: default_board_cells(),
            },
            "single_point" => ToyKind::SinglePoint {
                point: default_point(),
            },
            other => return Err(Error::UnknownKind(other.to_string())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ToyKind::TwoMoons { .. } => "two_moons",
            ToyKind::GaussMixture { .. } => "gauss_mixture",
            ToyKind::Checkerboard { .. } => "checkerboard",
            ToyKind::SinglePoint { .. } => "single_point",
        }
    }

    fn draw(&self, rng: &mut RandomSource) -> [f64; 2] {
        match self {
            ToyKind::TwoMoons { noise } => {
                let theta = std::f64::consts::PI * rng.uniform();
                let (x, y) = if rng.uniform() < 0.5 {
                    (theta.cos(), theta.sin())
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin())
                };
                [x + noise * rng.normal(), y + noise * rng.normal()]
            }
            ToyKind::GaussMixture { centers, std } => {
                let c = centers[rng.below(centers.len())];
                [c[0] + std * rng.normal(), c[1] + std * rng.normal()]
            }
            ToyKind::Checkerboard { cells } => {
                let n = *cells;
                loop {
                    let i = rng.below(n);
                    let j = rng.below(n);
                    if (i + j) % 2 == 0 {
                        let half = n as f64 / 2.0;
                        return [
                            i as f64 - half + rng.uniform(),
                            j as f64 - half + rng.uniform(),
                        ];
                    }
                }
            }
            ToyKind::SinglePoint { point } => *point,
        }
    }
}

/// Affine map `x ↦ (x − mean) / scale` applied to raw samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub scale: f64,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: 1.0,
        }
    }

    /// Zero mean and unit RMS distance from the mean. A point mass has no
    /// scale, so it keeps the identity map.
    pub fn fit(rows: &[[f64; 2]]) -> Self {
        let n = rows.len() as f64;
        let mut mean = [0.0; 2];
        for r in rows {
            mean[0] += r[0] / n;
            mean[1] += r[1] / n;
        }
        let ms: f64 = rows
            .iter()
            .map(|r| (r[0] - mean[0]).powi(2) + (r[1] - mean[1]).powi(2))
            .sum::<f64>()
            / n;
        if ms.sqrt() < 1e-12 {
            return Self::identity(2);
        }
        Self {
            mean: mean.to_vec(),
            scale: ms.sqrt(),
        }
    }

    pub fn normalize(&self, row: &mut [f64]) {
        for (v, m) in row.iter_mut().zip(&self.mean) {
            *v = (*v - m) / self.scale;
        }
    }

    pub fn denormalize(&self, row: &mut [f64]) {
        for (v, m) in row.iter_mut().zip(&self.mean) {
            *v = *v * self.scale + m;
        }
    }
}

/// A finite toy sample set with its normalization record.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub kind: String,
    /// `(n, 2)` for point sets, `(n, L, V)` for structured sets.
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub normalization: Normalization,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.samples.records()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Raw (pre-normalization) samples.
    pub fn denormalized(&self) -> Tensor {
        let mut out = self.samples.clone();
        if out.record_len() == self.normalization.mean.len() {
            for r in 0..out.records() {
                self.normalization.denormalize(out.record_mut(r));
            }
        }
        out
    }

    /// Metadata echoed next to a persisted dataset.
    pub fn metadata(&self, seed: u64) -> serde_json::Value {
        serde_json::json!({
            "kind": self.kind,
            "seed": seed,
            "shape": self.samples.shape(),
            "normalization": self.normalization,
        })
    }
}

/// `n` normalized points of a 2D toy distribution.
pub fn make_2d_dataset(kind: &ToyKind, n: usize, source: &mut RandomSource) -> Result<ToyDataset> {
    if n == 0 {
        return Err(Error::Precondition("dataset size must be positive".into()));
    }
    if let ToyKind::GaussMixture { centers, .. } = kind {
        if centers.is_empty() {
            return Err(Error::InvalidConfig("mixture without components".into()));
        }
    }
    let raw: Vec<[f64; 2]> = (0..n).map(|_| kind.draw(source)).collect();
    let normalization = Normalization::fit(&raw);
    let mut data = Vec::with_capacity(2 * n);
    for r in &raw {
        let mut row = *r;
        normalization.normalize(&mut row);
        data.extend_from_slice(&row);
    }
    Ok(ToyDataset {
        kind: kind.name().to_string(),
        samples: Tensor::from_vec([n, 2], data)?,
        labels: vec![0; n],
        normalization,
    })
}

/// Packs consecutive groups of `height·width` points into channel-first
/// `(n, 2, height, width)` grid records.
pub fn pack_points(points: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let hw = height * width;
    if points.record_len() != 2 || points.records() % hw != 0 {
        return Err(Error::ShapeMismatch(format!(
            "cannot pack {:?} into records of {height}x{width} points",
            points.shape()
        )));
    }
    let n = points.records() / hw;
    let mut data = vec![0.0; n * 2 * hw];
    for r in 0..n {
        for p in 0..hw {
            let pt = points.record(r * hw + p);
            data[r * 2 * hw + p] = pt[0];
            data[r * 2 * hw + hw + p] = pt[1];
        }
    }
    Tensor::from_vec([n, 2, height, width], data)
}

/// Inverse of [`pack_points`]: `(n·h·w, 2)` points.
pub fn unpack_points(records: &Tensor) -> Result<Tensor> {
    let shape = records.shape();
    if shape.len() != 4 || shape[1] != 2 {
        return Err(Error::ShapeMismatch(format!(
            "expected (n, 2, h, w) records, got {shape:?}"
        )));
    }
    let hw = shape[2] * shape[3];
    let mut data = Vec::with_capacity(records.len());
    for r in 0..shape[0] {
        let rec = records.record(r);
        for p in 0..hw {
            data.push(rec[p]);
            data.push(rec[hw + p]);
        }
    }
    Tensor::from_vec([shape[0] * hw, 2], data)
}

/// Object classes of the structured toy set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    /// One top slab on two to four legs.
    Table,
    /// A seat on two to four legs with one backrest above it.
    Chair,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 2] = [ObjectClass::Table, ObjectClass::Chair];

    pub fn from_label(label: usize) -> Result<Self> {
        Self::ALL
            .get(label)
            .copied()
            .ok_or_else(|| Error::UnknownKind(format!("class label {label}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartRole {
    Top,
    Leg,
    Seat,
    Back,
}

impl PartRole {
    const ALL: [PartRole; 4] = [PartRole::Top, PartRole::Leg, PartRole::Seat, PartRole::Back];

    fn index(self) -> usize {
        self as usize
    }
}

/// Part-structured object layout and generator settings. Boxes are 2D
/// `(cx, cy, w, h)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuredSpec {
    pub parts: usize,
    #[serde(default = "default_bbox_width")]
    pub bbox_width: usize,
    pub code_width: usize,
    /// Half extent of the square scene every live box must lie in.
    #[serde(default = "default_scene")]
    pub scene_half_extent: f64,
    /// Std of the noise added to part prototype codes.
    #[serde(default = "default_code_noise")]
    pub code_noise: f64,
}

fn default_bbox_width() -> usize {
    4
}
fn default_scene() -> f64 {
    1.0
}
fn default_code_noise() -> f64 {
    0.05
}

impl Default for StructuredSpec {
    fn default() -> Self {
        Self {
            parts: 8,
            bbox_width: 4,
            code_width: 8,
            scene_half_extent: 1.0,
            code_noise: 0.05,
        }
    }
}

impl StructuredSpec {
    pub fn layout(&self) -> DataLayout {
        DataLayout::Structured {
            parts: self.parts,
            bbox_width: self.bbox_width,
            code_width: self.code_width,
        }
    }

    pub fn token_width(&self) -> usize {
        1 + self.bbox_width + self.code_width
    }

    pub fn validate(&self) -> Result<()> {
        // The largest object (chair: seat, back, four legs) needs six tokens.
        if self.parts < 6 {
            return Err(Error::InvalidConfig(format!(
                "need at least 6 part tokens, got {}",
                self.parts
            )));
        }
        if self.bbox_width != 4 {
            return Err(Error::InvalidConfig(
                "boxes are 2D (cx, cy, w, h): bbox_width must be 4".into(),
            ));
        }
        if self.code_width < 4 {
            return Err(Error::InvalidConfig("code_width must be at least 4".into()));
        }
        Ok(())
    }

    /// Prototype shape code of a part role.
    pub fn prototype(&self, role: PartRole) -> Vec<f64> {
        (0..self.code_width)
            .map(|j| if j % 4 == role.index() { 0.8 } else { -0.4 })
            .collect()
    }

    fn nearest_role(&self, code: &[f64]) -> PartRole {
        PartRole::ALL
            .into_iter()
            .min_by(|a, b| {
                let da = sq_dist(code, &self.prototype(*a));
                let db = sq_dist(code, &self.prototype(*b));
                da.total_cmp(&db)
            })
            .expect("non-empty role list")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

struct Part {
    role: PartRole,
    bbox: [f64; 4],
}

const FLOOR: f64 = -0.85;

fn legs_under(
    rng: &mut RandomSource,
    left: f64,
    right: f64,
    underside: f64,
    parts: &mut Vec<Part>,
) {
    let count = 2 + rng.below(3);
    let lw = rng.uniform_in(0.06, 0.12);
    let lh = underside - FLOOR;
    let (x0, x1) = (left + lw / 2.0, right - lw / 2.0);
    for k in 0..count {
        let cx = x0 + (x1 - x0) * k as f64 / (count - 1) as f64;
        parts.push(Part {
            role: PartRole::Leg,
            bbox: [cx, FLOOR + lh / 2.0, lw, lh],
        });
    }
}

fn generate_object(class: ObjectClass, rng: &mut RandomSource) -> Vec<Part> {
    let mut parts = Vec::new();
    match class {
        ObjectClass::Table => {
            let w = rng.uniform_in(0.9, 1.5);
            let h = rng.uniform_in(0.1, 0.2);
            let cx = rng.uniform_in(-0.1, 0.1);
            let cy = rng.uniform_in(0.1, 0.5);
            parts.push(Part {
                role: PartRole::Top,
                bbox: [cx, cy, w, h],
            });
            legs_under(rng, cx - w / 2.0, cx + w / 2.0, cy - h / 2.0, &mut parts);
        }
        ObjectClass::Chair => {
            let w = rng.uniform_in(0.5, 0.8);
            let h = rng.uniform_in(0.08, 0.14);
            let cx = rng.uniform_in(-0.1, 0.1);
            let cy = rng.uniform_in(-0.3, 0.0);
            parts.push(Part {
                role: PartRole::Seat,
                bbox: [cx, cy, w, h],
            });
            let bw = rng.uniform_in(0.06, 0.1);
            let bh = rng.uniform_in(0.4, 0.7);
            let side = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            parts.push(Part {
                role: PartRole::Back,
                bbox: [
                    cx + side * (w / 2.0 - bw / 2.0),
                    cy + h / 2.0 + bh / 2.0,
                    bw,
                    bh,
                ],
            });
            legs_under(rng, cx - w / 2.0, cx + w / 2.0, cy - h / 2.0, &mut parts);
        }
    }
    parts
}

/// `n` objects of one class as `(n, L, V)` records. Live parts occupy random
/// token slots; dead tokens are all zero.
pub fn make_structured_dataset(
    spec: &StructuredSpec,
    class_label: usize,
    n: usize,
    source: &mut RandomSource,
) -> Result<ToyDataset> {
    spec.validate()?;
    let class = ObjectClass::from_label(class_label)?;
    let v = spec.token_width();
    let mut data = vec![0.0; n * spec.parts * v];
    for r in 0..n {
        let mut rng = source.fork();
        let parts = generate_object(class, &mut rng);
        let mut slots: Vec<usize> = (0..spec.parts).collect();
        for i in (1..slots.len()).rev() {
            slots.swap(i, rng.below(i + 1));
        }
        for (part, &slot) in parts.iter().zip(&slots) {
            let off = (r * spec.parts + slot) * v;
            data[off] = 1.0;
            data[off + 1..off + 5].copy_from_slice(&part.bbox);
            for (k, p) in spec.prototype(part.role).iter().enumerate() {
                data[off + 5 + k] = p + spec.code_noise * rng.normal();
            }
        }
    }
    Ok(ToyDataset {
        kind: "structured".to_string(),
        samples: Tensor::from_vec([n, spec.parts, v], data)?,
        labels: vec![class_label; n],
        normalization: Normalization::identity(0),
    })
}

/// Per-rule outcome of [`structure_validity`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureReport {
    /// Every existence entry is exactly 0 or 1.
    pub binary_existence: bool,
    /// Every live box has positive size and lies inside the scene.
    pub in_bounds: bool,
    /// Part roles and their arrangement match the class template.
    pub class_rule: bool,
}

impl StructureReport {
    pub fn all(&self) -> bool {
        self.binary_existence && self.in_bounds && self.class_rule
    }
}

/// Checks one `(L, V)` record against the generator's rules.
pub fn structure_validity(record: &[f64], class_label: usize, spec: &StructuredSpec) -> StructureReport {
    let v = spec.token_width();
    let tokens: Vec<&[f64]> = record.chunks(v).collect();
    let binary_existence = tokens.iter().all(|t| t[0] == 0.0 || t[0] == 1.0);
    let live: Vec<&[f64]> = tokens.iter().copied().filter(|t| t[0] >= 0.5).collect();
    let b = spec.scene_half_extent + 1e-9;
    let in_bounds = live.iter().all(|t| {
        let (cx, cy, w, h) = (t[1], t[2], t[3], t[4]);
        w > 0.0 && h > 0.0 && cx.abs() + w / 2.0 <= b && cy.abs() + h / 2.0 <= b
    });
    let roles: Vec<(PartRole, &[f64])> = live
        .iter()
        .map(|t| (spec.nearest_role(&t[5..5 + spec.code_width]), *t))
        .collect();
    let count = |role| roles.iter().filter(|(r, _)| *r == role).count();
    let legs: Vec<f64> = roles
        .iter()
        .filter(|(r, _)| *r == PartRole::Leg)
        .map(|(_, t)| t[2])
        .collect();
    let legs_ok = (2..=4).contains(&legs.len());
    let center_y = |role| {
        roles
            .iter()
            .find(|(r, _)| *r == role)
            .map(|(_, t)| t[2])
            .unwrap_or(f64::NAN)
    };
    let class_rule = match ObjectClass::from_label(class_label) {
        Ok(ObjectClass::Table) => {
            let top = center_y(PartRole::Top);
            count(PartRole::Top) == 1
                && count(PartRole::Seat) == 0
                && count(PartRole::Back) == 0
                && legs_ok
                && legs.iter().all(|&y| y < top)
        }
        Ok(ObjectClass::Chair) => {
            let seat = center_y(PartRole::Seat);
            let back = center_y(PartRole::Back);
            count(PartRole::Seat) == 1
                && count(PartRole::Back) == 1
                && count(PartRole::Top) == 0
                && legs_ok
                && legs.iter().all(|&y| y < seat)
                && back > seat
        }
        Err(_) => false,
    };
    StructureReport {
        binary_existence,
        in_bounds,
        class_rule,
    }
}

/// One part token in JSON form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartRecord {
    pub s: f64,
    pub b: Vec<f64>,
    pub e: Vec<f64>,
}

pub fn record_to_parts(record: &[f64], spec: &StructuredSpec) -> Vec<PartRecord> {
    record
        .chunks(spec.token_width())
        .map(|t| PartRecord {
            s: t[0],
            b: t[1..1 + spec.bbox_width].to_vec(),
            e: t[1 + spec.bbox_width..].to_vec(),
        })
        .collect()
}

/// Inverse of [`record_to_parts`]; missing tokens are dead (all zero).
pub fn parts_to_record(parts: &[PartRecord], spec: &StructuredSpec) -> Result<Vec<f64>> {
    if parts.len() > spec.parts {
        return Err(Error::ShapeMismatch(format!(
            "{} parts exceed the {} token slots",
            parts.len(),
            spec.parts
        )));
    }
    let v = spec.token_width();
    let mut out = vec![0.0; spec.parts * v];
    for (i, p) in parts.iter().enumerate() {
        if p.b.len() != spec.bbox_width || p.e.len() != spec.code_width {
            return Err(Error::ShapeMismatch(format!(
                "part {i}: box width {} / code width {}, expected {} / {}",
                p.b.len(),
                p.e.len(),
                spec.bbox_width,
                spec.code_width
            )));
        }
        out[i * v] = p.s;
        out[i * v + 1..i * v + 1 + spec.bbox_width].copy_from_slice(&p.b);
        out[i * v + 1 + spec.bbox_width..(i + 1) * v].copy_from_slice(&p.e);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_rows() {
        let ds = make_2d_dataset(&ToyKind::from_name("single_point").unwrap(), 5, &mut RandomSource::new(0))
            .unwrap();
        let raw = ds.denormalized();
        for r in 0..5 {
            assert_eq!(raw.record(r), &[1.0, 1.0]);
        }
    }

    #[test]
    fn unknown_kind() {
        assert!(matches!(
            ToyKind::from_name("spirals"),
            Err(Error::UnknownKind(_))
        ));
    }

    #[test]
    fn origin_mixture_mean() {
        let kind = ToyKind::GaussMixture {
            centers: vec![[0.0, 0.0]],
            std: 1.0,
        };
        let n = 20_000;
        let mut rng = RandomSource::new(3);
        let raw: Vec<[f64; 2]> = (0..n).map(|_| kind.draw(&mut rng)).collect();
        let bound = 3.0 / (n as f64).sqrt();
        for axis in 0..2 {
            let mean = raw.iter().map(|r| r[axis]).sum::<f64>() / n as f64;
            assert!(mean.abs() < bound, "axis {axis}: {mean}");
        }
    }

    #[test]
    fn moons_inside_radius_two() {
        let ds = make_2d_dataset(&ToyKind::from_name("two_moons").unwrap(), 20_000, &mut RandomSource::new(4))
            .unwrap();
        for r in 0..ds.len() {
            let p = ds.samples.record(r);
            assert!(p[0].hypot(p[1]) < 2.0);
        }
    }

    #[test]
    fn normalization_round_trip() {
        let ds = make_2d_dataset(&ToyKind::from_name("checkerboard").unwrap(), 500, &mut RandomSource::new(5))
            .unwrap();
        let mut back = ds.denormalized();
        for r in 0..back.records() {
            ds.normalization.normalize(back.record_mut(r));
        }
        for (a, b) in back.data().iter().zip(ds.samples.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pack_round_trip() {
        let pts = Tensor::from_vec([4, 2], (0..8).map(f64::from).collect()).unwrap();
        let packed = pack_points(&pts, 1, 2).unwrap();
        assert_eq!(packed.shape(), &[2, 2, 1, 2]);
        assert_eq!(packed.record(0), &[0.0, 2.0, 1.0, 3.0]);
        assert_eq!(unpack_points(&packed).unwrap(), pts);
    }

    #[test]
    fn structured_generator_is_valid_and_deterministic() {
        let spec = StructuredSpec::default();
        for label in 0..2 {
            let a = make_structured_dataset(&spec, label, 200, &mut RandomSource::new(6)).unwrap();
            let b = make_structured_dataset(&spec, label, 200, &mut RandomSource::new(6)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.samples.shape(), &[200, 8, 13]);
            for r in 0..a.len() {
                let rec = a.samples.record(r);
                let report = structure_validity(rec, label, &spec);
                assert!(report.all(), "record {r}: {report:?}");
                for tok in rec.chunks(13) {
                    if tok[0] == 0.0 {
                        assert!(tok.iter().all(|&x| x == 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn validity_detects_violations() {
        let spec = StructuredSpec::default();
        let ds = make_structured_dataset(&spec, 0, 1, &mut RandomSource::new(7)).unwrap();
        let rec = ds.samples.record(0).to_vec();
        let live = rec.chunks(13).position(|t| t[0] == 1.0).unwrap();

        let mut moved = rec.clone();
        moved[live * 13 + 1] = 3.0;
        let report = structure_validity(&moved, 0, &spec);
        assert!(!report.in_bounds);
        assert!(report.binary_existence);

        let mut soft = rec.clone();
        soft[live * 13] = 0.4;
        assert!(!structure_validity(&soft, 0, &spec).binary_existence);

        assert!(!structure_validity(&rec, 1, &spec).class_rule);
    }

    #[test]
    fn parts_json_round_trip() {
        let spec = StructuredSpec::default();
        let ds = make_structured_dataset(&spec, 1, 1, &mut RandomSource::new(8)).unwrap();
        let parts = record_to_parts(ds.samples.record(0), &spec);
        let json = serde_json::to_string(&parts).unwrap();
        let back: Vec<PartRecord> = serde_json::from_str(&json).unwrap();
        assert_eq!(parts_to_record(&back, &spec).unwrap(), ds.samples.record(0));
    }
}
