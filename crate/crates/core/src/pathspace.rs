//! Path-space diagnostics on 2D toys: sampling densities of the interpolant,
//! the gradient-projection identity, marginal velocity fields with particle
//! advection, and continuity/transport residuals.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpolant::DEGENERATE_PAIR_EPS;
use crate::metrics::energy_distance;
use crate::rng::RandomSource;
use crate::tensor::Tensor;

pub type Point = [f64; 2];

/// Upper integration limit is `1 − DENSITY_EPS`; the integrand is singular at
/// `t = 1` only when evaluated at the target itself.
pub const DENSITY_EPS: f64 = 1e-4;

fn inv_sqrt_2pi() -> f64 {
    1.0 / (2.0 * PI).sqrt()
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Regular 2D lattice. `origin` is the center of cell `(0, 0)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: Point,
    pub spacing: Point,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    /// `nx × ny` cells tiling the box `[lo, hi]`.
    pub fn cells(lo: Point, hi: Point, nx: usize, ny: usize) -> Self {
        let spacing = [(hi[0] - lo[0]) / nx as f64, (hi[1] - lo[1]) / ny as f64];
        Self {
            origin: [lo[0] + spacing[0] / 2.0, lo[1] + spacing[1] / 2.0],
            spacing,
            nx,
            ny,
        }
    }

    /// `n × n` nodes with the first and last on the box corners.
    pub fn nodes(lo: f64, hi: f64, n: usize) -> Self {
        let h = (hi - lo) / (n - 1) as f64;
        Self {
            origin: [lo, lo],
            spacing: [h, h],
            nx: n,
            ny: n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 {
            return Err(Error::InvalidConfig(format!(
                "grid needs at least 2 cells per axis, got {}x{}",
                self.nx, self.ny
            )));
        }
        if !(self.spacing[0] > 0.0 && self.spacing[1] > 0.0) {
            return Err(Error::InvalidConfig("grid spacing must be positive".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_area(&self) -> f64 {
        self.spacing[0] * self.spacing[1]
    }

    pub fn center(&self, ix: usize, iy: usize) -> Point {
        [
            self.origin[0] + ix as f64 * self.spacing[0],
            self.origin[1] + iy as f64 * self.spacing[1],
        ]
    }

    /// Flat index, row-major with `iy` as the slow axis.
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    fn fractional(&self, p: Point) -> (f64, f64) {
        (
            ((p[0] - self.origin[0]) / self.spacing[0] + 0.5).floor(),
            ((p[1] - self.origin[1]) / self.spacing[1] + 0.5).floor(),
        )
    }

    /// Cell containing `p`, if inside the grid.
    pub fn locate(&self, p: Point) -> Option<(usize, usize)> {
        let (fx, fy) = self.fractional(p);
        if fx >= 0.0 && fy >= 0.0 && fx < self.nx as f64 && fy < self.ny as f64 {
            Some((fx as usize, fy as usize))
        } else {
            None
        }
    }

    /// Cell containing `p`, clamped onto the grid border when outside.
    pub fn locate_clamped(&self, p: Point) -> (usize, usize) {
        let (fx, fy) = self.fractional(p);
        let clamp = |f: f64, n: usize| {
            if f.is_nan() {
                0
            } else {
                f.clamp(0.0, (n - 1) as f64) as usize
            }
        };
        (clamp(fx, self.nx), clamp(fy, self.ny))
    }
}

/// Composite Simpson rule over `[a, b]` with `intervals` (rounded up to even)
/// subintervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let n = intervals.max(2).next_multiple_of(2);
    let h = (b - a) / n as f64;
    let mut odd = 0.0;
    let mut even = 0.0;
    for i in 1..n {
        let v = f(a + i as f64 * h);
        if i % 2 == 1 {
            odd += v;
        } else {
            even += v;
        }
    }
    h / 3.0 * (f(a) + 4.0 * odd + 2.0 * even + f(b))
}

/// Integrand of the single-pair path density at timestep `t`.
pub fn density_integrand(t: f64, x: Point, z: Point, x1: Point) -> f64 {
    let s = 1.0 - t;
    let d0 = t * (z[0] - x1[0]) + x[0] - z[0];
    let d1 = t * (z[1] - x1[1]) + x[1] - z[1];
    inv_sqrt_2pi() / s * (-(d0 * d0 + d1 * d1) / (2.0 * s * s)).exp()
}

/// Density of visiting `x` along the linear interpolant of Gaussian noise
/// around `z` toward `x1`, integrated over `[0, 1 − DENSITY_EPS]`.
pub fn density_fm(x: Point, z: Point, x1: Point, n_nodes: usize) -> Result<f64> {
    let d = dist(x, x1);
    if d < 1e-6 {
        return Err(Error::SingularEvaluation { distance: d });
    }
    if n_nodes < 16 {
        return Err(Error::Precondition(format!(
            "density quadrature needs at least 16 nodes, got {n_nodes}"
        )));
    }
    Ok(simpson(
        |t| density_integrand(t, x, z, x1),
        0.0,
        1.0 - DENSITY_EPS,
        n_nodes,
    ))
}

/// Central-difference gradient of [`density_fm`].
pub fn density_gradient(x: Point, z: Point, x1: Point, h: f64, n_nodes: usize) -> Result<Point> {
    let mut g = [0.0; 2];
    for (axis, gi) in g.iter_mut().enumerate() {
        let mut plus = x;
        let mut minus = x;
        plus[axis] += h;
        minus[axis] -= h;
        *gi = (density_fm(plus, z, x1, n_nodes)? - density_fm(minus, z, x1, n_nodes)?) / (2.0 * h);
    }
    Ok(g)
}

/// Right-hand side of the projection identity: `e^{−‖x−z‖²/2} / √(2π)`.
pub fn gradient_identity_rhs(x: Point, z: Point) -> f64 {
    let d = dist(x, z);
    inv_sqrt_2pi() * (-0.5 * d * d).exp()
}

/// Numerical projection `(x1 − x)·∇ρ(x)`.
pub fn gradient_projection(x: Point, z: Point, x1: Point, h: f64, n_nodes: usize) -> Result<f64> {
    let g = density_gradient(x, z, x1, h, n_nodes)?;
    Ok((x1[0] - x[0]) * g[0] + (x1[1] - x[1]) * g[1])
}

/// `|(x1 − x)·∇ρ_num(x) − e^{−‖x−z‖²/2}/√(2π)|`.
pub fn gradient_identity_residual(x: Point, z: Point, x1: Point, h: f64, n_nodes: usize) -> Result<f64> {
    check_fd_step(h)?;
    Ok((gradient_projection(x, z, x1, h, n_nodes)? - gradient_identity_rhs(x, z)).abs())
}

fn check_fd_step(h: f64) -> Result<()> {
    if !(1e-5..=1e-3).contains(&h) {
        return Err(Error::Precondition(format!(
            "finite-difference step {h} outside [1e-5, 1e-3]"
        )));
    }
    Ok(())
}

/// One row of [`gradient_identity_table`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientSample {
    pub x: Point,
    pub projection: f64,
    pub rhs: f64,
    pub residual: f64,
}

/// Evaluates the gradient identity at `n` points `z + u⊙(x1 − z)` with `u`
/// uniform on the unit square; point `i` uses `rng.child(i)`.
pub fn gradient_identity_table(
    z: Point,
    x1: Point,
    n: usize,
    h: f64,
    n_nodes: usize,
    rng: &RandomSource,
) -> Result<Vec<GradientSample>> {
    check_fd_step(h)?;
    (0..n)
        .map(|i| {
            let mut r = rng.child(i as u64);
            let u = [r.uniform(), r.uniform()];
            let x = [z[0] + u[0] * (x1[0] - z[0]), z[1] + u[1] * (x1[1] - z[1])];
            let projection = gradient_projection(x, z, x1, h, n_nodes)?;
            let rhs = gradient_identity_rhs(x, z);
            Ok(GradientSample {
                x,
                projection,
                rhs,
                residual: (projection - rhs).abs(),
            })
        })
        .collect()
}

/// Where the source points `z` come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSpec {
    StandardNormal,
    Point { at: Point },
    Gaussian { mean: Point, std: f64 },
}

impl SourceSpec {
    pub fn mean(&self) -> Point {
        match self {
            SourceSpec::StandardNormal => [0.0, 0.0],
            SourceSpec::Point { at } => *at,
            SourceSpec::Gaussian { mean, .. } => *mean,
        }
    }

    pub fn draw(&self, rng: &mut RandomSource) -> Point {
        match self {
            SourceSpec::StandardNormal => [rng.normal(), rng.normal()],
            SourceSpec::Point { at } => *at,
            SourceSpec::Gaussian { mean, std } => {
                [mean[0] + std * rng.normal(), mean[1] + std * rng.normal()]
            }
        }
    }
}

/// Scalar timestep (flow matching) or one timestep per coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathMode {
    Fm,
    Combostoc,
}

impl PathMode {
    pub const ALL: [PathMode; 2] = [PathMode::Fm, PathMode::Combostoc];

    pub fn name(self) -> &'static str {
        match self {
            PathMode::Fm => "fm",
            PathMode::Combostoc => "combostoc",
        }
    }

    fn draw_t(self, rng: &mut RandomSource) -> Point {
        match self {
            PathMode::Fm => {
                let t = rng.uniform();
                [t, t]
            }
            PathMode::Combostoc => [rng.uniform(), rng.uniform()],
        }
    }
}

fn lerp(z: Point, x1: Point, t: Point) -> Point {
    [
        (1.0 - t[0]) * z[0] + t[0] * x1[0],
        (1.0 - t[1]) * z[1] + t[1] * x1[1],
    ]
}

/// Per-cell nonnegative density on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl DensityMap {
    pub fn value(&self, ix: usize, iy: usize) -> f64 {
        self.values[self.grid.index(ix, iy)]
    }

    /// Mean value over cells whose centers lie at distance `[r_in, r_out)`
    /// from `center`.
    pub fn annulus_mean(&self, center: Point, r_in: f64, r_out: f64) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for iy in 0..self.grid.ny {
            for ix in 0..self.grid.nx {
                let d = dist(self.grid.center(ix, iy), center);
                if d >= r_in && d < r_out {
                    total += self.value(ix, iy);
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::EmptyGrid);
        }
        Ok(total / count as f64)
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("ix,iy,x,y,value\n");
        for iy in 0..self.grid.ny {
            for ix in 0..self.grid.nx {
                let c = self.grid.center(ix, iy);
                let _ = writeln!(s, "{ix},{iy},{},{},{}", c[0], c[1], self.value(ix, iy));
            }
        }
        s
    }

    /// Binary 8-bit PGM, linear scale with the maximum at 255. The top image
    /// row is the largest `y`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let max = self.values.iter().copied().fold(0.0, f64::max);
        let mut out = format!("P5\n{} {}\n255\n", self.grid.nx, self.grid.ny).into_bytes();
        for iy in (0..self.grid.ny).rev() {
            for ix in 0..self.grid.nx {
                let v = if max > 0.0 {
                    (self.value(ix, iy) / max * 255.0).round()
                } else {
                    0.0
                };
                out.push(v as u8);
            }
        }
        out
    }

    pub fn write(&self, csv: &Path, pgm: &Path) -> Result<()> {
        std::fs::write(csv, self.to_csv_string())?;
        std::fs::File::create(pgm)?.write_all(&self.to_pgm())?;
        Ok(())
    }
}

/// Monte-Carlo histogram of interpolant draws, normalized so that
/// `Σ value · cell_area = 1` over the draws that land on the grid.
pub fn density_grid(
    source: &SourceSpec,
    x1: Point,
    grid: &GridSpec,
    mode: PathMode,
    n_pairs: usize,
    rng: &RandomSource,
) -> Result<DensityMap> {
    grid.validate()?;
    if n_pairs < 10_000 {
        return Err(Error::Precondition(format!(
            "density maps need at least 1e4 pairs, got {n_pairs}"
        )));
    }
    let mut counts = vec![0.0; grid.len()];
    let mut landed = 0usize;
    for i in 0..n_pairs {
        let mut r = rng.child(i as u64);
        let z = source.draw(&mut r);
        let x = lerp(z, x1, mode.draw_t(&mut r));
        if let Some((ix, iy)) = grid.locate(x) {
            counts[grid.index(ix, iy)] += 1.0;
            landed += 1;
        }
    }
    if landed == 0 {
        return Err(Error::EmptyGrid);
    }
    let norm = landed as f64 * grid.cell_area();
    Ok(DensityMap {
        grid: *grid,
        values: counts.into_iter().map(|c| c / norm).collect(),
    })
}

/// Cell-averaged velocity field with per-cell deposit mass.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityGrid {
    pub grid: GridSpec,
    pub vectors: Vec<Point>,
    pub weights: Vec<f64>,
    /// For every cell, the flat index of the nearest cell with nonzero weight.
    nearest: Vec<usize>,
}

impl VelocityGrid {
    /// Builds a field from per-cell vectors and weights.
    pub fn new(grid: GridSpec, vectors: Vec<Point>, weights: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if vectors.len() != grid.len() || weights.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} vectors / {} weights for {} cells",
                vectors.len(),
                weights.len(),
                grid.len()
            )));
        }
        let filled: Vec<(usize, usize)> = (0..grid.ny)
            .flat_map(|iy| (0..grid.nx).map(move |ix| (ix, iy)))
            .filter(|&(ix, iy)| weights[grid.index(ix, iy)] > 0.0)
            .collect();
        if filled.is_empty() {
            return Err(Error::EmptyGrid);
        }
        let mut nearest = Vec::with_capacity(grid.len());
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                let c = grid.center(ix, iy);
                // Ties resolve to the lowest flat index.
                let best = filled
                    .iter()
                    .map(|&(jx, jy)| {
                        let d = grid.center(jx, jy);
                        ((d[0] - c[0]).powi(2) + (d[1] - c[1]).powi(2), grid.index(jx, jy))
                    })
                    .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                    .expect("non-empty");
                nearest.push(best.1);
            }
        }
        Ok(Self {
            grid,
            vectors,
            weights,
            nearest,
        })
    }

    pub fn is_empty_cell(&self, ix: usize, iy: usize) -> bool {
        self.weights[self.grid.index(ix, iy)] == 0.0
    }

    /// Velocity of the nearest nonempty cell to `p`.
    pub fn lookup(&self, p: Point) -> Point {
        let (ix, iy) = self.grid.locate_clamped(p);
        self.vectors[self.nearest[self.grid.index(ix, iy)]]
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("ix,iy,x,y,vx,vy,weight\n");
        for iy in 0..self.grid.ny {
            for ix in 0..self.grid.nx {
                let i = self.grid.index(ix, iy);
                let c = self.grid.center(ix, iy);
                let v = self.vectors[i];
                let _ = writeln!(
                    s,
                    "{ix},{iy},{},{},{},{},{}",
                    c[0], c[1], v[0], v[1], self.weights[i]
                );
            }
        }
        s
    }
}

/// Compensated velocity `(x1 − z) − δ` at span point `x`, with `δ` the
/// component of `x − x1` orthogonal to the diagonal.
pub fn compensated_velocity(x: Point, z: Point, x1: Point) -> Result<Point> {
    let d = [x1[0] - z[0], x1[1] - z[1]];
    let len_sq = d[0] * d[0] + d[1] * d[1];
    if len_sq.sqrt() < DEGENERATE_PAIR_EPS {
        return Err(Error::DegeneratePair {
            distance: len_sq.sqrt(),
        });
    }
    let r = [x[0] - x1[0], x[1] - x1[1]];
    let coef = (r[0] * d[0] + r[1] * d[1]) / len_sq;
    let delta = [r[0] - coef * d[0], r[1] - coef * d[1]];
    Ok([d[0] - delta[0], d[1] - delta[1]])
}

/// Marginal velocity field of a set of `(z, x1)` pairs. Flow matching
/// deposits `x1 − z` at `n_interp` evenly spaced diagonal points per pair;
/// ComboStoc deposits the compensated velocity at `n_interp` uniform span
/// samples per pair.
pub fn marginal_velocity_field(
    pairs: &[(Point, Point)],
    grid: &GridSpec,
    mode: PathMode,
    n_interp: usize,
    rng: &RandomSource,
) -> Result<VelocityGrid> {
    grid.validate()?;
    if pairs.is_empty() || n_interp == 0 {
        return Err(Error::Precondition(
            "velocity field needs at least one pair and one deposit".into(),
        ));
    }
    let mut sums = vec![[0.0; 2]; grid.len()];
    let mut weights = vec![0.0; grid.len()];
    for (p, &(z, x1)) in pairs.iter().enumerate() {
        let mut r = rng.child(p as u64);
        for j in 0..n_interp {
            let (x, v) = match mode {
                PathMode::Fm => {
                    let t = (j as f64 + 0.5) / n_interp as f64;
                    (lerp(z, x1, [t, t]), [x1[0] - z[0], x1[1] - z[1]])
                }
                PathMode::Combostoc => {
                    let x = lerp(z, x1, mode.draw_t(&mut r));
                    (x, compensated_velocity(x, z, x1)?)
                }
            };
            if let Some((ix, iy)) = grid.locate(x) {
                let i = grid.index(ix, iy);
                sums[i][0] += v[0];
                sums[i][1] += v[1];
                weights[i] += 1.0;
            }
        }
    }
    let vectors = sums
        .iter()
        .zip(&weights)
        .map(|(s, &w)| if w > 0.0 { [s[0] / w, s[1] / w] } else { [0.0, 0.0] })
        .collect();
    VelocityGrid::new(*grid, vectors, weights)
}

/// Particle positions after advection, with a sparse trajectory log.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSet {
    pub positions: Vec<Point>,
    /// Whether each final position lies on the field's grid.
    pub inside: Vec<bool>,
    /// `(step, positions)` snapshots.
    pub trajectory: Vec<(usize, Vec<Point>)>,
}

impl ParticleSet {
    pub fn trajectory_csv(&self) -> String {
        let mut s = String::from("step,particle,x,y\n");
        for (step, snap) in &self.trajectory {
            for (i, p) in snap.iter().enumerate() {
                let _ = writeln!(s, "{step},{i},{},{}", p[0], p[1]);
            }
        }
        s
    }
}

/// Advances standard-normal particles through `field` with explicit Euler,
/// `x ← x + v(x)/steps`. Particle `i` draws its start from `rng.child(i)`.
pub fn simulate_particles(
    field: &VelocityGrid,
    n: usize,
    steps: usize,
    rng: &RandomSource,
    log_every: usize,
) -> Result<ParticleSet> {
    if steps == 0 {
        return Err(Error::Precondition("particle simulation needs at least one step".into()));
    }
    let starts: Vec<Point> = (0..n)
        .map(|i| {
            let mut r = rng.child(i as u64);
            [r.normal(), r.normal()]
        })
        .collect();
    Ok(advect(field, starts, steps, log_every))
}

/// Euler advection from given starting positions.
pub fn advect(field: &VelocityGrid, mut positions: Vec<Point>, steps: usize, log_every: usize) -> ParticleSet {
    let dt = 1.0 / steps as f64;
    let mut trajectory = vec![(0, positions.clone())];
    for step in 1..=steps {
        for p in positions.iter_mut() {
            let v = field.lookup(*p);
            p[0] += v[0] * dt;
            p[1] += v[1] * dt;
        }
        if (log_every > 0 && step % log_every == 0) || step == steps {
            trajectory.push((step, positions.clone()));
        }
    }
    let inside = positions.iter().map(|&p| field.grid.locate(p).is_some()).collect();
    ParticleSet {
        positions,
        inside,
        trajectory,
    }
}

/// Number of final positions farther than `radius` from every target.
pub fn outlier_count(p: &ParticleSet, targets: &[Point], radius: f64) -> Result<usize> {
    if !(radius > 0.0) {
        return Err(Error::Precondition(format!("outlier radius {radius} must be positive")));
    }
    Ok(p.positions
        .iter()
        .filter(|&&x| targets.iter().all(|&c| dist(x, c) > radius))
        .count())
}

/// Two-mode particle experiment: pairs couple standard-normal sources with
/// targets chosen round-robin, both fields are built from the same pairs and
/// advected from the same particles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParticleExperiment {
    pub targets: Vec<Point>,
    pub n_pairs: usize,
    pub grid_lo: Point,
    pub grid_hi: Point,
    pub grid_cells: [usize; 2],
    pub n_interp: usize,
    pub n_particles: usize,
    pub steps: usize,
    pub outlier_radius: f64,
    pub log_every: usize,
}

impl Default for ParticleExperiment {
    fn default() -> Self {
        Self {
            targets: vec![[1.0, 1.0], [-1.0, -1.0]],
            n_pairs: 1000,
            grid_lo: [-3.0, -3.0],
            grid_hi: [3.0, 3.0],
            grid_cells: [30, 30],
            n_interp: 100,
            n_particles: 500,
            steps: 100,
            outlier_radius: 0.15,
            log_every: 10,
        }
    }
}

/// Outcome of one field in a [`ParticleExperiment`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleRun {
    pub mode: PathMode,
    pub field: VelocityGrid,
    pub particles: ParticleSet,
    pub outliers: usize,
}

impl ParticleExperiment {
    pub fn grid(&self) -> GridSpec {
        GridSpec::cells(self.grid_lo, self.grid_hi, self.grid_cells[0], self.grid_cells[1])
    }

    pub fn pairs(&self, rng: &RandomSource) -> Result<Vec<(Point, Point)>> {
        if self.targets.is_empty() {
            return Err(Error::InvalidConfig("particle experiment needs targets".into()));
        }
        Ok((0..self.n_pairs)
            .map(|i| {
                let mut r = rng.child(i as u64);
                ([r.normal(), r.normal()], self.targets[i % self.targets.len()])
            })
            .collect())
    }

    /// Runs both modes. Stream layout under `rng`: child 0 pairs, child 1
    /// deposits, child 2 particles.
    pub fn run(&self, rng: &RandomSource) -> Result<Vec<ParticleRun>> {
        let grid = self.grid();
        let pairs = self.pairs(&rng.child(0))?;
        PathMode::ALL
            .iter()
            .map(|&mode| {
                let field = marginal_velocity_field(&pairs, &grid, mode, self.n_interp, &rng.child(1))?;
                let particles = if self.n_particles == 0 {
                    ParticleSet {
                        positions: Vec::new(),
                        inside: Vec::new(),
                        trajectory: Vec::new(),
                    }
                } else {
                    simulate_particles(&field, self.n_particles, self.steps, &rng.child(2), self.log_every)?
                };
                let outliers = outlier_count(&particles, &self.targets, self.outlier_radius)?;
                Ok(ParticleRun {
                    mode,
                    field,
                    particles,
                    outliers,
                })
            })
            .collect()
    }
}

/// Closed-form conditional path density `N(t·x1, (1−t)² I)` at `x`.
pub fn gaussian_path_density(x: Point, x1: Point, t: f64) -> f64 {
    let s = 1.0 - t;
    let d0 = x[0] - t * x1[0];
    let d1 = x[1] - t * x1[1];
    (-(d0 * d0 + d1 * d1) / (2.0 * s * s)).exp() / (2.0 * PI * s * s)
}

// Eighth-order central first-derivative weights for offsets 1..=4.
const D1_WEIGHTS: [f64; 4] = [4.0 / 5.0, -1.0 / 5.0, 4.0 / 105.0, -1.0 / 280.0];
const STENCIL_RADIUS: usize = 4;

/// Per-node residual `∂p/∂t + ∇·(u p)` of the conditional path with
/// `u = (x1 − x)/(1 − t)`, on nodes at least 4 cells from the border
/// (row-major `(ny − 8) × (nx − 8)`). Time uses a forward difference of step
/// `dt`; space uses an eighth-order central stencil with the grid spacing.
pub fn continuity_residual_field(x1: Point, grid: &GridSpec, t: f64, dt: f64) -> Result<Vec<f64>> {
    if !(t > 0.05 && t < 0.95) {
        return Err(Error::Precondition(format!("t = {t} outside (0.05, 0.95)")));
    }
    if !(dt > 0.0) {
        return Err(Error::Precondition("dt must be positive".into()));
    }
    grid.validate()?;
    if grid.nx <= 2 * STENCIL_RADIUS || grid.ny <= 2 * STENCIL_RADIUS {
        return Err(Error::InvalidConfig("grid too small for the residual stencil".into()));
    }
    let s = 1.0 - t;
    let flux = |ix: usize, iy: usize, axis: usize| {
        let x = grid.center(ix, iy);
        (x1[axis] - x[axis]) / s * gaussian_path_density(x, x1, t)
    };
    let mut out = Vec::with_capacity((grid.nx - 8) * (grid.ny - 8));
    for iy in STENCIL_RADIUS..grid.ny - STENCIL_RADIUS {
        for ix in STENCIL_RADIUS..grid.nx - STENCIL_RADIUS {
            let x = grid.center(ix, iy);
            let dp_dt = (gaussian_path_density(x, x1, t + dt) - gaussian_path_density(x, x1, t)) / dt;
            let mut div = 0.0;
            for (k, w) in D1_WEIGHTS.iter().enumerate() {
                let o = k + 1;
                div += w * (flux(ix + o, iy, 0) - flux(ix - o, iy, 0)) / grid.spacing[0];
                div += w * (flux(ix, iy + o, 1) - flux(ix, iy - o, 1)) / grid.spacing[1];
            }
            out.push(dp_dt + div);
        }
    }
    Ok(out)
}

/// Max absolute continuity residual over the interior nodes.
pub fn continuity_residual(x1: Point, grid: &GridSpec, t: f64, dt: f64) -> Result<f64> {
    Ok(continuity_residual_field(x1, grid, t, dt)?
        .into_iter()
        .fold(0.0, |m, r| m.max(r.abs())))
}

/// Energy distance between (a) `z_samples` carried to the per-entry schedule
/// `t` by Euler steps along their own straight paths, each entry on its own
/// clock, and (b) fresh direct interpolant draws at `t`.
pub fn transport_consistency(z_samples: &Tensor, x1: &Tensor, t: &Tensor, rng: &RandomSource) -> Result<f64> {
    const SUBSTEPS: usize = 16;
    let n = z_samples.records();
    if n < 10_000 {
        return Err(Error::Precondition(format!(
            "transport check needs at least 1e4 samples, got {n}"
        )));
    }
    let d = z_samples.record_len();
    if x1.len() != d || t.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "record width {d}, target {} entries, schedule {} entries",
            x1.len(),
            t.len()
        )));
    }
    let (x1, t) = (x1.data(), t.data());
    let mut transported = z_samples.clone();
    for r in 0..n {
        let z = z_samples.record(r);
        let x = transported.record_mut(r);
        for k in 0..SUBSTEPS {
            for i in 0..d {
                let c0 = t[i] * k as f64 / SUBSTEPS as f64;
                let c1 = t[i] * (k + 1) as f64 / SUBSTEPS as f64;
                x[i] += (c1 - c0) * (x1[i] - z[i]);
            }
        }
    }
    let mut direct = Vec::with_capacity(n * d);
    for r in 0..n {
        let mut g = rng.child(r as u64);
        for i in 0..d {
            let z = g.normal();
            direct.push((1.0 - t[i]) * z + t[i] * x1[i]);
        }
    }
    let direct = Tensor::from_vec(z_samples.shape().to_vec(), direct)?;
    energy_distance(&transported, &direct)
}

#[cfg(test)]
mod tests {
    use super::*;

    const Z: Point = [0.0, 0.0];
    const X1: Point = [1.0, 1.0];

    #[test]
    fn integrand_at_source() {
        assert!((density_integrand(0.0, Z, Z, X1) - 0.398_942_280_401_432_7).abs() < 1e-15);
    }

    #[test]
    fn singular_and_precondition_errors() {
        assert!(matches!(
            density_fm(X1, Z, X1, 100),
            Err(Error::SingularEvaluation { .. })
        ));
        assert!(density_fm(Z, Z, X1, 8).is_err());
        assert!(gradient_identity_residual([0.5, 0.5], Z, X1, 1e-1, 100).is_err());
    }

    #[test]
    fn simpson_exact_on_cubics() {
        let v = simpson(|x| x * x * x - 2.0 * x, 0.0, 2.0, 2);
        assert!((v - 0.0).abs() < 1e-14);
    }

    #[test]
    fn gradient_identity_at_span_center() {
        let rhs = gradient_identity_rhs([0.5, 0.5], Z);
        assert!((rhs - 0.310_696_560_376_927_8).abs() < 1e-15);
        let r = gradient_identity_residual([0.5, 0.5], Z, X1, 1e-4, 4000).unwrap();
        assert!(r < 1e-3, "{r}");
    }

    #[test]
    fn grid_locate() {
        let g = GridSpec::cells([-1.0, -1.0], [1.0, 1.0], 4, 4);
        assert_eq!(g.locate([-0.99, -0.99]), Some((0, 0)));
        assert_eq!(g.locate([0.99, 0.1]), Some((3, 2)));
        assert_eq!(g.locate([1.01, 0.0]), None);
        assert_eq!(g.locate_clamped([5.0, -5.0]), (3, 0));
    }

    #[test]
    fn single_pair_fm_field_is_constant() {
        let g = GridSpec::cells([-1.0, -1.0], [2.0, 2.0], 30, 30);
        let f = marginal_velocity_field(&[(Z, X1)], &g, PathMode::Fm, 100, &RandomSource::new(0)).unwrap();
        for (v, w) in f.vectors.iter().zip(&f.weights) {
            if *w > 0.0 {
                assert_eq!(*v, [1.0, 1.0]);
            }
        }
    }

    #[test]
    fn empty_grid_detected() {
        let g = GridSpec::cells([10.0, 10.0], [11.0, 11.0], 4, 4);
        assert!(matches!(
            marginal_velocity_field(&[(Z, X1)], &g, PathMode::Fm, 10, &RandomSource::new(0)),
            Err(Error::EmptyGrid)
        ));
    }

    #[test]
    fn zero_field_keeps_particles() {
        let g = GridSpec::cells([-1.0, -1.0], [1.0, 1.0], 4, 4);
        let f = VelocityGrid::new(g, vec![[0.0; 2]; 16], vec![1.0; 16]).unwrap();
        let p = simulate_particles(&f, 20, 100, &RandomSource::new(1), 10).unwrap();
        assert_eq!(p.positions, p.trajectory[0].1);
        assert_eq!(p.trajectory.len(), 11);
    }

    #[test]
    fn outlier_fixture() {
        let targets = [[0.0, 0.0], [1.0, 0.0]];
        let r = 0.1;
        let mut pos = vec![[0.0, 0.0], [1.0, 0.0], [0.05, 0.0]];
        pos.extend([[0.0, 0.2], [1.0, -0.2], [-0.2, 0.0]]);
        let p = ParticleSet {
            inside: vec![true; pos.len()],
            positions: pos,
            trajectory: Vec::new(),
        };
        assert_eq!(outlier_count(&p, &targets, r).unwrap(), 3);
        assert_eq!(outlier_count(&p, &targets, 1e9).unwrap(), 0);
        assert!(outlier_count(&p, &targets, 0.0).is_err());
    }

    #[test]
    fn compensated_velocity_on_diagonal() {
        assert_eq!(compensated_velocity([0.3, 0.3], Z, X1).unwrap(), [1.0, 1.0]);
        let v = compensated_velocity([1.0, 0.0], Z, X1).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-15 && (v[1] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn pgm_header_and_scale() {
        let g = GridSpec::cells([0.0, 0.0], [1.0, 1.0], 2, 2);
        let m = DensityMap {
            grid: g,
            values: vec![0.0, 1.0, 2.0, 4.0],
        };
        let pgm = m.to_pgm();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(&pgm[header.len()..], &[128, 255, 0, 64]);
    }
}
