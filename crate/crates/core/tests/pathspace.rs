use combostoc::metrics::ks_uniform;
use combostoc::pathspace::*;
use combostoc::{Error, RandomSource, Tensor};

const Z: Point = [0.0, 0.0];
const X1: Point = [1.0, 1.0];

/// Recursive adaptive Simpson with Richardson correction.
fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rule(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn go(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = rule(fa, flm, fm, a, m);
        let right = rule(fm, frm, fb, m, b);
        let err = left + right - whole;
        if depth == 0 || err.abs() <= 15.0 * tol {
            left + right + err / 15.0
        } else {
            go(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + go(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    go(f, a, b, fa, fm, fb, rule(fa, fm, fb, a, b), tol, 50)
}

fn oracle_density(x: Point, z: Point, x1: Point) -> f64 {
    let f = |t: f64| {
        let s = 1.0 - t;
        let d0 = t * (z[0] - x1[0]) + x[0] - z[0];
        let d1 = t * (z[1] - x1[1]) + x[1] - z[1];
        (-(d0 * d0 + d1 * d1) / (2.0 * s * s)).exp() / s / (2.0 * std::f64::consts::PI).sqrt()
    };
    adaptive_simpson(&f, 0.0, 1.0 - DENSITY_EPS, 1e-10)
}

#[test]
fn density_matches_adaptive_oracle() {
    let got = density_fm(Z, Z, X1, 100_000).unwrap();
    let want = oracle_density(Z, Z, X1);
    assert!(((got - want) / want).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn density_tail_is_negligible() {
    let x = [-5.0, -5.0];
    let got = density_fm(x, Z, X1, 10_000).unwrap();
    assert!(got < 1e-6);
    assert!((got - oracle_density(x, Z, X1)).abs() < 1e-9);
}

#[test]
fn density_converges_when_nodes_double() {
    let rng = RandomSource::new(21);
    for i in 0..100 {
        let mut r = rng.child(i);
        let x = [r.uniform() * 0.9, r.uniform() * 0.9];
        let a = density_fm(x, Z, X1, 2000).unwrap();
        let b = density_fm(x, Z, X1, 4000).unwrap();
        assert!((a - b).abs() < 1e-8, "{x:?}: {a} vs {b}");
    }
}

#[test]
fn gradient_identity_values() {
    let rhs = gradient_identity_rhs([0.5, 0.5], Z);
    assert!((rhs - (-0.25f64).exp() / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-15);
    assert!((rhs - 0.310_696_6).abs() < 1e-7);
    assert!((gradient_identity_rhs(Z, Z) - 0.398_942).abs() < 1e-6);
}

#[test]
fn gradient_projection_is_positive_inside_the_span() {
    let table = gradient_identity_table(Z, X1, 20, 1e-4, 4000, &RandomSource::new(1)).unwrap();
    for s in table {
        assert!(s.projection > 0.0 && s.residual < 1e-3, "{s:?}");
    }
}

#[test]
fn fm_density_favours_the_diagonal() {
    let grid = GridSpec::cells([-1.5, -1.5], [2.5, 2.5], 80, 80);
    let map = density_grid(&SourceSpec::StandardNormal, X1, &grid, PathMode::Fm, 200_000, &RandomSource::new(3)).unwrap();
    let disc = |c: Point| map.annulus_mean(c, 0.0, 0.2).unwrap();
    // Points at the same distance from the target as the diagonal mid-point.
    let diag = disc([0.5, 0.5]);
    assert!(diag > disc([1.5, 0.5]) && diag > disc([0.5, 1.5]));
}

#[test]
fn combostoc_span_histogram_is_uniform() {
    let n = 100_000;
    let cells = 5;
    let grid = GridSpec::cells(Z, X1, cells, cells);
    let src = SourceSpec::Point { at: Z };
    let map = density_grid(&src, X1, &grid, PathMode::Combostoc, n, &RandomSource::new(4)).unwrap();
    let p = 1.0 / (cells * cells) as f64;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for &v in &map.values {
        let count = v * grid.cell_area() * n as f64;
        assert!((count - n as f64 * p).abs() < 3.0 * sigma, "{count}");
    }
}

#[test]
fn combostoc_span_passes_ks_per_axis() {
    let rng = RandomSource::new(12);
    let x1 = [2.0, -1.0];
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for i in 0..100_000 {
        let mut r = rng.child(i);
        let t = [r.uniform(), r.uniform()];
        xs.push(t[0] * x1[0]);
        ys.push(t[1] * x1[1]);
    }
    assert!(ks_uniform(&xs, 0.0, 2.0) < 0.02);
    assert!(ks_uniform(&ys, -1.0, 0.0) < 0.02);
}

#[test]
fn diagonal_cell_carries_the_pair_velocity() {
    let grid = GridSpec::cells([-1.0, -1.0], [2.0, 2.0], 30, 30);
    let f = marginal_velocity_field(&[(Z, X1)], &grid, PathMode::Combostoc, 100_000, &RandomSource::new(2)).unwrap();
    let (ix, iy) = grid.locate([0.55, 0.55]).unwrap();
    let v = f.vectors[grid.index(ix, iy)];
    assert!((v[0] - 1.0).abs() < 0.05 && (v[1] - 1.0).abs() < 0.05, "{v:?}");
}

#[test]
fn symmetric_targets_give_no_cross_flow_on_the_bisector() {
    // Ten replicates of 1e5 deposits; the bisector x = 0 is a cell column.
    let grid = GridSpec::cells([-3.1, -3.1], [3.1, 3.1], 31, 31);
    let exp = ParticleExperiment {
        targets: vec![[1.0, 0.0], [-1.0, 0.0]],
        ..ParticleExperiment::default()
    };
    let col = grid.locate([0.0, 0.0]).unwrap().0;
    let means: Vec<f64> = (0..10)
        .map(|rep| {
            let rng = RandomSource::new(100 + rep);
            let pairs = exp.pairs(&rng.child(0)).unwrap();
            let f = marginal_velocity_field(&pairs, &grid, PathMode::Combostoc, 100, &rng.child(1)).unwrap();
            let (mut s, mut w) = (0.0, 0.0);
            for iy in 0..grid.ny {
                let i = grid.index(col, iy);
                s += f.vectors[i][0] * f.weights[i];
                w += f.weights[i];
            }
            s / w
        })
        .collect();
    let n = means.len() as f64;
    let mean = means.iter().sum::<f64>() / n;
    let sd = (means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() < 3.0 * sd / n.sqrt(), "{mean} sd {sd}");
}

#[test]
fn particle_from_source_lands_on_target() {
    let grid = GridSpec::cells([-1.0, -1.0], [2.0, 2.0], 30, 30);
    let f = marginal_velocity_field(&[(Z, X1)], &grid, PathMode::Fm, 100, &RandomSource::new(0)).unwrap();
    let p = advect(&f, vec![Z], 100, 10);
    assert!((p.positions[0][0] - 1.0).abs() < 1e-12 && (p.positions[0][1] - 1.0).abs() < 1e-12);
    assert_eq!(p.trajectory.len(), 11);
}

#[test]
fn zero_field_leaves_particles_in_place() {
    let grid = GridSpec::cells([-1.0, -1.0], [1.0, 1.0], 4, 4);
    let f = VelocityGrid::new(grid, vec![[0.0, 0.0]; 16], vec![1.0; 16]).unwrap();
    let p = simulate_particles(&f, 20, 100, &RandomSource::new(5), 10).unwrap();
    assert_eq!(p.trajectory[0].1, p.positions);
}

#[test]
fn particle_runs_are_deterministic() {
    let exp = ParticleExperiment {
        n_pairs: 200,
        n_particles: 50,
        ..ParticleExperiment::default()
    };
    let a = exp.run(&RandomSource::new(9)).unwrap();
    let b = exp.run(&RandomSource::new(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn outlier_fixtures() {
    let radius = 0.15;
    let targets = [X1, [-1.0, -1.0]];
    let mut positions = vec![X1, [-1.0, -1.0], [1.05, 1.0]];
    positions.extend([[1.0 + 2.0 * radius, 1.0], [-1.0, -1.0 - 2.0 * radius], [0.0, 0.0]]);
    let set = ParticleSet {
        inside: vec![true; positions.len()],
        trajectory: Vec::new(),
        positions,
    };
    assert_eq!(outlier_count(&set, &targets, radius).unwrap(), 3);
    assert_eq!(outlier_count(&set, &targets, 1e9).unwrap(), 0);
    assert!(outlier_count(&set, &targets, 0.0).is_err());
}

#[test]
fn continuity_residual_is_small() {
    let grid = GridSpec::nodes(-3.0, 3.0, 64);
    let r = continuity_residual(X1, &grid, 0.5, 1e-4).unwrap();
    assert!(r < 1e-3, "{r}");
    assert!(continuity_residual(X1, &grid, 0.99, 1e-4).is_err());
}

#[test]
fn continuity_residual_respects_rotation() {
    let grid = GridSpec::nodes(-3.0, 3.0, 64);
    let field = continuity_residual_field(Z, &grid, 0.5, 1e-4).unwrap();
    let m = 64 - 8;
    for iy in 0..m {
        for ix in 0..m {
            let a = field[iy * m + ix];
            let b = field[ix * m + (m - 1 - iy)];
            // The residual is a cancellation of O(1) terms.
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn continuity_residual_shrinks_with_dt() {
    let grid = GridSpec::nodes(-3.0, 3.0, 64);
    let coarse = continuity_residual(X1, &grid, 0.5, 1e-3).unwrap();
    let fine = continuity_residual(X1, &grid, 0.5, 5e-4).unwrap();
    assert!(fine < coarse);
    // First order: halving dt roughly halves the time-discretization error.
    assert!(fine / coarse > 0.3 && fine / coarse < 0.7, "{}", fine / coarse);
}

fn source_samples(n: usize, seed: u64) -> Tensor {
    combostoc::tensor::sample_normal(&mut RandomSource::new(seed), &[n, 2])
}

#[test]
fn transport_consistency_cases() {
    let z = source_samples(10_000, 6);
    let x1 = Tensor::from_vec([2], vec![1.0, -0.5]).unwrap();
    let rng = RandomSource::new(7);
    let ones = Tensor::full([2], 1.0);
    assert!(transport_consistency(&z, &x1, &ones, &rng).unwrap().abs() < 1e-12);
    let zeros = Tensor::full([2], 0.0);
    assert!(transport_consistency(&z, &x1, &zeros, &rng).unwrap() < 0.01);
    let mixed = Tensor::from_vec([2], vec![0.3, 0.8]).unwrap();
    assert!(transport_consistency(&z, &x1, &mixed, &rng).unwrap() < 0.01);
    assert!(matches!(
        transport_consistency(&source_samples(100, 6), &x1, &mixed, &rng),
        Err(Error::Precondition(_))
    ));
}
