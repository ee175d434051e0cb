//! Two-sample statistics used as desk-scale quality scores.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn cmp_rows(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn sorted_rows(t: &Tensor) -> Vec<&[f64]> {
    let mut rows: Vec<&[f64]> = (0..t.records()).map(|r| t.record(r)).collect();
    rows.sort_by(|a, b| cmp_rows(a, b));
    rows
}

fn mean_pairwise(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    let mut total = 0.0;
    for x in a {
        let mut row = 0.0;
        for y in b {
            let d2: f64 = x.iter().zip(y.iter()).map(|(p, q)| (p - q) * (p - q)).sum();
            row += d2.sqrt();
        }
        total += row;
    }
    total / (a.len() as f64 * b.len() as f64)
}

/// Energy distance `2·E‖a−b‖ − E‖a−a'‖ − E‖b−b'‖` over all cross and
/// within pairs (diagonal pairs included), treating each leading-axis record
/// as one point.
///
/// Rows are put in a canonical order first, so the value depends only on the
/// two multisets and is exactly symmetric in its arguments.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Precondition("energy distance of an empty sample".into()));
    }
    if a.record_len() != b.record_len() {
        return Err(Error::ShapeMismatch(format!(
            "record widths {} and {}",
            a.record_len(),
            b.record_len()
        )));
    }
    let mut ra = sorted_rows(a);
    let mut rb = sorted_rows(b);
    let swap = match ra.len().cmp(&rb.len()) {
        Ordering::Equal => ra
            .iter()
            .zip(&rb)
            .map(|(x, y)| cmp_rows(x, y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
            .is_gt(),
        o => o.is_gt(),
    };
    if swap {
        std::mem::swap(&mut ra, &mut rb);
    }
    let cross = mean_pairwise(&ra, &rb);
    let within_a = mean_pairwise(&ra, &ra);
    let within_b = mean_pairwise(&rb, &rb);
    Ok(2.0 * cross - within_a - within_b)
}

/// Kolmogorov–Smirnov statistic of `samples` against the uniform law on `[lo, hi]`.
pub fn ks_uniform(samples: &[f64], lo: f64, hi: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let width = hi - lo;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let cdf = ((x - lo) / width).clamp(0.0, 1.0);
            let above = (i + 1) as f64 / n - cdf;
            let below = cdf - i as f64 / n;
            above.max(below)
        })
        .fold(0.0, f64::max)
}
