use combostoc::tensor::{broadcast_shapes, sample_normal, sample_normal_as, sample_uniform, BinaryOp};
use combostoc::{Error, RandomSource, Tensor, Tensor32};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

#[test]
fn broadcast_examples() {
    assert_eq!(broadcast_shapes(&[4, 1, 8], &[4, 3, 1]).unwrap(), vec![4, 3, 8]);
    assert_eq!(broadcast_shapes(&[5, 1, 1, 1], &[5, 3, 4, 4]).unwrap(), vec![5, 3, 4, 4]);
    assert!(matches!(
        broadcast_shapes(&[2, 3], &[4, 3]),
        Err(Error::IncompatibleShapes { .. })
    ));
}

#[test]
fn patch_timesteps_broadcast_over_channels() {
    // (N,1,H,W) + (N,C,H,W) against a nested-loop oracle.
    let (n, c, h, w) = (2, 3, 2, 4);
    let mut src = RandomSource::new(5);
    let t = sample_uniform(&mut src, &[n, 1, h, w]);
    let x = sample_normal(&mut src, &[n, c, h, w]);
    let y = Tensor::elementwise(BinaryOp::Add, &t, &x).unwrap();
    for i in 0..n {
        for ch in 0..c {
            for a in 0..h {
                for b in 0..w {
                    let xi = ((i * c + ch) * h + a) * w + b;
                    let ti = (i * h + a) * w + b;
                    assert_eq!(y.data()[xi], t.data()[ti] + x.data()[xi]);
                }
            }
        }
    }
}

#[test]
fn normal_draws_pass_chi_square() {
    // 1e5 draws binned into 20 equiprobable cells of N(0,1).
    let n = 100_000;
    let x = sample_normal(&mut RandomSource::new(11), &[n]);
    let std = Normal::new(0.0, 1.0).unwrap();
    let bins = 20;
    let mut counts = vec![0usize; bins];
    for &v in x.data() {
        let b = ((std.cdf(v) * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let expected = n as f64 / bins as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new((bins - 1) as f64).unwrap().inverse_cdf(0.999);
    assert!(stat < critical, "chi-square {stat} >= {critical}");
    let mean = x.sum() / n as f64;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    assert!(mean.abs() < 0.02 && (var - 1.0).abs() < 0.02);
}

#[test]
fn counter_addressing_is_reproducible() {
    let a = sample_normal(&mut RandomSource::at(3, 17), &[4, 5]);
    let b = sample_normal(&mut RandomSource::at(3, 17), &[4, 5]);
    let c = sample_normal(&mut RandomSource::at(3, 18), &[4, 5]);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(sample_normal(&mut RandomSource::new(0), &[0]).is_empty());
}

#[test]
fn single_precision_path() {
    let a: Tensor32 = sample_normal_as(&mut RandomSource::new(2), &[3, 2]);
    let z = Tensor32::zeros(vec![3, 2]);
    assert_eq!(a.mul(&z).unwrap(), z);
    let round = Tensor32::from_csv_str(&a.to_csv_string()).unwrap();
    assert_eq!(round, a);
}

#[test]
fn csv_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    let t = sample_normal(&mut RandomSource::new(9), &[3, 2, 2]);
    t.write_csv(&path).unwrap();
    assert_eq!(Tensor::read_csv(&path).unwrap(), t);
    std::fs::write(&path, "shape=2x2\n1,2,3\n").unwrap();
    assert!(matches!(Tensor::<f64>::read_csv(&path), Err(Error::DataLength { .. })));
}

fn shape() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..4, 1..4)
}

proptest! {
    #[test]
    fn broadcast_is_commutative(a in shape(), b in shape()) {
        prop_assert_eq!(broadcast_shapes(&a, &b).ok(), broadcast_shapes(&b, &a).ok());
    }

    #[test]
    fn add_then_sub_restores(seed in 0u64..1000, s in shape()) {
        let mut src = RandomSource::new(seed);
        let a = sample_uniform(&mut src, &s);
        let b = sample_uniform(&mut src, &s);
        let back = a.add(&b).unwrap().sub(&b).unwrap();
        for (x, y) in back.data().iter().zip(a.data()) {
            prop_assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn broadcast_against_ones_is_identity(s in shape()) {
        let ones = Tensor::<f64>::ones(vec![1; s.len()]);
        let x = Tensor::full(s.clone(), 2.5);
        prop_assert_eq!(x.mul(&ones).unwrap(), x);
    }
}
