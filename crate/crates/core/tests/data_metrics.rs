use combostoc::data::*;
use combostoc::metrics::energy_distance;
use combostoc::tensor::sample_normal;
use combostoc::{Error, RandomSource, Tensor};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

/// `E|N(mu, s²)|`.
fn folded_normal_mean(mu: f64, s: f64) -> f64 {
    let phi = Normal::new(0.0, 1.0).unwrap();
    s * (2.0 / std::f64::consts::PI).sqrt() * (-mu * mu / (2.0 * s * s)).exp() + mu * (1.0 - 2.0 * phi.cdf(-mu / s))
}

#[test]
fn energy_distance_of_shifted_gaussians() {
    let n = 10_000;
    let a = sample_normal(&mut RandomSource::new(1), &[n, 1]);
    let b = sample_normal(&mut RandomSource::new(2), &[n, 1]).add(&Tensor::scalar(3.0)).unwrap();
    let cross = folded_normal_mean(3.0, 2f64.sqrt());
    let within = folded_normal_mean(0.0, 2f64.sqrt());
    let want = 2.0 * cross - 2.0 * within;
    let got = energy_distance(&a, &b).unwrap();
    assert!(((got - want) / want).abs() < 0.05, "{got} vs {want}");
}

#[test]
fn energy_distance_of_a_multiset_with_itself_is_zero() {
    let a = sample_normal(&mut RandomSource::new(3), &[50, 2]);
    let mut rows: Vec<Vec<f64>> = (0..50).map(|r| a.record(r).to_vec()).collect();
    rows.reverse();
    let b = Tensor::from_vec([50, 2], rows.concat()).unwrap();
    assert_eq!(energy_distance(&a, &b).unwrap(), 0.0);
    assert!(matches!(
        energy_distance(&a, &Tensor::zeros([0, 2])),
        Err(Error::Precondition(_))
    ));
}

#[test]
fn single_point_dataset() {
    let ds = make_2d_dataset(&ToyKind::from_name("single_point").unwrap(), 5, &mut RandomSource::new(0)).unwrap();
    let raw = ds.denormalized();
    assert_eq!(raw.records(), 5);
    for r in 0..5 {
        assert_eq!(raw.record(r), &[1.0, 1.0]);
    }
    assert!(matches!(ToyKind::from_name("spiral"), Err(Error::UnknownKind(_))));
}

#[test]
fn centred_mixture_has_zero_mean() {
    let kind = ToyKind::GaussMixture {
        centers: vec![[0.0, 0.0]],
        std: 0.5,
    };
    let n = 4000;
    let ds = make_2d_dataset(&kind, n, &mut RandomSource::new(4)).unwrap();
    let raw = ds.denormalized();
    for axis in 0..2 {
        let mean = (0..n).map(|r| raw.record(r)[axis]).sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 * 0.5 / (n as f64).sqrt(), "{mean}");
    }
}

#[test]
fn two_moons_stay_near_the_origin() {
    let ds = make_2d_dataset(&ToyKind::from_name("two_moons").unwrap(), 5000, &mut RandomSource::new(5)).unwrap();
    for r in 0..ds.len() {
        let p = ds.samples.record(r);
        assert!(p[0].hypot(p[1]) < 2.0);
    }
}

#[test]
fn structured_defaults_and_dead_tokens() {
    let spec = StructuredSpec::default();
    assert_eq!((spec.parts, spec.bbox_width, spec.code_width), (8, 4, 8));
    assert_eq!(spec.token_width(), 13);
    for class in 0..2 {
        let ds = make_structured_dataset(&spec, class, 200, &mut RandomSource::new(6)).unwrap();
        for r in 0..ds.len() {
            let rec = ds.samples.record(r);
            assert!(structure_validity(rec, class, &spec).all());
            for tok in rec.chunks(13) {
                if tok[0] == 0.0 {
                    assert!(tok.iter().all(|&v| v == 0.0));
                }
            }
        }
    }
}

#[test]
fn structured_generator_is_deterministic() {
    let spec = StructuredSpec::default();
    let a = make_structured_dataset(&spec, 1, 20, &mut RandomSource::new(7)).unwrap();
    let b = make_structured_dataset(&spec, 1, 20, &mut RandomSource::new(7)).unwrap();
    assert_eq!(a.samples, b.samples);
}

#[test]
fn validity_rules_catch_violations() {
    let spec = StructuredSpec::default();
    let ds = make_structured_dataset(&spec, 0, 1, &mut RandomSource::new(8)).unwrap();
    let rec = ds.samples.record(0).to_vec();
    let live = rec.chunks(13).position(|t| t[0] == 1.0).unwrap();

    let mut moved = rec.clone();
    moved[live * 13 + 1] = 5.0;
    let r = structure_validity(&moved, 0, &spec);
    assert!(!r.in_bounds && r.binary_existence);

    let mut soft = rec.clone();
    soft[live * 13] = 0.4;
    assert!(!structure_validity(&soft, 0, &spec).binary_existence);

    // A table is not a chair.
    assert!(!structure_validity(&rec, 1, &spec).class_rule);
}

#[test]
fn parts_json_round_trip() {
    let spec = StructuredSpec::default();
    let ds = make_structured_dataset(&spec, 1, 1, &mut RandomSource::new(9)).unwrap();
    let rec = ds.samples.record(0);
    let parts = record_to_parts(rec, &spec);
    let json = serde_json::to_string(&parts).unwrap();
    let back: Vec<PartRecord> = serde_json::from_str(&json).unwrap();
    assert_eq!(parts_to_record(&back, &spec).unwrap(), rec);
    assert!(parts_to_record(&vec![back[0].clone(); 9], &spec).is_err());
}

#[test]
fn dataset_persists_as_csv_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_2d_dataset(&ToyKind::from_name("checkerboard").unwrap(), 300, &mut RandomSource::new(10)).unwrap();
    let csv = dir.path().join("data.csv");
    let meta = dir.path().join("data.json");
    ds.samples.write_csv(&csv).unwrap();
    std::fs::write(&meta, serde_json::to_string(&ds.metadata(10)).unwrap()).unwrap();

    let samples = Tensor::read_csv(&csv).unwrap();
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&meta).unwrap()).unwrap();
    assert_eq!(m["kind"], "checkerboard");
    assert_eq!(m["seed"], 10);
    let normalization: Normalization = serde_json::from_value(m["normalization"].clone()).unwrap();
    let restored = ToyDataset {
        kind: "checkerboard".into(),
        samples,
        labels: vec![0; 300],
        normalization,
    };
    assert_eq!(restored.denormalized(), ds.denormalized());
}

#[test]
fn packing_round_trips() {
    let pts = sample_normal(&mut RandomSource::new(11), &[12, 2]);
    let packed = pack_points(&pts, 1, 2).unwrap();
    assert_eq!(packed.shape(), &[6, 2, 1, 2]);
    assert_eq!(unpack_points(&packed).unwrap(), pts);
}

proptest! {
    #[test]
    fn energy_distance_is_symmetric_and_nonnegative(seed in 0u64..500, n in 2usize..30, m in 2usize..30) {
        let a = sample_normal(&mut RandomSource::new(seed), &[n, 2]);
        let b = sample_normal(&mut RandomSource::new(seed + 1000), &[m, 2]);
        let ab = energy_distance(&a, &b).unwrap();
        prop_assert_eq!(ab, energy_distance(&b, &a).unwrap());
        prop_assert!(ab >= -1e-12);
    }

    #[test]
    fn normalization_round_trips(seed in 0u64..500) {
        let ds = make_2d_dataset(&ToyKind::from_name("two_moons").unwrap(), 64, &mut RandomSource::new(seed)).unwrap();
        let raw = ds.denormalized();
        for r in 0..64 {
            let mut row = raw.record(r).to_vec();
            ds.normalization.normalize(&mut row);
            for (x, y) in row.iter().zip(ds.samples.record(r)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
