use std::io::Write;

use flate2::write::GzEncoder;
use flate2::Compression;
use lirf::datasets::{
    encode_idx_images, encode_idx_labels, few_shot, generate, isometric_lift, split, DatasetKind,
    DatasetSpec,
};
use lirf::geometry::{euclidean_distance, PointSet};
use lirf::rng::rng_from_seed;
use proptest::prelude::*;
use rand::Rng;

fn write_idx(dir: &std::path::Path, n: usize, gz: bool) -> std::path::PathBuf {
    let mut rng = rng_from_seed(71);
    let images: Vec<Vec<u8>> = (0..n)
        .map(|_| (0..28 * 28).map(|_| rng.random::<u8>()).collect())
        .collect();
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    let (img, lab) = (
        encode_idx_images(&images, 28, 28),
        encode_idx_labels(&labels),
    );
    let suffix = if gz { ".gz" } else { "" };
    let ip = dir.join(format!("train-images-idx3-ubyte{suffix}"));
    let lp = dir.join(format!("train-labels-idx1-ubyte{suffix}"));
    for (p, bytes) in [(&ip, img), (&lp, lab)] {
        let bytes = if gz {
            let mut e = GzEncoder::new(Vec::new(), Compression::default());
            e.write_all(&bytes).unwrap();
            e.finish().unwrap()
        } else {
            bytes
        };
        std::fs::write(p, bytes).unwrap();
    }
    ip
}

#[test]
fn idx_few_shot_gives_ten_per_class() {
    let dir = tempfile::tempdir().unwrap();
    for gz in [false, true] {
        let ip = write_idx(dir.path(), 300, gz);
        let spec = DatasetSpec {
            source_path: Some(ip),
            few_shot_per_class: Some(10),
            ..DatasetSpec::new(DatasetKind::DigitsIdx, 100, 0.0, 3)
        };
        let d = generate(&spec).unwrap().data;
        assert_eq!(d.len(), 100);
        assert_eq!(d.dim(), 784);
        for c in 0..10 {
            assert_eq!(d.labels().unwrap().iter().filter(|&&l| l == c).count(), 10);
        }
        assert!(d.as_flat().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(generate(&spec).unwrap().data, d);
    }
}

#[test]
fn generation_is_seeded() {
    for kind in [
        DatasetKind::Circle2d,
        DatasetKind::TwoMoons,
        DatasetKind::SwissRoll3d,
        DatasetKind::GaussianMixture,
        DatasetKind::DigitBlobs,
    ] {
        let a = generate(&DatasetSpec::new(kind, 50, 0.1, 1)).unwrap();
        let b = generate(&DatasetSpec::new(kind, 50, 0.1, 1)).unwrap();
        let c = generate(&DatasetSpec::new(kind, 50, 0.1, 2)).unwrap();
        assert_eq!(a, b, "{kind}");
        assert_ne!(a.data, c.data, "{kind}");
        assert_eq!(a.data.len(), 50);
    }
}

fn labelled(rng: &mut impl Rng, n: usize, classes: i64) -> PointSet {
    let flat: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    PointSet::from_flat(2, flat, Some((0..n as i64).map(|i| i % classes).collect())).unwrap()
}

proptest! {
    #[test]
    fn split_is_a_stratified_partition(seed in any::<u64>(), per in 4usize..20, classes in 1i64..5, frac in 0.2f64..0.8) {
        let mut rng = rng_from_seed(seed);
        let data = labelled(&mut rng, per * classes as usize, classes);
        let (train, hold) = split(&data, frac, seed).unwrap();
        prop_assert_eq!(train.len() + hold.len(), data.len());
        for c in 0..classes {
            let count = |s: &PointSet| s.labels().unwrap().iter().filter(|&&l| l == c).count();
            prop_assert!(count(&hold) >= 1 && count(&train) >= 1);
        }
        let mut all: Vec<Vec<u64>> = train.iter().chain(hold.iter()).map(|p| p.iter().map(|v| v.to_bits()).collect()).collect();
        let mut orig: Vec<Vec<u64>> = data.iter().map(|p| p.iter().map(|v| v.to_bits()).collect()).collect();
        all.sort();
        orig.sort();
        prop_assert_eq!(all, orig);
    }

    #[test]
    fn few_shot_counts(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = rng_from_seed(seed);
        let data = labelled(&mut rng, 40, 4);
        let s = few_shot(&data, k, seed).unwrap();
        prop_assert_eq!(s.len(), 4 * k);
        for c in 0..4 {
            prop_assert_eq!(s.labels().unwrap().iter().filter(|&&l| l == c).count(), k);
        }
    }

    #[test]
    fn lift_preserves_distances(seed in any::<u64>(), to in 2usize..12) {
        let lift = isometric_lift(2, to, seed).unwrap();
        let mut rng = rng_from_seed(seed ^ 1);
        let a = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let b = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let d0 = euclidean_distance(&a, &b).unwrap();
        let lifted = lift.apply(&PointSet::from_rows(&[a, b], None).unwrap()).unwrap();
        prop_assert_eq!(lifted.dim(), to);
        let d1 = euclidean_distance(lifted.point(0), lifted.point(1)).unwrap();
        prop_assert!((d0 - d1).abs() <= 1e-12 * (1.0 + d0));
    }
}
