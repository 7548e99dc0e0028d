//! Exact vector geometry: distances, k-NN, Hausdorff distance and
//! bi-Lipschitz ratio estimation. All distances are Euclidean.

mod distance;
mod index;
mod pointset;

use rayon::prelude::*;

pub(crate) use distance::dist_unchecked;
pub use distance::{euclidean_distance, norm};
pub use index::{Neighbor, NeighborIndex, KD_MAX_DIM};
pub use pointset::{fmt_f64, PointSet};

use crate::error::{LirfError, Result};

/// Smallest distance from `query` to any member of `set`.
pub fn min_distance_to_set(query: &[f64], set: &PointSet) -> Result<f64> {
    if set.is_empty() {
        return Err(LirfError::Empty("point set"));
    }
    if query.len() != set.dim() {
        return Err(LirfError::DimensionMismatch {
            expected: set.dim(),
            got: query.len(),
        });
    }
    Ok(set
        .iter()
        .map(|p| dist_unchecked(query, p))
        .fold(f64::INFINITY, f64::min))
}

/// `max_{a∈A} min_{b∈B} ‖a − b‖`.
pub fn directed_hausdorff(a: &PointSet, b: &PointSet) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(LirfError::Empty("point set"));
    }
    if a.dim() != b.dim() {
        return Err(LirfError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let index = NeighborIndex::new(b);
    let mins: Vec<f64> = (0..a.len())
        .into_par_iter()
        .map(|i| index.nearest(a.point(i)).map(|n| n.distance))
        .collect::<Result<_>>()?;
    Ok(mins.into_iter().fold(0.0, f64::max))
}

/// Symmetric Hausdorff distance.
pub fn hausdorff_distance(a: &PointSet, b: &PointSet) -> Result<f64> {
    Ok(directed_hausdorff(a, b)?.max(directed_hausdorff(b, a)?))
}

/// Sample estimates of the lower and upper bi-Lipschitz constants of a map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzRatios {
    pub c1: f64,
    pub c2: f64,
}

impl LipschitzRatios {
    /// `c2 / c1`; 1 for an isometry up to scale.
    pub fn spread(&self) -> f64 {
        self.c2 / self.c1
    }
}

/// Min and max over pairs of `‖E(a) − E(b)‖ / ‖a − b‖`.
pub fn bilipschitz_ratios<F>(pairs: &[(&[f64], &[f64])], encode: F) -> Result<LipschitzRatios>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if pairs.is_empty() {
        return Err(LirfError::Empty("pair list"));
    }
    let mut c1 = f64::INFINITY;
    let mut c2 = 0.0f64;
    for (i, (a, b)) in pairs.iter().enumerate() {
        let dx = euclidean_distance(a, b)?;
        if dx == 0.0 {
            return Err(LirfError::ZeroDistancePair(i));
        }
        let dz = euclidean_distance(&encode(a)?, &encode(b)?)?;
        let r = dz / dx;
        c1 = c1.min(r);
        c2 = c2.max(r);
    }
    Ok(LipschitzRatios { c1, c2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn random_set(rng: &mut impl Rng, n: usize, dim: usize) -> PointSet {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        PointSet::from_rows(&rows, None).unwrap()
    }

    fn hausdorff_oracle(a: &PointSet, b: &PointSet) -> f64 {
        let directed = |x: &PointSet, y: &PointSet| {
            let mut worst = 0.0f64;
            for p in x.iter() {
                let mut best = f64::INFINITY;
                for q in y.iter() {
                    best = best.min(euclidean_distance(p, q).unwrap());
                }
                worst = worst.max(best);
            }
            worst
        };
        directed(a, b).max(directed(b, a))
    }

    #[test]
    fn min_distance_examples() {
        let s = PointSet::from_rows(&[[0.0, 0.0], [3.0, 0.0]], None).unwrap();
        assert_eq!(min_distance_to_set(&[1.0, 0.0], &s).unwrap(), 1.0);
        assert_eq!(min_distance_to_set(&[3.0, 0.0], &s).unwrap(), 0.0);
        assert!(min_distance_to_set(&[1.0, 0.0], &s.empty_like()).is_err());
    }

    #[test]
    fn min_distance_is_a_lower_bound() {
        let mut rng = rng_from_seed(5);
        for _ in 0..50 {
            let s = random_set(&mut rng, 20, 3);
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let m = min_distance_to_set(&q, &s).unwrap();
            let oracle = s
                .iter()
                .map(|p| euclidean_distance(&q, p).unwrap())
                .fold(f64::INFINITY, f64::min);
            assert_eq!(m, oracle);
            for p in s.iter() {
                assert!(m <= euclidean_distance(&q, p).unwrap());
            }
        }
    }

    #[test]
    fn hausdorff_hand_case() {
        let a = PointSet::from_rows(&[[0.0, 0.0]], None).unwrap();
        let b = PointSet::from_rows(&[[1.0, 0.0], [2.0, 0.0]], None).unwrap();
        assert_eq!(directed_hausdorff(&a, &b).unwrap(), 1.0);
        assert_eq!(directed_hausdorff(&b, &a).unwrap(), 2.0);
        assert_eq!(hausdorff_distance(&a, &b).unwrap(), 2.0);
        assert_eq!(hausdorff_distance(&a, &a).unwrap(), 0.0);
        assert!(hausdorff_distance(&a, &a.empty_like()).is_err());
    }

    #[test]
    fn hausdorff_properties_random() {
        let mut rng = rng_from_seed(9);
        for _ in 0..30 {
            let a = random_set(&mut rng, 50, 4);
            let b = random_set(&mut rng, 50, 4);
            let c = random_set(&mut rng, 30, 4);
            let ab = hausdorff_distance(&a, &b).unwrap();
            assert_eq!(ab, hausdorff_oracle(&a, &b));
            assert_eq!(ab, hausdorff_distance(&b, &a).unwrap());
            let ac = hausdorff_distance(&a, &c).unwrap();
            let bc = hausdorff_distance(&b, &c).unwrap();
            assert!(ac <= ab + bc + 1e-12);
        }
    }

    #[test]
    fn bilipschitz_scalings() {
        let pairs_owned = [([0.0, 0.0], [1.0, 2.0]), ([3.0, -1.0], [0.5, 0.5])];
        let pairs: Vec<(&[f64], &[f64])> =
            pairs_owned.iter().map(|(a, b)| (&a[..], &b[..])).collect();
        let id = bilipschitz_ratios(&pairs, |x| Ok(x.to_vec())).unwrap();
        assert!((id.c1 - 1.0).abs() < 1e-15 && (id.c2 - 1.0).abs() < 1e-15);
        let double =
            bilipschitz_ratios(&pairs, |x| Ok(x.iter().map(|v| 2.0 * v).collect())).unwrap();
        assert!((double.c1 - 2.0).abs() < 1e-15 && (double.c2 - 2.0).abs() < 1e-15);
        let same = [([1.0, 1.0], [1.0, 1.0])];
        let same: Vec<(&[f64], &[f64])> = same.iter().map(|(a, b)| (&a[..], &b[..])).collect();
        assert!(matches!(
            bilipschitz_ratios(&same, |x| Ok(x.to_vec())),
            Err(LirfError::ZeroDistancePair(0))
        ));
    }
}
