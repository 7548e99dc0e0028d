use crate::error::{LirfError, Result};

/// Sum of squared component differences, accumulated in component order.
#[inline]
pub(crate) fn dist_sq_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

#[inline]
pub(crate) fn dist_unchecked(a: &[f64], b: &[f64]) -> f64 {
    dist_sq_unchecked(a, b).sqrt()
}

pub(crate) fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(LirfError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

/// L2 distance `‖a − b‖₂`.
pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    Ok(dist_unchecked(a, b))
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}
