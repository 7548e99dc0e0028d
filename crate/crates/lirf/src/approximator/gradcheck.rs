use rand::seq::index::sample;
use rand::Rng;

use super::mlp::Mlp;
use crate::error::{LirfError, Result};

/// A scalar objective over a flat parameter vector with an analytic gradient.
pub trait Objective {
    fn num_params(&self) -> usize;
    fn loss(&self, params: &[f64]) -> Result<f64>;
    fn loss_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)>;
}

pub const FD_STEP: f64 = 1e-5;
pub const MIN_CHECKED_COORDS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub coords_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the analytic gradient against central differences with step
/// [`FD_STEP`] on a random subset of at least [`MIN_CHECKED_COORDS`]
/// coordinates (all of them when there are fewer).
///
/// Relative error per coordinate is `|g − fd| / (|g| + 1e−8)`.
pub fn grad_check<O: Objective + ?Sized>(
    objective: &O,
    params: &[f64],
    tolerance: f64,
    rng: &mut impl Rng,
) -> Result<GradCheckReport> {
    let analytic = objective.loss_and_grad(params)?.1;
    grad_check_against(objective, params, &analytic, tolerance, rng)
}

/// Like [`grad_check`] but checks a caller-supplied gradient vector.
pub fn grad_check_against<O: Objective + ?Sized>(
    objective: &O,
    params: &[f64],
    analytic: &[f64],
    tolerance: f64,
    rng: &mut impl Rng,
) -> Result<GradCheckReport> {
    let n = objective.num_params();
    if params.len() != n || analytic.len() != n {
        return Err(LirfError::DimensionMismatch {
            expected: n,
            got: params.len().min(analytic.len()),
        });
    }
    let coords: Vec<usize> = if n <= MIN_CHECKED_COORDS {
        (0..n).collect()
    } else {
        let mut c = sample(rng, n, MIN_CHECKED_COORDS).into_vec();
        c.sort_unstable();
        c
    };
    let mut probe = params.to_vec();
    let mut max_rel_error = 0.0f64;
    let mut worst_coordinate = coords.first().copied().unwrap_or(0);
    for &i in &coords {
        let orig = probe[i];
        probe[i] = orig + FD_STEP;
        let up = objective.loss(&probe)?;
        probe[i] = orig - FD_STEP;
        let down = objective.loss(&probe)?;
        probe[i] = orig;
        let fd = (up - down) / (2.0 * FD_STEP);
        let rel = (analytic[i] - fd).abs() / (analytic[i].abs() + 1e-8);
        if rel > max_rel_error || rel.is_nan() {
            max_rel_error = rel;
            worst_coordinate = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_coordinate,
        coords_checked: coords.len(),
        tolerance,
        passed: max_rel_error <= tolerance,
    })
}

/// Mean over a batch of `½‖f(x) − y‖²` for a single network.
pub struct SquaredErrorObjective<'a> {
    pub template: &'a Mlp,
    pub inputs: &'a [Vec<f64>],
    pub targets: &'a [Vec<f64>],
}

impl SquaredErrorObjective<'_> {
    fn model(&self, params: &[f64]) -> Result<Mlp> {
        let mut m = self.template.clone();
        m.set_weights(params)?;
        Ok(m)
    }
}

impl Objective for SquaredErrorObjective<'_> {
    fn num_params(&self) -> usize {
        self.template.num_params()
    }

    fn loss(&self, params: &[f64]) -> Result<f64> {
        let m = self.model(params)?;
        let mut total = 0.0;
        for (x, y) in self.inputs.iter().zip(self.targets) {
            let out = m.forward(x)?;
            total += 0.5
                * out
                    .iter()
                    .zip(y)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
        }
        Ok(total / self.inputs.len() as f64)
    }

    fn loss_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let m = self.model(params)?;
        let n = self.inputs.len() as f64;
        let mut grad = vec![0.0; m.num_params()];
        let mut total = 0.0;
        for (x, y) in self.inputs.iter().zip(self.targets) {
            let trace = m.forward_trace(x)?;
            let resid: Vec<f64> = trace.output().iter().zip(y).map(|(a, b)| a - b).collect();
            total += 0.5 * resid.iter().map(|r| r * r).sum::<f64>();
            let d_out: Vec<f64> = resid.iter().map(|r| r / n).collect();
            m.backward(&trace, &d_out, &mut grad);
        }
        Ok((total / n, grad))
    }
}
