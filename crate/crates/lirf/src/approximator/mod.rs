//! Small feed-forward networks with hand-written reverse-mode gradients, the
//! Adam optimizer, finite-difference gradient checks and a text checkpoint
//! format.

mod adam;
mod gradcheck;
mod mlp;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, OptimState};
pub use gradcheck::{
    grad_check, grad_check_against, GradCheckReport, Objective, SquaredErrorObjective, FD_STEP,
    MIN_CHECKED_COORDS,
};
pub use mlp::{param_count, Activation, Mlp, Trace};

use crate::error::{LirfError, Result};

/// Items per work unit in [`par_accumulate`]. Fixed so the reduction order
/// does not depend on the number of worker threads.
const CHUNK: usize = 8;

/// Evaluates `f(i, grad)` for every item, accumulating gradients.
///
/// Items are grouped into fixed-size chunks evaluated in parallel; chunk
/// results are summed in chunk order, so the result is bit-identical for any
/// thread count.
pub(crate) fn par_accumulate<F>(n_items: usize, n_params: usize, f: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(usize, &mut [f64]) -> Result<f64> + Sync,
{
    let chunks: Vec<(f64, Vec<f64>)> = (0..n_items.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut grad = vec![0.0; n_params];
            let mut loss = 0.0;
            for i in c * CHUNK..((c + 1) * CHUNK).min(n_items) {
                loss += f(i, &mut grad)?;
            }
            Ok((loss, grad))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut grad = vec![0.0; n_params];
    for (l, g) in chunks {
        total += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((total, grad))
}

pub const MLP_FORMAT: &str = "lirf-mlp/1";

/// Serialized form of an [`Mlp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub format: String,
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
    pub weights: Vec<f64>,
}

impl From<&Mlp> for MlpCheckpoint {
    fn from(m: &Mlp) -> Self {
        Self {
            format: MLP_FORMAT.to_string(),
            layer_dims: m.layer_dims().to_vec(),
            activation: m.activation(),
            seed: m.seed(),
            weights: m.weights().to_vec(),
        }
    }
}

impl MlpCheckpoint {
    pub fn into_mlp(self) -> Result<Mlp> {
        if self.format != MLP_FORMAT {
            return Err(LirfError::format(
                "network checkpoint",
                format!("format tag `{}`, expected `{MLP_FORMAT}`", self.format),
            ));
        }
        Mlp::from_parts(&self.layer_dims, self.activation, self.seed, self.weights)
    }
}

impl Mlp {
    pub fn to_checkpoint_string(&self) -> String {
        toml::to_string(&MlpCheckpoint::from(self)).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_str(s: &str) -> Result<Mlp> {
        let ck: MlpCheckpoint = toml::from_str(s)
            .map_err(|e| LirfError::format("network checkpoint", e.to_string()))?;
        ck.into_mlp()
    }
}
