//! Conditional flow matching on the straight path `z_t = t·z1 + (1 − t)·z0`
//! with `z0 ~ N(0, I)` and target velocity `z1 − z0`, and fixed-step Euler
//! sampling of the learned ODE from `t = 0` to `t = 1`.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approximator::{
    adam_step, par_accumulate, Activation, AdamConfig, Mlp, MlpCheckpoint, OptimState,
};
use crate::error::{LirfError, Result};
use crate::geometry::PointSet;
use crate::rng::{rng_from_seed, seed_for, substream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub latent_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub epochs_initial: usize,
    pub epochs_finetune: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub ode_steps: usize,
    pub label_conditioning: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            hidden_dims: vec![64, 64],
            activation: Activation::Gelu,
            epochs_initial: 300,
            epochs_finetune: 30,
            batch_size: 64,
            learning_rate: 2e-3,
            seed: 0,
            ode_steps: 100,
            label_conditioning: false,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LirfError::InvalidConfig(m.to_string()));
        if self.latent_dim == 0 {
            return bad("latent dim must be positive");
        }
        if self.ode_steps == 0 {
            return bad("ode_steps must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }
}

/// A time-dependent vector field `v(t, z)` on the latent space.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;
    /// `class` is the one-hot slot of the conditioning label, if any.
    fn velocity(&self, t: f64, z: &[f64], class: Option<usize>) -> Result<Vec<f64>>;
}

/// Wraps a closure as a [`VelocityField`].
pub struct FnField<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> VelocityField for FnField<F>
where
    F: Fn(f64, &[f64]) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, t: f64, z: &[f64], _class: Option<usize>) -> Result<Vec<f64>> {
        Ok((self.f)(t, z))
    }
}

/// The learned field `v_θ`: an MLP on `[z, t, one-hot(label)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    net: Mlp,
    config: FlowConfig,
    classes: Vec<i64>,
    converged_loss: Option<f64>,
    loss_curve: Vec<f64>,
}

impl FlowModel {
    /// Fresh network. `classes` lists the conditioning labels (empty when unconditioned).
    pub fn new(config: &FlowConfig, classes: Vec<i64>) -> Result<Self> {
        config.validate()?;
        if config.label_conditioning && classes.is_empty() {
            return Err(LirfError::InvalidConfig(
                "label conditioning needs labelled anchors".into(),
            ));
        }
        let classes = if config.label_conditioning {
            classes
        } else {
            Vec::new()
        };
        let mut dims = vec![config.latent_dim + 1 + classes.len()];
        dims.extend(&config.hidden_dims);
        dims.push(config.latent_dim);
        Ok(Self {
            net: Mlp::new(&dims, config.activation, seed_for(config.seed, "flow-init"))?,
            config: config.clone(),
            classes,
            converged_loss: None,
            loss_curve: Vec::new(),
        })
    }

    pub fn from_net(net: Mlp, config: FlowConfig, classes: Vec<i64>) -> Result<Self> {
        if net.output_dim() != config.latent_dim
            || net.input_dim() != config.latent_dim + 1 + classes.len()
        {
            return Err(LirfError::InvalidConfig(format!(
                "network dims {:?} do not fit latent dim {} with {} classes",
                net.layer_dims(),
                config.latent_dim,
                classes.len()
            )));
        }
        Ok(Self {
            net,
            config,
            classes,
            converged_loss: None,
            loss_curve: Vec::new(),
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn classes(&self) -> &[i64] {
        &self.classes
    }

    pub fn converged_loss(&self) -> Option<f64> {
        self.converged_loss
    }

    /// Mean batch loss per epoch of the most recent training call.
    pub fn loss_curve(&self) -> &[f64] {
        &self.loss_curve
    }

    fn class_slot(&self, label: Option<i64>) -> Result<Option<usize>> {
        if self.classes.is_empty() {
            return Ok(None);
        }
        let label = label
            .ok_or_else(|| LirfError::InvalidConfig("conditioned flow needs labels".into()))?;
        self.classes.binary_search(&label).map(Some).map_err(|_| {
            LirfError::InvalidConfig(format!("label {label} unknown to the flow model"))
        })
    }

    fn net_input(&self, t: f64, z: &[f64], class: Option<usize>) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.net.input_dim());
        x.extend_from_slice(z);
        x.push(t);
        if !self.classes.is_empty() {
            let mut onehot = vec![0.0; self.classes.len()];
            if let Some(c) = class {
                onehot[c] = 1.0;
            }
            x.extend(onehot);
        }
        x
    }

    pub fn to_checkpoint_string(&self) -> String {
        let ck = FlowCheckpoint {
            format: FLOW_FORMAT.into(),
            classes: self.classes.clone(),
            converged_loss: self.converged_loss,
            config: self.config.clone(),
            net: (&self.net).into(),
        };
        toml::to_string(&ck).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_str(s: &str) -> Result<Self> {
        let ck: FlowCheckpoint =
            toml::from_str(s).map_err(|e| LirfError::format("flow checkpoint", e.to_string()))?;
        if ck.format != FLOW_FORMAT {
            return Err(LirfError::format(
                "flow checkpoint",
                format!("format tag `{}`, expected `{FLOW_FORMAT}`", ck.format),
            ));
        }
        let mut m = FlowModel::from_net(ck.net.into_mlp()?, ck.config, ck.classes)?;
        m.converged_loss = ck.converged_loss;
        Ok(m)
    }
}

impl VelocityField for FlowModel {
    fn dim(&self) -> usize {
        self.config.latent_dim
    }

    fn velocity(&self, t: f64, z: &[f64], class: Option<usize>) -> Result<Vec<f64>> {
        if z.len() != self.config.latent_dim {
            return Err(LirfError::DimensionMismatch {
                expected: self.config.latent_dim,
                got: z.len(),
            });
        }
        self.net.forward(&self.net_input(t, z, class))
    }
}

pub const FLOW_FORMAT: &str = "lirf-flow/1";

#[derive(Debug, Serialize, Deserialize)]
struct FlowCheckpoint {
    format: String,
    classes: Vec<i64>,
    converged_loss: Option<f64>,
    config: FlowConfig,
    net: MlpCheckpoint,
}

/// The random pair drawn for one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct CfmDraw {
    pub t: f64,
    pub z0: Vec<f64>,
}

/// Per example, in order: `t ~ U[0, 1)` then the `dim` components of `z0 ~ N(0, I)`.
pub fn draw_cfm(rng: &mut impl Rng, n: usize, dim: usize) -> Vec<CfmDraw> {
    (0..n)
        .map(|_| {
            let t = rng.random::<f64>();
            let z0 = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            CfmDraw { t, z0 }
        })
        .collect()
}

fn check_batch(z1: &PointSet, draws: &[CfmDraw], dim: usize) -> Result<()> {
    if z1.is_empty() {
        return Err(LirfError::Empty("flow batch"));
    }
    if z1.dim() != dim {
        return Err(LirfError::DimensionMismatch {
            expected: dim,
            got: z1.dim(),
        });
    }
    if draws.len() != z1.len() {
        return Err(LirfError::DimensionMismatch {
            expected: z1.len(),
            got: draws.len(),
        });
    }
    Ok(())
}

fn interpolate(z1: &[f64], d: &CfmDraw) -> (Vec<f64>, Vec<f64>) {
    let zt = z1
        .iter()
        .zip(&d.z0)
        .map(|(a, b)| d.t * a + (1.0 - d.t) * b)
        .collect();
    let u = z1.iter().zip(&d.z0).map(|(a, b)| a - b).collect();
    (zt, u)
}

/// Batch-mean `‖v(t, z_t) − (z1 − z0)‖²` for given draws and any field.
///
/// `classes` gives the one-hot slot per example when the field is conditioned.
pub fn cfm_loss_with_draws(
    field: &dyn VelocityField,
    z1: &PointSet,
    classes: Option<&[usize]>,
    draws: &[CfmDraw],
) -> Result<f64> {
    check_batch(z1, draws, field.dim())?;
    let mut total = 0.0;
    for (i, d) in draws.iter().enumerate() {
        let (zt, u) = interpolate(z1.point(i), d);
        let v = field.velocity(d.t, &zt, classes.map(|c| c[i]))?;
        total += v
            .iter()
            .zip(&u)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    let loss = total / z1.len() as f64;
    if !loss.is_finite() {
        return Err(LirfError::NonFinite("flow matching loss".into()));
    }
    Ok(loss)
}

/// Loss and analytic gradient with respect to the network weights for given draws.
pub fn cfm_loss_grad_with_draws(
    model: &FlowModel,
    z1: &PointSet,
    draws: &[CfmDraw],
) -> Result<(f64, Vec<f64>)> {
    check_batch(z1, draws, model.config.latent_dim)?;
    let slots: Vec<Option<usize>> = (0..z1.len())
        .map(|i| model.class_slot(z1.label(i)))
        .collect::<Result<_>>()?;
    let n = z1.len() as f64;
    let (total, grad) = par_accumulate(z1.len(), model.net.num_params(), |i, g| {
        let d = &draws[i];
        let (zt, u) = interpolate(z1.point(i), d);
        let trace = model
            .net
            .forward_trace(&model.net_input(d.t, &zt, slots[i]))?;
        let resid: Vec<f64> = trace.output().iter().zip(&u).map(|(a, b)| a - b).collect();
        let d_out: Vec<f64> = resid.iter().map(|r| 2.0 * r / n).collect();
        model.net.backward(&trace, &d_out, g);
        Ok(resid.iter().map(|r| r * r).sum::<f64>())
    })?;
    let loss = total / n;
    if !loss.is_finite() {
        return Err(LirfError::NonFinite("flow matching loss".into()));
    }
    Ok((loss, grad))
}

/// Draws `t` and `z0` for every example of `z1_batch` and returns the loss and gradient.
pub fn cfm_batch_loss(
    model: &FlowModel,
    z1_batch: &PointSet,
    rng: &mut impl Rng,
) -> Result<(f64, Vec<f64>)> {
    let draws = draw_cfm(rng, z1_batch.len(), model.config.latent_dim);
    cfm_loss_grad_with_draws(model, z1_batch, &draws)
}

/// Trains a fresh model for `epochs_initial` epochs, or continues `warm_start`
/// for `epochs_finetune` epochs with a fresh optimizer state.
pub fn train_flow(
    anchors: &PointSet,
    config: &FlowConfig,
    warm_start: Option<&FlowModel>,
) -> Result<FlowModel> {
    config.validate()?;
    if anchors.is_empty() {
        return Err(LirfError::Empty("anchor set"));
    }
    if anchors.dim() != config.latent_dim {
        return Err(LirfError::DimensionMismatch {
            expected: config.latent_dim,
            got: anchors.dim(),
        });
    }
    let (mut model, epochs) = match warm_start {
        Some(m) => {
            let mut m = m.clone();
            m.config = config.clone();
            (m, config.epochs_finetune)
        }
        None => (
            FlowModel::new(config, anchors.distinct_labels())?,
            config.epochs_initial,
        ),
    };
    if epochs == 0 {
        return Ok(model);
    }
    let mut rng = rng_from_seed(seed_for(config.seed, "flow-train"));
    let mut state = OptimState::new(
        model.net.num_params(),
        AdamConfig::with_learning_rate(config.learning_rate),
    );
    let mut params = model.net.weights().to_vec();
    let mut order: Vec<usize> = (0..anchors.len()).collect();
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut nb = 0usize;
        for idx in order.chunks(config.batch_size) {
            let batch = anchors.select(idx);
            let diverged = |e: LirfError| LirfError::Diverged {
                epoch,
                reason: e.to_string(),
            };
            let (loss, grad) = cfm_batch_loss(&model, &batch, &mut rng).map_err(diverged)?;
            adam_step(&mut params, &grad, &mut state).map_err(diverged)?;
            model.net.set_weights(&params)?;
            sum += loss;
            nb += 1;
        }
        curve.push(sum / nb as f64);
    }
    model.converged_loss = curve.last().copied();
    model.loss_curve = curve;
    Ok(model)
}

/// Explicit Euler with `steps` uniform steps from `t = 0` to `t = 1`.
pub fn euler_integrate(
    field: &dyn VelocityField,
    z0: &[f64],
    class: Option<usize>,
    steps: usize,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(LirfError::InvalidConfig(
            "ode_steps must be at least 1".into(),
        ));
    }
    let dt = 1.0 / steps as f64;
    let mut z = z0.to_vec();
    for k in 0..steps {
        let t = k as f64 * dt;
        let v = field.velocity(t, &z, class)?;
        for (zi, vi) in z.iter_mut().zip(&v) {
            *zi += dt * vi;
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(LirfError::NonFinite(format!("ODE state at step {k}")));
        }
    }
    Ok(z)
}

/// Samples `n` points by integrating `field` from Gaussian draws.
///
/// Trajectory `j` uses substream `j` of a base seed taken from `rng`; with
/// `classes` non-empty it first draws a class uniformly and the output point
/// carries that label.
pub fn sample_field(
    field: &dyn VelocityField,
    n: usize,
    steps: usize,
    classes: &[i64],
    rng: &mut impl RngCore,
) -> Result<PointSet> {
    if n == 0 {
        return Err(LirfError::InvalidConfig(
            "sample count must be at least 1".into(),
        ));
    }
    let base = rng.next_u64();
    let dim = field.dim();
    let rows: Vec<(Vec<f64>, Option<usize>)> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut r = substream(base, j as u64);
            let class = (!classes.is_empty()).then(|| r.random_range(0..classes.len()));
            let z0: Vec<f64> = (0..dim).map(|_| r.sample(StandardNormal)).collect();
            Ok((euler_integrate(field, &z0, class, steps)?, class))
        })
        .collect::<Result<_>>()?;
    let mut out = if classes.is_empty() {
        PointSet::new(dim)?
    } else {
        PointSet::new_labeled(dim)?
    };
    for (z, c) in rows {
        out.push(&z, c.map(|c| classes[c]))?;
    }
    Ok(out)
}

pub fn sample_flow(model: &FlowModel, n: usize, rng: &mut impl RngCore) -> Result<PointSet> {
    sample_field(model, n, model.config.ode_steps, &model.classes, rng)
}
