use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LirfError, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    /// Tanh approximation of GELU.
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        }
    }

    /// Derivative evaluated at the pre-activation `x`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = LirfError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(LirfError::InvalidConfig(format!(
                "unknown activation `{other}`"
            ))),
        }
    }
}

/// Feed-forward network with a flat parameter vector.
///
/// Layer `l` stores its `out × in` weight matrix row-major followed by its
/// `out` biases. The activation is applied to hidden layers only; the output
/// layer is affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    activation: Activation,
    seed: u64,
    weights: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `inputs[l]` is the input to layer `l`; the last entry is the network output.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.inputs.last().expect("trace has an output")
    }

    pub fn input(&self) -> &[f64] {
        &self.inputs[0]
    }
}

pub fn param_count(layer_dims: &[usize]) -> usize {
    layer_dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 || layer_dims.contains(&0) {
        return Err(LirfError::InvalidConfig(format!(
            "layer dims must list at least two positive sizes, got {layer_dims:?}"
        )));
    }
    Ok(())
}

impl Mlp {
    /// Glorot-uniform weights drawn from `seed`, zero biases.
    pub fn new(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut rng = rng_from_seed(seed);
        let mut weights = Vec::with_capacity(param_count(layer_dims));
        for w in layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)));
            weights.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            activation,
            seed,
            weights,
        })
    }

    pub fn zeros(layer_dims: &[usize], activation: Activation) -> Result<Self> {
        validate_dims(layer_dims)?;
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            activation,
            seed: 0,
            weights: vec![0.0; param_count(layer_dims)],
        })
    }

    pub fn from_parts(
        layer_dims: &[usize],
        activation: Activation,
        seed: u64,
        weights: Vec<f64>,
    ) -> Result<Self> {
        validate_dims(layer_dims)?;
        let expected = param_count(layer_dims);
        if weights.len() != expected {
            return Err(LirfError::InvalidConfig(format!(
                "{} weights for layer dims {layer_dims:?}, expected {expected}",
                weights.len()
            )));
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(LirfError::NonFinite(format!("weight {i}")));
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            activation,
            seed,
            weights,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn set_weights(&mut self, weights: &[f64]) -> Result<()> {
        if weights.len() != self.weights.len() {
            return Err(LirfError::DimensionMismatch {
                expected: self.weights.len(),
                got: weights.len(),
            });
        }
        self.weights.copy_from_slice(weights);
        Ok(())
    }

    fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(LirfError::DimensionMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        let mut offset = 0;
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let w = &self.weights[offset..offset + n_in * n_out];
            let b = &self.weights[offset + n_in * n_out..offset + (n_in + 1) * n_out];
            offset += (n_in + 1) * n_out;
            let hidden = l + 1 < self.n_layers();
            let y: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    let z = b[o] + row.iter().zip(&x).map(|(a, v)| a * v).sum::<f64>();
                    if hidden {
                        self.activation.apply(z)
                    } else {
                        z
                    }
                })
                .collect();
            if y.iter().any(|v| !v.is_finite()) {
                return Err(LirfError::NonFinite(format!("layer {l} output")));
            }
            x = y;
        }
        Ok(x)
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.n_layers() + 1);
        let mut pre = Vec::with_capacity(self.n_layers().saturating_sub(1));
        inputs.push(input.to_vec());
        let mut offset = 0;
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let w = &self.weights[offset..offset + n_in * n_out];
            let b = &self.weights[offset + n_in * n_out..offset + (n_in + 1) * n_out];
            offset += (n_in + 1) * n_out;
            let x = &inputs[l];
            let z: Vec<f64> = (0..n_out)
                .map(|o| {
                    b[o] + w[o * n_in..(o + 1) * n_in]
                        .iter()
                        .zip(x)
                        .map(|(a, v)| a * v)
                        .sum::<f64>()
                })
                .collect();
            if z.iter().any(|v| !v.is_finite()) {
                return Err(LirfError::NonFinite(format!("layer {l} output")));
            }
            if l + 1 < self.n_layers() {
                let a = z.iter().map(|&v| self.activation.apply(v)).collect();
                pre.push(z);
                inputs.push(a);
            } else {
                inputs.push(z);
            }
        }
        Ok(Trace { inputs, pre })
    }

    /// Reverse-mode pass: adds `∂L/∂weights` into `grad` given `∂L/∂output`,
    /// and returns `∂L/∂input`.
    pub fn backward(&self, trace: &Trace, d_output: &[f64], grad: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.weights.len());
        debug_assert_eq!(d_output.len(), self.output_dim());
        let mut offsets = Vec::with_capacity(self.n_layers());
        let mut o = 0;
        for l in 0..self.n_layers() {
            offsets.push(o);
            o += (self.layer_dims[l] + 1) * self.layer_dims[l + 1];
        }
        let mut delta = d_output.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            if l + 1 < self.n_layers() {
                for (d, &z) in delta.iter_mut().zip(&trace.pre[l]) {
                    *d *= self.activation.derivative(z);
                }
            }
            let off = offsets[l];
            let x = &trace.inputs[l];
            let w = &self.weights[off..off + n_in * n_out];
            {
                let (gw, gb) = grad[off..off + (n_in + 1) * n_out].split_at_mut(n_in * n_out);
                for (out, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (g, &xi) in gw[out * n_in..(out + 1) * n_in].iter_mut().zip(x) {
                        *g += d * xi;
                    }
                    gb[out] += d;
                }
            }
            let mut d_in = vec![0.0; n_in];
            for (out, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (di, &wi) in d_in.iter_mut().zip(&w[out * n_in..(out + 1) * n_in]) {
                    *di += d * wi;
                }
            }
            delta = d_in;
        }
        delta
    }
}
