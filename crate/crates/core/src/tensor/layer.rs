use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::tensor::dot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    None,
    Relu,
    Softmax,
}

impl Activation {
    pub fn apply(self, z: &[f64], out: &mut [f64]) {
        match self {
            Activation::None => out.copy_from_slice(z),
            Activation::Relu => {
                for (o, &x) in out.iter_mut().zip(z) {
                    *o = x.max(0.0);
                }
            }
            Activation::Softmax => softmax_into(z, out),
        }
    }

    /// Vector-Jacobian product: given `y = act(z)` and upstream `dy`, writes
    /// `dz = (∂y/∂z)ᵀ dy`.
    pub fn backprop(self, z: &[f64], y: &[f64], dy: &[f64], dz: &mut [f64]) {
        match self {
            Activation::None => dz.copy_from_slice(dy),
            Activation::Relu => {
                for ((d, &g), &x) in dz.iter_mut().zip(dy).zip(z) {
                    *d = if x > 0.0 { g } else { 0.0 };
                }
            }
            Activation::Softmax => {
                let s: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                for ((d, &yi), &g) in dz.iter_mut().zip(y).zip(dy) {
                    *d = yi * (g - s);
                }
            }
        }
    }
}

/// Softmax with max-subtraction.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    softmax_into(z, &mut out);
    out
}

fn softmax_into(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(z) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Fully connected layer `y = act(W x + b)` with `W` stored row-major
/// as `outputs × inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl DenseLayer {
    pub fn new(
        inputs: usize,
        outputs: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::InvalidArgument(
                "layer dimensions must be positive".into(),
            ));
        }
        check_len("DenseLayer weights", inputs * outputs, weights.len())?;
        check_len("DenseLayer bias", outputs, bias.len())?;
        Ok(Self {
            inputs,
            outputs,
            weights,
            bias,
            activation,
        })
    }

    /// Uniform weights in `±sqrt(1/fan_in)`, zero bias.
    pub fn init<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(inputs > 0 && outputs > 0);
        let bound = (1.0 / inputs as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
            activation,
        }
    }

    pub fn identity(n: usize, activation: Activation) -> Self {
        let mut weights = vec![0.0; n * n];
        for i in 0..n {
            weights[i * n + i] = 1.0;
        }
        Self::new(n, n, weights, vec![0.0; n], activation).expect("identity layer")
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn param_count(&self) -> usize {
        self.outputs * (self.inputs + 1)
    }

    pub(crate) fn preactivation(&self, x: &[f64], z: &mut [f64]) {
        for (o, (row, b)) in z
            .iter_mut()
            .zip(self.weights.chunks_exact(self.inputs).zip(&self.bias))
        {
            *o = b + dot(row, x);
        }
    }
}
