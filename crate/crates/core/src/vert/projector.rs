use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, Error, Result};
use crate::tensor::{dot, Activation};

/// Frozen map `R^d → R^s`, `p = act(W g)` with `W` stored row-major `s × d`.
///
/// There is no mutable access to the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    input_dim: usize,
    output_dim: usize,
    weights: Vec<f64>,
    activation: Activation,
}

impl Projector {
    /// Gaussian weights with standard deviation `1/√d`. Requires `s ≤ d/4`.
    pub fn gaussian<R: Rng + ?Sized>(
        input_dim: usize,
        output_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if output_dim == 0 || output_dim * 4 > input_dim {
            return Err(Error::InvalidArgument(format!(
                "projector width s = {output_dim} must satisfy 1 <= s <= d/4 (d = {input_dim})"
            )));
        }
        let scale = 1.0 / (input_dim as f64).sqrt();
        let weights = (0..input_dim * output_dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::from_weights(input_dim, output_dim, weights, activation)
    }

    /// Explicit weights; only shapes are checked.
    pub fn from_weights(
        input_dim: usize,
        output_dim: usize,
        weights: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::InvalidArgument("projector dimensions must be positive".into()));
        }
        if activation == Activation::Relu {
            return Err(Error::InvalidArgument("projector activation must be none or softmax".into()));
        }
        check_len("Projector weights", input_dim * output_dim, weights.len())?;
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("Projector weights"));
        }
        Ok(Self {
            input_dim,
            output_dim,
            weights,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.weights.chunks_exact(self.input_dim)
    }

    pub fn preactivation(&self, g: &[f64]) -> Vec<f64> {
        self.rows()
            .map(|row| dot(row, g))
            .collect()
    }

    pub fn project(&self, g: &[f64]) -> Vec<f64> {
        let z = self.preactivation(g);
        let mut p = vec![0.0; z.len()];
        self.activation.apply(&z, &mut p);
        p
    }

    /// `(z, act(z))` for later use in [`Projector::backprop`].
    pub fn project_traced(&self, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let z = self.preactivation(g);
        let mut p = vec![0.0; z.len()];
        self.activation.apply(&z, &mut p);
        (z, p)
    }

    /// Adds `(∂p/∂g)ᵀ dp` into `dg`.
    pub fn backprop(&self, z: &[f64], p: &[f64], dp: &[f64], dg: &mut [f64]) {
        let mut dz = vec![0.0; z.len()];
        self.activation.backprop(z, p, dp, &mut dz);
        for (row, &d) in self.rows().zip(&dz) {
            if d != 0.0 {
                for (acc, w) in dg.iter_mut().zip(row) {
                    *acc += d * w;
                }
            }
        }
    }
}
