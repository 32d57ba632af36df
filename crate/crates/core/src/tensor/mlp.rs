use rand::Rng;

use super::layer::{Activation, DenseLayer};
use super::vector::Vector;
use crate::error::{check_len, Error, Result};

/// Gradient of a loss with respect to one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameter gradients for a whole [`Mlp`], in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpGrads {
    pub fn zeros_like(model: &Mlp) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: vec![0.0; l.weights().len()],
                    bias: vec![0.0; l.bias().len()],
                })
                .collect(),
        }
    }

    /// Same ordering as [`Mlp::params_flat`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w *= factor);
            l.bias.iter_mut().for_each(|b| *b *= factor);
        }
    }
}

/// Cached intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `activations[0]` is the input, `activations[i + 1]` the output of layer `i`.
    activations: Vec<Vec<f64>>,
    preactivations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace has an input")
    }
}

/// A feed-forward stack of [`DenseLayer`]s.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("Mlp::new"));
        }
        for pair in layers.windows(2) {
            check_len("Mlp layer chain", pair[0].outputs(), pair[1].inputs())?;
        }
        Ok(Self { layers })
    }

    /// Randomly initialised network with layer widths `sizes`
    /// (`sizes[0]` is the input width). Hidden layers use `hidden`, the last
    /// layer uses `output`.
    pub fn init<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "need at least one layer");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                DenseLayer::init(sizes[i], sizes[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Layer by layer: weights (row-major) then bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights());
            out.extend_from_slice(l.bias());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        check_len("Mlp::set_params_flat", self.param_count(), params.len())?;
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weights().len();
            l.weights_mut().copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = l.bias().len();
            l.bias_mut().copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vector> {
        check_len("Mlp::forward input", self.input_dim(), input.len())?;
        let trace = self.trace(input);
        Vector::new(trace.output().to_vec()).map_err(|_| Error::NonFinite("Mlp::forward"))
    }

    /// Forward pass keeping every intermediate value. Input length is not checked.
    pub fn trace(&self, input: &[f64]) -> Trace {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut preactivations = Vec::with_capacity(self.layers.len());
        activations.push(input.to_vec());
        for l in &self.layers {
            let mut z = vec![0.0; l.outputs()];
            l.preactivation(activations.last().unwrap(), &mut z);
            let mut a = vec![0.0; l.outputs()];
            l.activation().apply(&z, &mut a);
            preactivations.push(z);
            activations.push(a);
        }
        Trace {
            activations,
            preactivations,
        }
    }

    /// Gradient of a loss with respect to every parameter, given
    /// `∂loss/∂output`. The model is not modified.
    pub fn backward(&self, input: &[f64], loss_grad_at_output: &[f64]) -> Result<MlpGrads> {
        check_len("Mlp::backward input", self.input_dim(), input.len())?;
        check_len(
            "Mlp::backward output grad",
            self.output_dim(),
            loss_grad_at_output.len(),
        )?;
        let trace = self.trace(input);
        let mut grads = MlpGrads::zeros_like(self);
        self.accumulate_backward(&trace, loss_grad_at_output, &mut grads);
        Ok(grads)
    }

    /// Adds the parameter gradients for upstream `dy` into `grads` and
    /// returns `∂loss/∂input`.
    pub fn accumulate_backward(&self, trace: &Trace, dy: &[f64], grads: &mut MlpGrads) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut dz = vec![0.0; dy.len()];
        self.layers[last].activation().backprop(
            &trace.preactivations[last],
            &trace.activations[last + 1],
            dy,
            &mut dz,
        );
        self.accumulate_from_preactivation(trace, dz, grads)
    }

    /// Like [`Mlp::accumulate_backward`] but starting from `∂loss/∂z` of the
    /// output layer (e.g. `softmax − onehot` for cross-entropy).
    pub fn accumulate_from_preactivation(
        &self,
        trace: &Trace,
        mut dz: Vec<f64>,
        grads: &mut MlpGrads,
    ) -> Vec<f64> {
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let x = &trace.activations[i];
            let g = &mut grads.layers[i];
            for (o, &d) in dz.iter().enumerate() {
                g.bias[o] += d;
                if d != 0.0 {
                    let row = &mut g.weights[o * layer.inputs()..(o + 1) * layer.inputs()];
                    for (w, &xi) in row.iter_mut().zip(x) {
                        *w += d * xi;
                    }
                }
            }
            let mut dx = vec![0.0; layer.inputs()];
            for (o, &d) in dz.iter().enumerate() {
                if d != 0.0 {
                    let row = &layer.weights()[o * layer.inputs()..(o + 1) * layer.inputs()];
                    for (v, &w) in dx.iter_mut().zip(row) {
                        *v += d * w;
                    }
                }
            }
            if i == 0 {
                return dx;
            }
            let prev = &self.layers[i - 1];
            dz = vec![0.0; prev.outputs()];
            prev.activation().backprop(
                &trace.preactivations[i - 1],
                &trace.activations[i],
                &dx,
                &mut dz,
            );
        }
        unreachable!("loop returns at layer 0")
    }
}
