use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_len, Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{Activation, DenseLayer, Mlp, MlpGrads, Optimizer, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

/// Flat global/local model parameters plus the layer layout needed to
/// rebuild the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    params: Vector,
    shapes: Vec<LayerShape>,
}

impl ModelState {
    pub fn from_mlp(model: &Mlp) -> Self {
        let shapes = model
            .layers()
            .iter()
            .map(|l| LayerShape {
                inputs: l.inputs(),
                outputs: l.outputs(),
                activation: l.activation(),
            })
            .collect();
        Self {
            params: Vector::from_trusted(model.params_flat()),
            shapes,
        }
    }

    pub fn new(params: Vector, shapes: Vec<LayerShape>) -> Result<Self> {
        let expected: usize = shapes.iter().map(|s| s.outputs * (s.inputs + 1)).sum();
        check_len("ModelState params", expected, params.len())?;
        Ok(Self { params, shapes })
    }

    pub fn to_mlp(&self) -> Mlp {
        let mut offset = 0;
        let layers = self
            .shapes
            .iter()
            .map(|s| {
                let nw = s.inputs * s.outputs;
                let w = self.params[offset..offset + nw].to_vec();
                let b = self.params[offset + nw..offset + nw + s.outputs].to_vec();
                offset += nw + s.outputs;
                DenseLayer::new(s.inputs, s.outputs, w, b, s.activation).expect("consistent shapes")
            })
            .collect();
        Mlp::new(layers).expect("shapes chain")
    }

    pub fn params(&self) -> &Vector {
        &self.params
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }
}

/// A flat update `w_k − w` tagged with its sender and round.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub values: Vector,
    pub owner: usize,
    pub round: usize,
}

/// `w + η·g`.
pub fn apply_global(w: &ModelState, g: &[f64], eta: f64) -> Result<ModelState> {
    check_len("apply_global", w.dim(), g.len())?;
    let params = w.params.iter().zip(g).map(|(p, d)| p + eta * d).collect();
    Ok(ModelState {
        params: Vector::new(params).map_err(|_| Error::NonFinite("global model"))?,
        shapes: w.shapes.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTrainParams {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    /// Trained minus received parameters.
    pub delta: Vector,
    /// Mean cross-entropy over each epoch's minibatches.
    pub epoch_losses: Vec<f64>,
}

/// Minibatch SGD on cross-entropy starting from `global`; returns the
/// parameter delta. `global` is not modified.
pub fn local_train(
    shard: &Dataset,
    global: &ModelState,
    params: &LocalTrainParams,
    rng: &mut StreamRng,
) -> Result<LocalOutcome> {
    if shard.is_empty() {
        return Err(Error::Empty("local_train shard"));
    }
    if params.batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut model = global.to_mlp();
    check_len("local_train features", model.input_dim(), shard.dims())?;
    check_len("local_train classes", model.output_dim(), shard.classes())?;
    let mut opt = Optimizer::sgd(params.lr);
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut epoch_losses = Vec::with_capacity(params.epochs);
    let mut flat = model.params_flat();

    for _ in 0..params.epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        for batch in balanced_batches(&order, params.batch) {
            let mut grads = MlpGrads::zeros_like(&model);
            for &i in batch {
                let (x, y) = shard.sample(i);
                let trace = model.trace(x);
                let probs = trace.output();
                loss_sum += -probs[y].max(f64::MIN_POSITIVE).ln();
                let mut dz = probs.to_vec();
                dz[y] -= 1.0;
                model.accumulate_from_preactivation(&trace, dz, &mut grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut flat, &grads.flatten())?;
            model.set_params_flat(&flat)?;
        }
        let loss = loss_sum / shard.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("local training loss"));
        }
        epoch_losses.push(loss);
    }

    let delta = flat.iter().zip(global.params().iter()).map(|(a, b)| a - b).collect();
    Ok(LocalOutcome {
        delta: Vector::new(delta).map_err(|_| Error::NonFinite("local update"))?,
        epoch_losses,
    })
}

/// Splits `order` into `⌈n / batch⌉` consecutive runs whose lengths differ by
/// at most one, so no minibatch is a tiny remainder.
pub fn balanced_batches(order: &[usize], batch: usize) -> impl Iterator<Item = &[usize]> {
    let n = order.len();
    let count = n.div_ceil(batch.max(1)).max(1);
    let (base, extra) = (n / count, n % count);
    let mut start = 0;
    (0..count).map(move |i| {
        let len = base + usize::from(i < extra);
        let run = &order[start..start + len];
        start += len;
        run
    })
}

pub fn predict_class(model: &Mlp, x: &[f64]) -> usize {
    let trace = model.trace(x);
    let out = trace.output();
    (0..out.len()).fold(0, |best, i| if out[i] > out[best] { i } else { best })
}

/// Top-1 accuracy in `[0, 1]`.
pub fn evaluate(model: &ModelState, test: &Dataset) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let mlp = model.to_mlp();
    let correct = (0..test.len())
        .filter(|&i| {
            let (x, y) = test.sample(i);
            predict_class(&mlp, x) == y
        })
        .count();
    correct as f64 / test.len() as f64
}
