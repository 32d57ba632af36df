use rand::Rng;
use serde::{Deserialize, Serialize};

use super::history::HistoryStore;
use super::projector::Projector;
use crate::error::{check_len, Error, Result};
use crate::tensor::{cosine, Activation, DenseLayer, Mlp, MlpGrads, Optimizer};

/// Smoothing added under the square root of the per-pair loss so the
/// gradient stays defined at zero residual.
pub const LOSS_EPS: f64 = 1e-12;

/// `A ⊙ g_user + B ⊙ g_global`.
pub fn integrate(a: &[f64], b: &[f64], g_user: &[f64], g_global: &[f64]) -> Result<Vec<f64>> {
    check_len("integrate B", a.len(), b.len())?;
    check_len("integrate user gradient", a.len(), g_user.len())?;
    check_len("integrate global gradient", a.len(), g_global.len())?;
    Ok(a.iter()
        .zip(b)
        .zip(g_user.iter().zip(g_global))
        .map(|((a, b), (u, g))| a * u + b * g)
        .collect())
}

/// Starting point of each user's predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorInit {
    /// Exact identity on inputs above `−IDENTITY_SHIFT`: unit weights, the
    /// first bias shifted up so the ReLUs pass the signal, the last bias
    /// shifting it back.
    #[default]
    Identity,
    /// Uniform `±sqrt(1/fan_in)` weights, zero bias.
    Random,
}

pub const IDENTITY_SHIFT: f64 = 1.0;

fn identity_predictor(width: usize, output_activation: Activation) -> Mlp {
    let mut layers = vec![
        DenseLayer::identity(width, Activation::Relu),
        DenseLayer::identity(width, Activation::Relu),
        DenseLayer::identity(width, output_activation),
    ];
    layers[0].bias_mut().fill(IDENTITY_SHIFT);
    layers[2].bias_mut().fill(-IDENTITY_SHIFT);
    Mlp::new(layers).expect("square layers chain")
}

/// Per-user trainable state: coefficient vectors `A`, `B` and the predictor
/// network, each with its own Adam instance.
#[derive(Debug, Clone, PartialEq)]
pub struct UserPredictorState {
    a: Vec<f64>,
    b: Vec<f64>,
    predictor: Mlp,
    opt_a: Optimizer,
    opt_b: Optimizer,
    opt_pred: Optimizer,
    trained_rounds: usize,
}

impl UserPredictorState {
    /// `A = 1`, `B = 0` and an `s → s → s → s` predictor.
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        width: usize,
        output_activation: Activation,
        init: PredictorInit,
        lr: f64,
        rng: &mut R,
    ) -> Self {
        let predictor = match init {
            PredictorInit::Identity => identity_predictor(width, output_activation),
            PredictorInit::Random => Mlp::init(&[width; 4], Activation::Relu, output_activation, rng),
        };
        Self::with_parts(vec![1.0; dim], vec![0.0; dim], predictor, lr).expect("consistent shapes")
    }

    pub fn with_parts(a: Vec<f64>, b: Vec<f64>, predictor: Mlp, lr: f64) -> Result<Self> {
        check_len("predictor state B", a.len(), b.len())?;
        if predictor.input_dim() != predictor.output_dim() {
            return Err(Error::InvalidArgument(
                "predictor input and output widths must match".into(),
            ));
        }
        let n = predictor.param_count();
        Ok(Self {
            opt_a: Optimizer::adam(lr, a.len()),
            opt_b: Optimizer::adam(lr, b.len()),
            opt_pred: Optimizer::adam(lr, n),
            a,
            b,
            predictor,
            trained_rounds: 0,
        })
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn set_a(&mut self, a: Vec<f64>) -> Result<()> {
        check_len("predictor state A", self.a.len(), a.len())?;
        self.a = a;
        Ok(())
    }

    pub fn set_b(&mut self, b: Vec<f64>) -> Result<()> {
        check_len("predictor state B", self.b.len(), b.len())?;
        self.b = b;
        Ok(())
    }

    pub fn predictor(&self) -> &Mlp {
        &self.predictor
    }

    pub fn predictor_mut(&mut self) -> &mut Mlp {
        &mut self.predictor
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn trained_rounds(&self) -> usize {
        self.trained_rounds
    }

    /// `f64` slots held by `A`, `B` and their optimizer moments.
    pub fn coefficient_footprint(&self) -> usize {
        self.a.len() + self.b.len() + self.opt_a.state_len() + self.opt_b.state_len()
    }

    /// `f64` slots held by the predictor and its optimizer moments.
    pub fn predictor_footprint(&self) -> usize {
        self.predictor.param_count() + self.opt_pred.state_len()
    }

    /// `f_pred(f_proj(A ⊙ g_user + B ⊙ g_global))`.
    pub fn predict(&self, proj: &Projector, g_user: &[f64], g_global: &[f64]) -> Result<Vec<f64>> {
        check_len("predict projector", proj.input_dim(), self.a.len())?;
        check_len("predict predictor", proj.output_dim(), self.predictor.input_dim())?;
        let x = integrate(&self.a, &self.b, g_user, g_global)?;
        Ok(self.predictor.trace(&proj.project(&x)).output().to_vec())
    }
}

/// One term of the training objective: predict the projection of `next`
/// from `(user, global)` of the previous round.
#[derive(Debug, Clone)]
pub struct TrainingPair<'a> {
    pub user: &'a [f64],
    pub global: &'a [f64],
    pub target: Vec<f64>,
}

impl<'a> TrainingPair<'a> {
    pub fn new(proj: &Projector, user: &'a [f64], global: &'a [f64], next: &[f64]) -> Self {
        Self {
            user,
            global,
            target: proj.project(next),
        }
    }
}

/// Pairs `t_his ∈ [t−m, t−2]` for which both `t_his` and `t_his + 1` are in
/// the store, with absent or flagged entries resolved to the global gradient.
pub fn window_pairs<'a>(
    store: &'a HistoryStore,
    proj: &Projector,
    user: usize,
    round: usize,
) -> Result<Vec<TrainingPair<'a>>> {
    let first = round.saturating_sub(store.window()).max(1);
    let mut pairs = Vec::new();
    for t_his in first..round.saturating_sub(1) {
        let (Some(global), Some(_)) = (store.global(t_his), store.global(t_his + 1)) else {
            continue;
        };
        let next = store.resolve(user, t_his + 1)?;
        pairs.push(TrainingPair::new(proj, store.resolve(user, t_his)?, global, next));
    }
    if pairs.is_empty() {
        return Err(Error::InsufficientHistory {
            user,
            available: store.rounds().filter(|&r| r < round).count(),
        });
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGrads {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub predictor: MlpGrads,
}

/// `Σ √(‖r‖² + ε)` with `r = f_pred(f_proj(A ⊙ u + B ⊙ v)) − f_proj(next)`.
pub fn objective(state: &UserPredictorState, proj: &Projector, pairs: &[TrainingPair]) -> Result<f64> {
    let mut total = 0.0;
    for pair in pairs {
        let out = state.predict(proj, pair.user, pair.global)?;
        total += residual_norm(&out, &pair.target);
    }
    Ok(total)
}

fn residual_norm(out: &[f64], target: &[f64]) -> f64 {
    let sq: f64 = out.iter().zip(target).map(|(o, t)| (o - t) * (o - t)).sum();
    (sq + LOSS_EPS).sqrt()
}

/// Objective value and its gradient with respect to `A`, `B` and every
/// predictor parameter. The projector is treated as a constant.
pub fn objective_and_grad(
    state: &UserPredictorState,
    proj: &Projector,
    pairs: &[TrainingPair],
) -> Result<(f64, ObjectiveGrads)> {
    check_len("objective projector", proj.input_dim(), state.dim())?;
    check_len("objective predictor", proj.output_dim(), state.predictor.input_dim())?;
    let d = state.dim();
    let mut grads = ObjectiveGrads {
        a: vec![0.0; d],
        b: vec![0.0; d],
        predictor: MlpGrads::zeros_like(&state.predictor),
    };
    let mut total = 0.0;
    let mut dx = vec![0.0; d];
    for pair in pairs {
        let x = integrate(&state.a, &state.b, pair.user, pair.global)?;
        let (z, p) = proj.project_traced(&x);
        let trace = state.predictor.trace(&p);
        let out = trace.output();
        let loss = residual_norm(out, &pair.target);
        total += loss;
        let dy: Vec<f64> = out.iter().zip(&pair.target).map(|(o, t)| (o - t) / loss).collect();
        let dp = state.predictor.accumulate_backward(&trace, &dy, &mut grads.predictor);
        dx.iter_mut().for_each(|v| *v = 0.0);
        proj.backprop(&z, &p, &dp, &mut dx);
        for (((ga, gb), v), (u, g)) in grads.a.iter_mut().zip(&mut grads.b).zip(&dx).zip(pair.user.iter().zip(pair.global)) {
            *ga += v * u;
            *gb += v * g;
        }
    }
    Ok((total, grads))
}

/// `epochs` full-batch Adam steps on the window ending before `round`;
/// returns the objective after the last step.
pub fn train_predictor(
    state: &mut UserPredictorState,
    store: &HistoryStore,
    proj: &Projector,
    user: usize,
    round: usize,
    epochs: usize,
) -> Result<f64> {
    let pairs = window_pairs(store, proj, user, round)?;
    train_on_pairs(state, proj, &pairs, epochs)
}

pub fn train_on_pairs(
    state: &mut UserPredictorState,
    proj: &Projector,
    pairs: &[TrainingPair],
    epochs: usize,
) -> Result<f64> {
    if epochs == 0 {
        return objective(state, proj, pairs);
    }
    let mut pred_params = state.predictor.params_flat();
    for _ in 0..epochs {
        let (loss, grads) = objective_and_grad(state, proj, pairs)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("predictor objective"));
        }
        state.opt_a.step(&mut state.a, &grads.a)?;
        state.opt_b.step(&mut state.b, &grads.b)?;
        state.opt_pred.step(&mut pred_params, &grads.predictor.flatten())?;
        state.predictor.set_params_flat(&pred_params)?;
    }
    state.trained_rounds += 1;
    objective(state, proj, pairs)
}

/// `ρ = cos(prediction, f_proj(g_actual))`, or `−1` when either side has
/// zero norm.
pub fn predict_and_score(
    state: &UserPredictorState,
    proj: &Projector,
    g_actual: &[f64],
    g_prev_user: &[f64],
    g_prev_global: &[f64],
) -> Result<f64> {
    check_len("predict_and_score actual", state.dim(), g_actual.len())?;
    let predicted = state.predict(proj, g_prev_user, g_prev_global)?;
    let actual = proj.project(g_actual);
    match cosine(&predicted, &actual) {
        Ok(rho) => Ok(rho),
        Err(Error::ZeroNorm(_)) => Ok(-1.0),
        Err(e) => Err(e),
    }
}
