//! History-based ("vertical") selection: each user's next gradient is
//! predicted from its own recent uploads and the users whose actual upload
//! best matches the prediction are aggregated.

mod analysis;
mod history;
mod predictor;
mod projector;
mod select;

use std::collections::BTreeMap;

use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

pub use analysis::{closed_form_a, closed_form_b, predictor_affine};
pub use history::HistoryStore;
pub use predictor::{
    integrate, objective, objective_and_grad, predict_and_score, train_on_pairs, train_predictor,
    window_pairs, ObjectiveGrads, PredictorInit, TrainingPair, UserPredictorState, IDENTITY_SHIFT,
    LOSS_EPS,
};
pub use projector::Projector;
pub use select::select_topk;

use crate::baselines::{AggregatorKind, Rule, RuleParams};
use crate::engine::GradientVector;
use crate::error::{check_len, Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::{cosine, Activation, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VertConfig {
    /// History window length.
    pub m: usize,
    pub kappa: usize,
    /// Adam steps per user per round.
    pub epochs: usize,
    /// Projected width.
    pub s: usize,
    pub lr: f64,
    pub output_activation: Activation,
    pub projector_activation: Activation,
    pub predictor_init: PredictorInit,
}

impl Default for VertConfig {
    fn default() -> Self {
        Self {
            m: 10,
            kappa: 15,
            epochs: 5,
            s: 128,
            lr: 1e-3,
            output_activation: Activation::None,
            projector_activation: Activation::None,
            predictor_init: PredictorInit::Identity,
        }
    }
}

/// How a user's score was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    Predicted,
    /// Too little history: cosine against the previous global gradient.
    Fallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserScore {
    pub user: usize,
    pub rho: f64,
    pub source: ScoreSource,
    pub train_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VertOutcome {
    /// Selected user ids, ascending.
    pub selected: Vec<usize>,
    pub aggregate: Vector,
    /// Ids among `selected` that the successive rule actually used.
    pub used: Vec<usize>,
    /// One entry per upload, in upload order.
    pub scores: Vec<UserScore>,
}

/// Counted `f64` slots of VERT state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Footprint {
    /// `A`, `B` and their optimizer moments across all users.
    pub coefficients: usize,
    /// Predictor parameters and moments across all users.
    pub predictors: usize,
    pub projector: usize,
    pub history: usize,
}

impl Footprint {
    pub fn total(&self) -> usize {
        self.coefficients + self.predictors + self.projector + self.history
    }
}

/// Server-side VERT state across rounds.
#[derive(Debug, Clone)]
pub struct Vert {
    cfg: VertConfig,
    projector: Projector,
    store: HistoryStore,
    states: BTreeMap<usize, UserPredictorState>,
    successive: AggregatorKind,
    rule_params: RuleParams,
    seed: u64,
}

impl Vert {
    pub fn new(cfg: VertConfig, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, Purpose::Projector, 0, 0);
        let projector = Projector::gaussian(dim, cfg.s, cfg.projector_activation, &mut rng)?;
        Self::with_projector(cfg, projector, seed)
    }

    pub fn with_projector(cfg: VertConfig, projector: Projector, seed: u64) -> Result<Self> {
        if cfg.epochs == 0 {
            return Err(Error::config("vert.epochs", "must be at least 1"));
        }
        if cfg.kappa == 0 {
            return Err(Error::config("vert.kappa", "must be at least 1"));
        }
        check_len("vert projector width", cfg.s, projector.output_dim())?;
        Ok(Self {
            store: HistoryStore::new(cfg.m)?,
            cfg,
            projector,
            states: BTreeMap::new(),
            successive: AggregatorKind::Fedavg,
            rule_params: RuleParams::default(),
            seed,
        })
    }

    /// Rule applied to the selected users' gradients (FedAvg by default).
    pub fn with_successive(mut self, kind: AggregatorKind, params: RuleParams) -> Self {
        self.successive = kind;
        self.rule_params = params;
        self
    }

    pub fn config(&self) -> &VertConfig {
        &self.cfg
    }

    pub fn projector(&self) -> &Projector {
        &self.projector
    }

    pub fn store(&self) -> &HistoryStore {
        &self.store
    }

    pub fn state(&self, user: usize) -> Option<&UserPredictorState> {
        self.states.get(&user)
    }

    /// Records a round aggregated without VERT (warm-up). Nothing is flagged.
    pub fn observe(&mut self, round: usize, uploads: &[GradientVector], global: &Vector) -> Result<()> {
        self.store
            .record_round(round, uploads.iter().map(|g| (g.owner, &g.values, false)), global.clone())
    }

    fn new_state(&self, user: usize) -> UserPredictorState {
        let mut rng = stream(self.seed, Purpose::Predictor, user as u64, 0);
        UserPredictorState::new(
            self.projector.input_dim(),
            self.cfg.s,
            self.cfg.output_activation,
            self.cfg.predictor_init,
            self.cfg.lr,
            &mut rng,
        )
    }

    /// Trains every uploader's predictor on its window and scores its upload.
    /// The history store is not modified.
    pub fn score(&mut self, round: usize, uploads: &[GradientVector], pool: &ThreadPool) -> Result<Vec<UserScore>> {
        let d = self.projector.input_dim();
        for g in uploads {
            check_len("vert upload", d, g.values.len())?;
        }
        let mut work: Vec<(usize, UserPredictorState)> = uploads
            .iter()
            .map(|g| {
                let state = self.states.remove(&g.owner).unwrap_or_else(|| self.new_state(g.owner));
                (g.owner, state)
            })
            .collect();
        let (store, proj, epochs) = (&self.store, &self.projector, self.cfg.epochs);
        let scored: Vec<Result<UserScore>> = pool.install(|| {
            work.par_iter_mut()
                .zip(uploads.par_iter())
                .map(|((user, state), upload)| score_user(state, store, proj, *user, round, &upload.values, epochs))
                .collect()
        });
        self.states.extend(work);
        scored.into_iter().collect()
    }

    /// One defended round: score, keep the top `kappa`, aggregate them with
    /// the successive rule, then commit the round with everyone else flagged.
    pub fn round(&mut self, round: usize, uploads: &[GradientVector], pool: &ThreadPool) -> Result<VertOutcome> {
        let scores = self.score(round, uploads, pool)?;
        let pairs: Vec<(usize, f64)> = scores.iter().map(|s| (s.user, s.rho)).collect();
        let selected = select_topk(&pairs, self.cfg.kappa)?;
        let chosen: Vec<Vector> = selected
            .iter()
            .map(|id| uploads.iter().find(|g| g.owner == *id).unwrap().values.clone())
            .collect();
        let rule = Rule::build(self.successive, chosen.len(), self.rule_params);
        let agg = rule.apply(&chosen)?;
        self.store.record_round(
            round,
            uploads.iter().map(|g| (g.owner, &g.values, selected.binary_search(&g.owner).is_err())),
            agg.vector.clone(),
        )?;
        Ok(VertOutcome {
            used: agg.used.iter().map(|&i| selected[i]).collect(),
            selected,
            aggregate: agg.vector,
            scores,
        })
    }

    pub fn footprint(&self) -> Footprint {
        let (coefficients, predictors) = self.states.values().fold((0, 0), |(c, p), s| {
            (c + s.coefficient_footprint(), p + s.predictor_footprint())
        });
        Footprint {
            coefficients,
            predictors,
            projector: self.projector.weights().len(),
            history: self.store.stored_values(),
        }
    }
}

fn score_user(
    state: &mut UserPredictorState,
    store: &HistoryStore,
    proj: &Projector,
    user: usize,
    round: usize,
    actual: &[f64],
    epochs: usize,
) -> Result<UserScore> {
    let prev = round.checked_sub(1).and_then(|t| store.global(t).map(|g| (t, g)));
    let fallback = |train_loss| {
        let rho = match prev {
            None => 0.0,
            Some((_, g)) => match cosine(actual, g) {
                Ok(r) => r,
                Err(Error::ZeroNorm(_)) => -1.0,
                Err(e) => return Err(e),
            },
        };
        Ok(UserScore {
            user,
            rho,
            source: ScoreSource::Fallback,
            train_loss,
        })
    };
    let loss = match train_predictor(state, store, proj, user, round, epochs) {
        Ok(loss) => loss,
        Err(Error::InsufficientHistory { .. }) => return fallback(None),
        Err(e) => return Err(e),
    };
    let Some((t_prev, g_prev)) = prev else {
        return fallback(Some(loss));
    };
    let rho = predict_and_score(state, proj, actual, store.resolve(user, t_prev)?, g_prev)?;
    Ok(UserScore {
        user,
        rho,
        source: ScoreSource::Predicted,
        train_loss: Some(loss),
    })
}
