//! The round loop: select users, train locally, let compromised users
//! attack, aggregate, update the global model, evaluate.

mod model;

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::index::sample;
use rayon::prelude::*;
use rayon::ThreadPool;
use serde::Serialize;

pub use model::{
    apply_global, balanced_batches, evaluate, local_train, predict_class, GradientVector, LayerShape, LocalOutcome,
    LocalTrainParams, ModelState,
};

use crate::attacks::{agr_attack, alie_attack, attack_coin, gn_attack, mr_attack, AttackContext, AttackKind};
use crate::baselines::{fedavg, Rule, RuleParams};
use crate::config::{DataSource, DefenseKind, ExperimentConfig};
use crate::data::{dirichlet_partition, load_idx, make_synthetic, make_synthetic_test, Dataset};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::{Activation, Mlp, Vector};
use crate::vert::{ScoreSource, Vert};

/// Who takes part in round `t`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundContext {
    pub t: usize,
    /// `C_t`, ascending.
    pub selected: Vec<usize>,
    pub eta: f64,
    /// Selected users outside the compromised set.
    pub honest: Vec<usize>,
    /// Selected users inside the compromised set, attacking or not.
    pub compromised: Vec<usize>,
    /// Compromised users that submitted an attack this round.
    pub attacking: Vec<usize>,
}

/// Wall time per phase of one round, in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PhaseTimings {
    pub local_train_ms: f64,
    pub attack_ms: f64,
    pub defense_ms: f64,
    pub eval_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub context: RoundContext,
    /// Test accuracy of the updated global model.
    pub accuracy: f64,
    pub vert_active: bool,
    /// Users admitted by the defense: `C_opt` under VERT, the users the rule
    /// drew on otherwise.
    pub admitted: Vec<usize>,
    /// VERT scores `(user, ρ)` for this round; empty when VERT is inactive.
    pub rho: Vec<(usize, f64)>,
    /// Users scored by the short-history fallback.
    pub fallback: Vec<usize>,
    /// `|admitted ∩ honest| / |admitted|`.
    pub precision: f64,
    /// `|admitted ∩ honest| / |honest|`; `None` without honest users.
    pub recall: Option<f64>,
    pub mean_rho_honest: Option<f64>,
    pub mean_rho_malicious: Option<f64>,
    pub timings: PhaseTimings,
}

/// Everything fixed before round 1.
#[derive(Debug, Clone)]
pub struct Setup {
    pub shards: Vec<Dataset>,
    pub test: Dataset,
    /// Compromised users, ascending.
    pub compromised: Vec<usize>,
    pub initial: ModelState,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let d = &cfg.data;
        let (train, test) = match d.source {
            DataSource::Synthetic => (
                make_synthetic(d.classes, d.dims, d.per_class, cfg.seed)?,
                make_synthetic_test(d.classes, d.dims, d.test_per_class, cfg.seed)?,
            ),
            DataSource::Idx => {
                let need = |p: &Option<std::path::PathBuf>, f: &str| {
                    p.clone().ok_or_else(|| Error::config(f, "required when source = \"idx\""))
                };
                (
                    load_idx(&need(&d.train_images, "data.train_images")?, &need(&d.train_labels, "data.train_labels")?, d.classes)?,
                    load_idx(&need(&d.test_images, "data.test_images")?, &need(&d.test_labels, "data.test_labels")?, d.classes)?,
                )
            }
        };
        let users = cfg.federation.users;
        let plan = dirichlet_partition(&train, users, d.beta, cfg.seed)?;
        let shards = plan.assignments.iter().map(|idx| train.subset(idx)).collect();

        let n_bad = cfg.compromised_count().min(users);
        let mut compromised = sample(&mut stream(cfg.seed, Purpose::Compromise, 0, 0), users, n_bad).into_vec();
        compromised.sort_unstable();

        let mut sizes = vec![train.dims()];
        sizes.extend(&cfg.train.hidden);
        sizes.push(d.classes);
        let mut rng = stream(cfg.seed, Purpose::ModelInit, 0, 0);
        let initial = ModelState::from_mlp(&Mlp::init(&sizes, Activation::Relu, Activation::Softmax, &mut rng));
        Ok(Self {
            shards,
            test,
            compromised,
            initial,
        })
    }
}

pub fn build_pool(workers: usize) -> Result<ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

/// Runs every round and returns the reports.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<RoundReport>> {
    let mut reports = Vec::with_capacity(cfg.federation.rounds);
    run_with(cfg, |r| reports.push(r.clone()))?;
    Ok(reports)
}

/// Like [`run`] but hands each report to `on_round` as soon as it is ready.
/// Returns the final global model.
pub fn run_with<F: FnMut(&RoundReport)>(cfg: &ExperimentConfig, mut on_round: F) -> Result<ModelState> {
    cfg.validate()?;
    let setup = Setup::new(cfg)?;
    let pool = build_pool(cfg.workers)?;
    let mut sim = Simulation::new(cfg, &setup)?;
    for t in 1..=cfg.federation.rounds {
        let report = sim.step(t, &pool).map_err(|e| e.at_round(t))?;
        on_round(&report);
    }
    Ok(sim.global)
}

struct Simulation<'a> {
    cfg: &'a ExperimentConfig,
    setup: &'a Setup,
    compromised: BTreeSet<usize>,
    global: ModelState,
    vert: Option<Vert>,
    train: LocalTrainParams,
}

impl<'a> Simulation<'a> {
    fn new(cfg: &'a ExperimentConfig, setup: &'a Setup) -> Result<Self> {
        let vert = match cfg.defense.kind {
            DefenseKind::Vert => Some(
                Vert::new(cfg.vert.clone(), setup.initial.dim(), cfg.seed)?
                    .with_successive(cfg.defense.successive, cfg.defense.rule_params()),
            ),
            _ => None,
        };
        Ok(Self {
            cfg,
            setup,
            compromised: setup.compromised.iter().copied().collect(),
            global: setup.initial.clone(),
            vert,
            train: LocalTrainParams {
                epochs: cfg.train.epochs,
                batch: cfg.train.batch,
                lr: cfg.train.lr,
            },
        })
    }

    fn step(&mut self, t: usize, pool: &ThreadPool) -> Result<RoundReport> {
        let cfg = self.cfg;
        let seed = cfg.seed;
        let fed = &cfg.federation;
        let mut selected = sample(&mut stream(seed, Purpose::Selection, 0, t as u64), fed.users, fed.selected).into_vec();
        selected.sort_unstable();

        let clock = Instant::now();
        let honest_updates: Vec<Vector> = pool.install(|| {
            selected
                .par_iter()
                .map(|&u| {
                    let mut rng = stream(seed, Purpose::LocalTrain, u as u64, t as u64);
                    local_train(&self.setup.shards[u], &self.global, &self.train, &mut rng).map(|o| o.delta)
                })
                .collect::<Result<_>>()
        })?;
        let local_train_ms = ms(clock);

        let clock = Instant::now();
        let attackers: Vec<usize> = if cfg.attack.kind != AttackKind::None && t >= cfg.attack.start_round {
            selected
                .iter()
                .copied()
                .filter(|u| self.compromised.contains(u) && attack_coin(seed, *u, t, cfg.attack.probability))
                .collect()
        } else {
            Vec::new()
        };
        let mut submissions = honest_updates.clone();
        let attackers = self.apply_attack(t, &selected, &honest_updates, attackers, &mut submissions, pool)?;
        let attack_ms = ms(clock);

        let uploads: Vec<GradientVector> = selected
            .iter()
            .zip(submissions)
            .map(|(&owner, values)| GradientVector { values, owner, round: t })
            .collect();
        let (compromised, honest): (Vec<usize>, Vec<usize>) =
            selected.iter().partition(|u| self.compromised.contains(u));

        let clock = Instant::now();
        let mut rho = Vec::new();
        let mut fallback = Vec::new();
        let vert_active = self.vert.is_some() && t > fed.warmup;
        let (aggregate, admitted) = match (&mut self.vert, cfg.defense.kind.aggregator()) {
            (Some(vert), _) if vert_active => {
                let out = vert.round(t, &uploads, pool)?;
                for s in &out.scores {
                    rho.push((s.user, s.rho));
                    if s.source == ScoreSource::Fallback {
                        fallback.push(s.user);
                    }
                }
                (out.aggregate, out.selected)
            }
            (Some(vert), _) => {
                let grads: Vec<Vector> = uploads.iter().map(|g| g.values.clone()).collect();
                let agg = fedavg(&grads)?;
                vert.observe(t, &uploads, &agg)?;
                (agg, selected.clone())
            }
            (None, Some(kind)) => {
                let grads: Vec<Vector> = uploads.iter().map(|g| g.values.clone()).collect();
                let params = RuleParams {
                    f: cfg.defense.krum_f.or(Some(compromised.len())),
                    ..cfg.defense.rule_params()
                };
                let agg = Rule::build(kind, grads.len(), params).apply(&grads)?;
                (agg.vector, agg.used.iter().map(|&i| selected[i]).collect())
            }
            (None, None) => unreachable!("VERT defense always has state"),
        };
        let defense_ms = ms(clock);

        self.global = apply_global(&self.global, &aggregate, fed.eta)?;
        let clock = Instant::now();
        let accuracy = evaluate(&self.global, &self.setup.test);
        let eval_ms = ms(clock);

        let is_honest = |u: &usize| honest.binary_search(u).is_ok();
        let admitted_honest = admitted.iter().filter(|u| is_honest(u)).count();
        let precision = admitted_honest as f64 / admitted.len() as f64;
        let recall = (!honest.is_empty()).then(|| admitted_honest as f64 / honest.len() as f64);
        let mean_of = |keep: bool| {
            let xs: Vec<f64> = rho.iter().filter(|(u, _)| is_honest(u) == keep).map(|(_, r)| *r).collect();
            (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
        };

        Ok(RoundReport {
            mean_rho_honest: mean_of(true),
            mean_rho_malicious: mean_of(false),
            context: RoundContext {
                t,
                selected,
                eta: fed.eta,
                honest,
                compromised,
                attacking: attackers,
            },
            accuracy,
            vert_active,
            admitted,
            rho,
            fallback,
            precision,
            recall,
            timings: PhaseTimings {
                local_train_ms,
                attack_ms,
                defense_ms,
                eval_ms,
            },
        })
    }

    /// Overwrites the attackers' submissions. Returns the users that ended up
    /// submitting an attack.
    fn apply_attack(
        &self,
        t: usize,
        selected: &[usize],
        honest_updates: &[Vector],
        attackers: Vec<usize>,
        submissions: &mut [Vector],
        pool: &ThreadPool,
    ) -> Result<Vec<usize>> {
        if attackers.is_empty() {
            return Ok(attackers);
        }
        let cfg = self.cfg;
        let pos = |u: &usize| selected.binary_search(u).expect("attacker is selected");
        let own: Vec<Vector> = attackers.iter().map(|u| honest_updates[pos(u)].clone()).collect();
        let mut ctx = AttackContext {
            users: &attackers,
            honest_grads_of_compromised: &own,
            all_honest_grads: cfg.attack.omniscient.then_some(honest_updates),
            poison_deltas: None,
            n_selected: selected.len(),
            dim: self.global.dim(),
            z_max: cfg.attack.z_max,
            seed: cfg.seed,
            round: t,
        };
        let poison: Vec<Vector>;
        let malicious = match cfg.attack.kind {
            AttackKind::None => return Ok(Vec::new()),
            AttackKind::Gn => gn_attack(&ctx),
            AttackKind::Mr => {
                poison = pool.install(|| {
                    attackers
                        .par_iter()
                        .map(|&u| {
                            let flipped = self.setup.shards[u].label_flipped();
                            let mut rng = stream(cfg.seed, Purpose::Attack, u as u64, t as u64);
                            local_train(&flipped, &self.global, &self.train, &mut rng).map(|o| o.delta)
                        })
                        .collect::<Result<_>>()
                })?;
                ctx.poison_deltas = Some(&poison);
                mr_attack(&ctx)?
            }
            AttackKind::Agr => {
                // Min-Max needs two reference gradients; widen to everyone's
                // honest updates, and if even that is short, stay honest.
                if ctx.all_honest_grads.map_or(own.len(), <[Vector]>::len) < 2 {
                    ctx.all_honest_grads = Some(honest_updates);
                }
                if honest_updates.len() < 2 {
                    return Ok(Vec::new());
                }
                agr_attack(&ctx)?.0
            }
            AttackKind::Alie => alie_attack(&ctx)?,
        };
        for (u, g) in attackers.iter().zip(malicious) {
            submissions[pos(u)] = g;
        }
        Ok(attackers)
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}
