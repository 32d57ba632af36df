//! Untargeted model-poisoning attacks.
//!
//! Each attack maps what the compromised users would honestly have sent
//! (plus whatever else the attacker knows) to the malicious gradients they
//! submit instead, one per compromised user in `AttackContext::users` order.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::baselines::fedavg;
use crate::error::{check_len, Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::{l2_dist, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[default]
    None,
    Gn,
    Mr,
    Agr,
    Alie,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Gn => "gn",
            AttackKind::Mr => "mr",
            AttackKind::Agr => "agr",
            AttackKind::Alie => "alie",
        }
    }
}

/// What the attacker knows in one round.
#[derive(Debug, Clone, Copy)]
pub struct AttackContext<'a> {
    /// Ids of the attacking users, ascending.
    pub users: &'a [usize],
    /// Their honest gradients, aligned with `users`.
    pub honest_grads_of_compromised: &'a [Vector],
    /// Honest gradients of every selected user, when the attacker sees them.
    pub all_honest_grads: Option<&'a [Vector]>,
    /// `w_p − w` from label-flipped training, aligned with `users` (MR only).
    pub poison_deltas: Option<&'a [Vector]>,
    /// `|C_t|`.
    pub n_selected: usize,
    pub dim: usize,
    pub z_max: f64,
    pub seed: u64,
    pub round: usize,
}

/// Per-round Bernoulli draw deciding whether a selected compromised user
/// actually attacks.
pub fn attack_coin(seed: u64, user: usize, round: usize, probability: f64) -> bool {
    let mut rng = stream(seed, Purpose::AttackCoin, user as u64, round as u64);
    rng.random::<f64>() < probability
}

pub fn run_attack(kind: AttackKind, ctx: &AttackContext<'_>) -> Result<Vec<Vector>> {
    match kind {
        AttackKind::None => Ok(ctx.honest_grads_of_compromised.to_vec()),
        AttackKind::Gn => Ok(gn_attack(ctx)),
        AttackKind::Mr => mr_attack(ctx),
        AttackKind::Agr => agr_attack(ctx).map(|(v, _)| v),
        AttackKind::Alie => alie_attack(ctx),
    }
}

/// Independent `N(0, 1)` vectors, one stream per user.
pub fn gn_attack(ctx: &AttackContext<'_>) -> Vec<Vector> {
    ctx.users
        .iter()
        .map(|&u| {
            let mut rng = stream(ctx.seed, Purpose::Attack, u as u64, ctx.round as u64);
            let v = (0..ctx.dim).map(|_| rng.sample(StandardNormal)).collect();
            Vector::from_trusted(v)
        })
        .collect()
}

/// Boosts each poisoned delta by `γ = |C_t|`, so that one such gradient
/// averaged by FedAvg moves the global model onto the poisoned model.
pub fn mr_attack(ctx: &AttackContext<'_>) -> Result<Vec<Vector>> {
    let deltas = ctx
        .poison_deltas
        .ok_or_else(|| Error::InvalidArgument("MR attack needs poisoned deltas".into()))?;
    check_len("mr_attack deltas", ctx.users.len(), deltas.len())?;
    let gamma = ctx.n_selected as f64;
    deltas
        .iter()
        .map(|d| Vector::new(d.iter().map(|x| x * gamma).collect()))
        .collect()
}

/// Result of the Min-Max search.
#[derive(Debug, Clone, PartialEq)]
pub struct MinMax {
    pub mean: Vector,
    /// Unit perturbation `−g / ‖g‖₂`.
    pub direction: Vector,
    pub lambda: f64,
    pub threshold: f64,
}

impl MinMax {
    pub fn malicious(&self) -> Vector {
        perturbed(&self.mean, &self.direction, self.lambda)
    }
}

fn perturbed(g: &[f64], dir: &[f64], lambda: f64) -> Vector {
    Vector::from_trusted(g.iter().zip(dir).map(|(a, b)| a + lambda * b).collect())
}

/// Largest distance from `g + λ·dir` to any reference gradient.
pub fn min_max_distance(g: &[f64], dir: &[f64], lambda: f64, refs: &[Vector]) -> f64 {
    let p = perturbed(g, dir, lambda);
    refs.iter()
        .map(|r| l2_dist(&p, r).expect("equal lengths"))
        .fold(0.0, f64::max)
}

/// Finds the largest `λ` with `max_k ‖g + λ∇ᵖ − g_k‖ ≤ max_{i,j} ‖g_i − g_j‖`
/// by doubling then bisection.
pub fn min_max_lambda(refs: &[Vector]) -> Result<MinMax> {
    const MAX_ITERS: usize = 60;
    const TOL: f64 = 1e-4;

    if refs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "Min-Max needs at least 2 reference gradients, got {}",
            refs.len()
        )));
    }
    let mean = fedavg(refs)?;
    let n = mean.norm();
    if n == 0.0 {
        return Err(Error::ZeroNorm("Min-Max reference mean"));
    }
    let direction = mean.scaled(-1.0 / n);
    let mut threshold: f64 = 0.0;
    for i in 0..refs.len() {
        for j in i + 1..refs.len() {
            threshold = threshold.max(l2_dist(&refs[i], &refs[j])?);
        }
    }
    let feasible = |l: f64| min_max_distance(&mean, &direction, l, refs) <= threshold;

    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..MAX_ITERS {
        if !feasible(hi) {
            break;
        }
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..MAX_ITERS {
        if lo > 0.0 && hi - lo <= TOL * lo {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(MinMax {
        mean,
        direction,
        lambda: lo,
        threshold,
    })
}

/// Min-Max distance attack. The reference set is the compromised users'
/// honest gradients, or every honest gradient when `all_honest_grads` is
/// provided. All attackers submit the same vector.
pub fn agr_attack(ctx: &AttackContext<'_>) -> Result<(Vec<Vector>, MinMax)> {
    let refs = ctx.all_honest_grads.unwrap_or(ctx.honest_grads_of_compromised);
    let mm = min_max_lambda(refs)?;
    let v = mm.malicious();
    Ok((vec![v; ctx.users.len()], mm))
}

/// "A little is enough": every attacker submits `μ + z_max·σ` computed over
/// the compromised users' honest gradients (population σ).
pub fn alie_attack(ctx: &AttackContext<'_>) -> Result<Vec<Vector>> {
    let grads = ctx.honest_grads_of_compromised;
    let mu = fedavg(grads)?;
    let n = grads.len() as f64;
    let mut var = vec![0.0; mu.len()];
    for g in grads {
        for ((v, x), m) in var.iter_mut().zip(g.iter()).zip(mu.iter()) {
            *v += (x - m) * (x - m);
        }
    }
    let out = Vector::new(
        mu.iter()
            .zip(&var)
            .map(|(m, v)| m + ctx.z_max * (v / n).sqrt())
            .collect(),
    )?;
    Ok(vec![out; ctx.users.len()])
}
