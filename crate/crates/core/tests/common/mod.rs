//! Fixtures and brute-force oracles shared by the integration tests and the
//! acceptance runner.
#![allow(dead_code)]

use std::path::PathBuf;

use rand::Rng;
use rand_distr::StandardNormal;
use vertfl::attacks::{agr_attack, alie_attack, gn_attack, mr_attack, AttackContext};
use vertfl::config::{load_config, ExperimentConfig};
use vertfl::data::{make_synthetic, Dataset};
use vertfl::engine::{apply_global, local_train, LocalTrainParams, ModelState};
use vertfl::rng::{stream, Purpose, StreamRng};
use vertfl::tensor::{Activation, DenseLayer, Mlp, Vector};
use vertfl::vert::{
    closed_form_a, closed_form_b, objective_and_grad, window_pairs, HistoryStore, Projector, TrainingPair,
    UserPredictorState,
};

pub fn rng(seed: u64) -> StreamRng {
    stream(seed, Purpose::Bench, 0xfeed, 0)
}

pub fn gauss(rng: &mut StreamRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn vector(values: Vec<f64>) -> Vector {
    Vector::new(values).expect("finite fixture")
}

/// The checked-in desk-scale preset.
pub fn desk_config() -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    load_config(&path).expect("desk preset parses")
}

/// Desk preset shrunk to 20 users, 16 drawn per round, `κ = 4`.
pub fn small_config(rounds: usize) -> ExperimentConfig {
    let mut cfg = desk_config();
    cfg.federation.users = 20;
    cfg.federation.selected = 16;
    cfg.federation.rounds = rounds;
    cfg.vert.kappa = 4;
    cfg
}

/// `max |a − n| / max(|a|, |n|, floor)` over all components.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn central_diff<F: FnMut(&[f64]) -> f64>(x: &[f64], h: f64, mut f: F) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Predictor objective

pub struct ObjectiveFixture {
    pub state: UserPredictorState,
    pub proj: Projector,
    pub store: HistoryStore,
    pub round: usize,
}

impl ObjectiveFixture {
    /// `d = 8`, `s = 4`, window `m = 3`, three recorded rounds for user 0.
    pub fn new(seed: u64) -> Self {
        let (d, s, m) = (8, 4, 3);
        let mut r = rng(seed);
        let proj = Projector::from_weights(d, s, gauss(&mut r, d * s, 1.0 / (d as f64).sqrt()), Activation::None)
            .expect("shapes");
        // Nonzero biases keep hidden ReLU units off their kink.
        let layers = (0..3)
            .map(|i| {
                let act = if i < 2 { Activation::Relu } else { Activation::None };
                DenseLayer::new(s, s, gauss(&mut r, s * s, 0.5), gauss(&mut r, s, 0.5), act).unwrap()
            })
            .collect();
        let a = gauss(&mut r, d, 0.3).iter().map(|x| 1.0 + x).collect();
        let state = UserPredictorState::with_parts(a, gauss(&mut r, d, 0.3), Mlp::new(layers).unwrap(), 1e-3).unwrap();
        let mut store = HistoryStore::new(m).unwrap();
        for t in 1..=m {
            let g = vector(gauss(&mut r, d, 1.0));
            store.record_round(t, [(0, &g, false)], vector(gauss(&mut r, d, 1.0))).unwrap();
        }
        Self {
            state,
            proj,
            store,
            round: m + 1,
        }
    }

    pub fn pairs(&self) -> Vec<TrainingPair<'_>> {
        window_pairs(&self.store, &self.proj, 0, self.round).unwrap()
    }
}

pub struct ObjectiveGradErrors {
    pub a: f64,
    pub b: f64,
    pub predictor: f64,
    pub pairs: usize,
}

impl ObjectiveGradErrors {
    pub fn worst(&self) -> f64 {
        self.a.max(self.b).max(self.predictor)
    }
}

/// Analytic objective gradients against central differences.
pub fn objective_gradcheck(seed: u64) -> ObjectiveGradErrors {
    const H: f64 = 1e-6;
    const FLOOR: f64 = 1e-6;
    let fx = ObjectiveFixture::new(seed);
    let pairs = fx.pairs();
    let (_, grads) = objective_and_grad(&fx.state, &fx.proj, &pairs).unwrap();
    let loss = |st: &UserPredictorState| objective_and_grad(st, &fx.proj, &pairs).unwrap().0;

    let mut st = fx.state.clone();
    let num_a = central_diff(fx.state.a(), H, |a| {
        st.set_a(a.to_vec()).unwrap();
        loss(&st)
    });
    let mut st = fx.state.clone();
    let num_b = central_diff(fx.state.b(), H, |b| {
        st.set_b(b.to_vec()).unwrap();
        loss(&st)
    });
    let mut st = fx.state.clone();
    let num_p = central_diff(&fx.state.predictor().params_flat(), H, |p| {
        st.predictor_mut().set_params_flat(p).unwrap();
        loss(&st)
    });
    ObjectiveGradErrors {
        a: max_rel_err(&grads.a, &num_a, FLOOR),
        b: max_rel_err(&grads.b, &num_b, FLOOR),
        predictor: max_rel_err(&grads.predictor.flatten(), &num_p, FLOOR),
        pairs: pairs.len(),
    }
}

// ---------------------------------------------------------------------------
// Closed-form coefficients

pub struct ClosedFormCheck {
    pub residual: f64,
    pub grad_a_norm: f64,
    /// Residual after solving for `B` instead, with `A` left at ones.
    pub residual_b: f64,
}

/// Square linear fixture with `d = s = 4`: solve for `A` (and separately
/// `B`), plug it back in.
pub fn closed_form_check(seed: u64) -> ClosedFormCheck {
    let n = 4;
    let mut r = rng(seed);
    let mut w = gauss(&mut r, n * n, 0.3);
    (0..n).for_each(|i| w[i * n + i] += 1.0);
    let proj = Projector::from_weights(n, n, w, Activation::None).unwrap();
    let layers = (0..2)
        .map(|_| {
            let mut wl = gauss(&mut r, n * n, 0.3);
            (0..n).for_each(|i| wl[i * n + i] += 1.0);
            DenseLayer::new(n, n, wl, gauss(&mut r, n, 0.5), Activation::None).unwrap()
        })
        .collect();
    let base =
        UserPredictorState::with_parts(vec![1.0; n], gauss(&mut r, n, 0.5), Mlp::new(layers).unwrap(), 1e-3).unwrap();
    let bump = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| x + x.signum() * 0.5).collect() };
    let g_k_his = bump(gauss(&mut r, n, 1.0));
    let g_his = bump(gauss(&mut r, n, 1.0));
    let g_next = gauss(&mut r, n, 1.0);
    let pair = TrainingPair::new(&proj, &g_k_his, &g_his, &g_next);
    let residual_of = |state: &UserPredictorState| {
        let out = state.predict(&proj, &g_k_his, &g_his).unwrap();
        out.iter()
            .zip(&pair.target)
            .map(|(o, t)| (o - t) * (o - t))
            .sum::<f64>()
            .sqrt()
    };

    let mut state = base.clone();
    state.set_a(closed_form_a(&base, &proj, &g_k_his, &g_his, &g_next).unwrap()).unwrap();
    let (_, grads) = objective_and_grad(&state, &proj, std::slice::from_ref(&pair)).unwrap();
    let mut with_b = base.clone();
    with_b.set_b(closed_form_b(&base, &proj, &g_k_his, &g_his, &g_next).unwrap()).unwrap();
    ClosedFormCheck {
        residual: residual_of(&state),
        grad_a_norm: grads.a.iter().map(|x| x * x).sum::<f64>().sqrt(),
        residual_b: residual_of(&with_b),
    }
}

// ---------------------------------------------------------------------------
// Aggregator oracles

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

/// Every `k`-subset of `items`.
fn subsets(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    if items.len() < k {
        return Vec::new();
    }
    let mut out = subsets(&items[1..], k);
    for mut rest in subsets(&items[1..], k - 1) {
        rest.insert(0, items[0]);
        out.push(rest);
    }
    out
}

/// Krum by exhaustive search: each candidate's score is the smallest total
/// squared distance to any `n − f − 2` (at least 1) of the others.
pub fn brute_krum(grads: &[Vec<f64>], f: usize) -> usize {
    let n = grads.len();
    let k = n.saturating_sub(f + 2).max(1).min(n - 1);
    let mut best = (f64::INFINITY, 0);
    for i in 0..n {
        let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let score = subsets(&others, k)
            .iter()
            .map(|s| s.iter().map(|&j| sq_dist(&grads[i], &grads[j])).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        if score < best.0 {
            best = (score, i);
        }
    }
    best.1
}

/// Sequential pick-and-remove Krum; returns original indices, ascending.
pub fn brute_multi_krum(grads: &[Vec<f64>], f: usize, m_sel: usize) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..grads.len()).collect();
    let mut picked = Vec::new();
    while picked.len() < m_sel {
        let pos = if remaining.len() == 1 {
            0
        } else {
            let sub: Vec<Vec<f64>> = remaining.iter().map(|&i| grads[i].clone()).collect();
            brute_krum(&sub, f)
        };
        picked.push(remaining.remove(pos));
    }
    picked.sort_unstable();
    picked
}

pub fn naive_mean(grads: &[Vec<f64>]) -> Vec<f64> {
    let d = grads[0].len();
    (0..d)
        .map(|j| grads.iter().map(|g| g[j]).sum::<f64>() / grads.len() as f64)
        .collect()
}

/// Order statistic by counting: the value with exactly `rank` smaller
/// entries (ties resolved by position).
fn kth(col: &[f64], rank: usize) -> f64 {
    for (i, &v) in col.iter().enumerate() {
        let below = col
            .iter()
            .enumerate()
            .filter(|&(j, &w)| w < v || (w == v && j < i))
            .count();
        if below == rank {
            return v;
        }
    }
    unreachable!("rank within range")
}

pub fn brute_median(grads: &[Vec<f64>]) -> Vec<f64> {
    let n = grads.len();
    (0..grads[0].len())
        .map(|j| {
            let col: Vec<f64> = grads.iter().map(|g| g[j]).collect();
            if n % 2 == 1 {
                kth(&col, n / 2)
            } else {
                (kth(&col, n / 2 - 1) + kth(&col, n / 2)) / 2.0
            }
        })
        .collect()
}

/// Drops one maximum and one minimum `trim` times, then averages.
pub fn brute_trimmed_mean(grads: &[Vec<f64>], trim: usize) -> Vec<f64> {
    (0..grads[0].len())
        .map(|j| {
            let mut col: Vec<f64> = grads.iter().map(|g| g[j]).collect();
            for _ in 0..trim {
                let hi = (0..col.len()).fold(0, |b, i| if col[i] > col[b] { i } else { b });
                col.remove(hi);
                let lo = (0..col.len()).fold(0, |b, i| if col[i] < col[b] { i } else { b });
                col.remove(lo);
            }
            col.iter().sum::<f64>() / col.len() as f64
        })
        .collect()
}

pub struct BaselineReport {
    pub fixtures: usize,
    pub mismatches: Vec<String>,
    pub max_avg_err: f64,
}

/// Runs every aggregator on `count` random fixtures (`n ≤ 7`, `d ≤ 5`) and
/// compares against the oracles above.
pub fn check_baselines(count: usize, seed: u64) -> BaselineReport {
    use vertfl::baselines::{krum, krum_select, median, multi_krum, multi_krum_select, trimmed_mean};
    let mut r = rng(seed);
    let mut mismatches = Vec::new();
    let mut max_avg_err: f64 = 0.0;
    let mut err = |a: &[f64], b: &[f64]| {
        let e = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        max_avg_err = max_avg_err.max(e);
        e
    };
    for case in 0..count {
        let n = r.random_range(3..=7);
        let d = r.random_range(1..=5);
        let raw: Vec<Vec<f64>> = (0..n).map(|_| gauss(&mut r, d, 1.0)).collect();
        let grads: Vec<Vector> = raw.iter().map(|g| vector(g.clone())).collect();
        let f = r.random_range(0..=n - 3);
        let m_sel = r.random_range(1..=n);
        let trim = r.random_range(0..=(n - 1) / 2);

        let want = brute_krum(&raw, f);
        let got = krum_select(&grads, f).unwrap();
        if got != want {
            mismatches.push(format!("case {case}: krum n={n} f={f} got {got} want {want}"));
        }
        if krum(&grads, f).unwrap().as_slice() != raw[want].as_slice() {
            mismatches.push(format!("case {case}: krum vector is not the winning input"));
        }
        let want = brute_multi_krum(&raw, f, m_sel);
        let got = multi_krum_select(&grads, f, m_sel).unwrap();
        if got != want {
            mismatches.push(format!("case {case}: multi_krum n={n} f={f} m={m_sel} got {got:?} want {want:?}"));
        }
        let picked: Vec<Vec<f64>> = want.iter().map(|&i| raw[i].clone()).collect();
        if err(multi_krum(&grads, f, m_sel).unwrap().as_slice(), &naive_mean(&picked)) > 1e-12 {
            mismatches.push(format!("case {case}: multi_krum average"));
        }
        if err(median(&grads).unwrap().as_slice(), &brute_median(&raw)) > 1e-12 {
            mismatches.push(format!("case {case}: median"));
        }
        if err(trimmed_mean(&grads, trim).unwrap().as_slice(), &brute_trimmed_mean(&raw, trim)) > 1e-12 {
            mismatches.push(format!("case {case}: trimmed_mean trim={trim}"));
        }
    }
    BaselineReport {
        fixtures: count,
        mismatches,
        max_avg_err,
    }
}

// ---------------------------------------------------------------------------
// Attack contracts

pub fn context<'a>(users: &'a [usize], honest: &'a [Vector], dim: usize, seed: u64) -> AttackContext<'a> {
    AttackContext {
        users,
        honest_grads_of_compromised: honest,
        all_honest_grads: None,
        poison_deltas: None,
        n_selected: 10,
        dim,
        z_max: 1.0,
        seed,
        round: 7,
    }
}

/// Largest feasible λ on a uniform grid of `points` over `[0, 2T]`; the
/// feasible set is an interval starting at 0, so the scan stops at the first
/// infeasible point.
pub fn grid_lambda(refs: &[Vec<f64>], points: usize) -> f64 {
    let g = naive_mean(refs);
    let gn = sq_dist(&g, &vec![0.0; g.len()]).sqrt();
    let dir: Vec<f64> = g.iter().map(|x| -x / gn).collect();
    let mut t: f64 = 0.0;
    for i in 0..refs.len() {
        for j in 0..refs.len() {
            t = t.max(sq_dist(&refs[i], &refs[j]).sqrt());
        }
    }
    let hi = 2.0 * t;
    let mut best = 0.0;
    let mut p = vec![0.0; g.len()];
    for k in 0..=points {
        let lambda = hi * k as f64 / points as f64;
        for i in 0..p.len() {
            p[i] = g[i] + lambda * dir[i];
        }
        if refs.iter().all(|r| sq_dist(&p, r).sqrt() <= t) {
            best = lambda;
        } else {
            break;
        }
    }
    best
}

pub struct AttackReport {
    pub agr_lambda: f64,
    pub agr_grid: f64,
    pub alie_identical: bool,
    pub gn_mean: f64,
    pub gn_std: f64,
    pub gn_independent: bool,
    pub mr_err: f64,
}

impl AttackReport {
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        if (self.agr_lambda - self.agr_grid).abs() > 1e-3 {
            out.push(format!("AGR λ {} vs grid {}", self.agr_lambda, self.agr_grid));
        }
        if !self.alie_identical {
            out.push("ALIE outputs differ".into());
        }
        if !(-0.05..=0.05).contains(&self.gn_mean) || !(0.95..=1.05).contains(&self.gn_std) {
            out.push(format!("GN mean {} std {}", self.gn_mean, self.gn_std));
        }
        if !self.gn_independent {
            out.push("GN users share a vector".into());
        }
        if self.mr_err > 1e-12 {
            out.push(format!("MR replacement error {}", self.mr_err));
        }
        out
    }
}

pub fn check_attacks(seed: u64) -> AttackReport {
    let mut r = rng(seed);

    let raw: Vec<Vec<f64>> = (0..3).map(|_| gauss(&mut r, 4, 1.0).iter().map(|x| x + 1.0).collect()).collect();
    let refs: Vec<Vector> = raw.iter().map(|g| vector(g.clone())).collect();
    let users = [1, 4, 6];
    let (_, mm) = agr_attack(&context(&users, &refs, 4, seed)).unwrap();
    let agr_grid = grid_lambda(&raw, 1_000_000);

    let honest: Vec<Vector> = (0..4).map(|_| vector(gauss(&mut r, 6, 1.0))).collect();
    let alie = alie_attack(&context(&[0, 2, 3, 5], &honest, 6, seed)).unwrap();
    let alie_identical = alie.windows(2).all(|w| w[0].as_slice() == w[1].as_slice());

    let d = 10_000;
    let zeros = vec![Vector::zeros(d); 2];
    let gn = gn_attack(&context(&[2, 9], &zeros, d, seed));
    let v = gn[0].as_slice();
    let gn_mean = v.iter().sum::<f64>() / d as f64;
    let gn_std = (v.iter().map(|x| (x - gn_mean).powi(2)).sum::<f64>() / d as f64).sqrt();
    let gn_independent = gn[0].as_slice() != gn[1].as_slice();

    let mr_err = mr_replacement_error(seed);
    AttackReport {
        agr_lambda: mm.lambda,
        agr_grid,
        alie_identical,
        gn_mean,
        gn_std,
        gn_independent,
        mr_err,
    }
}

/// One MR gradient averaged with `|C_t| − 1` zero updates and applied with
/// `η = 1` must land on the label-flipped local model.
pub fn mr_replacement_error(seed: u64) -> f64 {
    let data: Dataset = make_synthetic(3, 4, 10, seed).unwrap().label_flipped();
    let mut r = rng(seed);
    let global = ModelState::from_mlp(&Mlp::init(&[4, 5, 3], Activation::Relu, Activation::Softmax, &mut r));
    let params = LocalTrainParams {
        epochs: 3,
        batch: 8,
        lr: 0.1,
    };
    let delta = local_train(&data, &global, &params, &mut stream(seed, Purpose::Attack, 0, 1)).unwrap().delta;
    let poisoned = apply_global(&global, &delta, 1.0).unwrap();
    let n_selected = 8;
    let deltas = [delta];
    let zeros = [Vector::zeros(global.dim())];
    let mut ctx = context(&[0], &zeros, global.dim(), seed);
    ctx.poison_deltas = Some(&deltas);
    ctx.n_selected = n_selected;
    let submitted = mr_attack(&ctx).unwrap().remove(0);
    let mut all = vec![Vector::zeros(global.dim()); n_selected - 1];
    all.push(submitted);
    let agg = vertfl::baselines::fedavg(&all).unwrap();
    let replaced = apply_global(&global, &agg, 1.0).unwrap();
    replaced
        .params()
        .iter()
        .zip(poisoned.params().iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}
