mod common;

use common::{gauss, rng};
use proptest::prelude::*;
use vertfl::engine::{build_pool, GradientVector};
use vertfl::tensor::Vector;
use vertfl::vert::{Vert, VertConfig};

const D: usize = 64;

fn config() -> VertConfig {
    VertConfig {
        m: 4,
        kappa: 3,
        s: 8,
        ..VertConfig::default()
    }
}

/// Six users drifting around a shared direction; user 5 uploads noise.
fn uploads(seed: u64, t: usize) -> Vec<GradientVector> {
    let mut base_rng = rng(seed);
    let base = gauss(&mut base_rng, D, 1.0);
    let mut r = rng(seed * 1000 + t as u64);
    (0..6)
        .map(|u| {
            let noise = gauss(&mut r, D, if u == 5 { 3.0 } else { 0.2 });
            let values = if u == 5 {
                noise
            } else {
                base.iter().zip(&noise).map(|(b, n)| b + n).collect()
            };
            GradientVector {
                values: Vector::new(values).unwrap(),
                owner: u,
                round: t,
            }
        })
        .collect()
}

fn mean(ups: &[GradientVector]) -> Vector {
    let mut m = vec![0.0; D];
    for g in ups {
        m.iter_mut().zip(g.values.iter()).for_each(|(a, b)| *a += b / ups.len() as f64);
    }
    Vector::new(m).unwrap()
}

fn warmed(seed: u64, rounds: usize) -> Vert {
    let mut vert = Vert::new(config(), D, seed).unwrap();
    for t in 1..=rounds {
        let ups = uploads(seed, t);
        vert.observe(t, &ups, &mean(&ups)).unwrap();
    }
    vert
}

#[test]
fn projector_is_never_modified() {
    let pool = build_pool(1).unwrap();
    let mut vert = warmed(2, 2);
    let before: Vec<u64> = vert.projector().weights().iter().map(|w| w.to_bits()).collect();
    for t in 3..=8 {
        vert.round(t, &uploads(2, t), &pool).unwrap();
    }
    let after: Vec<u64> = vert.projector().weights().iter().map(|w| w.to_bits()).collect();
    assert_eq!(before, after);
}

#[test]
fn rejected_users_are_flagged_and_resolve_to_the_global_gradient() {
    let pool = build_pool(1).unwrap();
    let mut vert = warmed(3, 3);
    let out = vert.round(4, &uploads(3, 4), &pool).unwrap();
    assert_eq!(out.selected.len(), 3);
    let store = vert.store();
    let global = store.global(4).unwrap().clone();
    assert_eq!(global, out.aggregate);
    for u in 0..6 {
        let rejected = !out.selected.contains(&u);
        assert_eq!(store.is_flagged(u, 4), rejected, "user {u}");
        if rejected {
            assert_eq!(store.resolve(u, 4).unwrap(), &global);
        } else {
            assert_eq!(store.resolve(u, 4).unwrap(), &uploads(3, 4)[u].values);
        }
    }
}

#[test]
fn noisy_uploader_is_not_selected() {
    let pool = build_pool(1).unwrap();
    let mut vert = warmed(4, 3);
    for t in 4..=7 {
        let out = vert.round(t, &uploads(4, t), &pool).unwrap();
        assert!(!out.selected.contains(&5), "round {t}: {:?}", out.selected);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scores_ignore_positive_rescaling(seed in 1u64..500, scale in 1e-3f64..1e3) {
        let pool = build_pool(1).unwrap();
        let vert = warmed(seed, 3);
        let ups = uploads(seed, 4);
        let scaled: Vec<GradientVector> = ups
            .iter()
            .map(|g| GradientVector {
                values: Vector::new(g.values.iter().map(|x| x * scale).collect()).unwrap(),
                ..g.clone()
            })
            .collect();
        let a = vert.clone().score(4, &ups, &pool).unwrap();
        let b = vert.clone().score(4, &scaled, &pool).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x.rho - y.rho).abs() <= 1e-9, "{} vs {}", x.rho, y.rho);
        }
        let (mut va, mut vb) = (vert.clone(), vert);
        let sa = va.round(4, &ups, &pool).unwrap().selected;
        let sb = vb.round(4, &scaled, &pool).unwrap().selected;
        prop_assert_eq!(sa, sb);
    }
}
