//! Horizontal aggregation rules: each looks only at the gradients of the
//! current round.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::tensor::{squared_dist, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Fedavg,
    Krum,
    MultiKrum,
    Median,
    TrimmedMean,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 5] = [
        AggregatorKind::Fedavg,
        AggregatorKind::Krum,
        AggregatorKind::MultiKrum,
        AggregatorKind::Median,
        AggregatorKind::TrimmedMean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregatorKind::Fedavg => "fedavg",
            AggregatorKind::Krum => "krum",
            AggregatorKind::MultiKrum => "multi_krum",
            AggregatorKind::Median => "median",
            AggregatorKind::TrimmedMean => "trimmed_mean",
        }
    }
}

/// A fully parameterised aggregation rule for one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    Fedavg,
    Krum { f: usize },
    MultiKrum { f: usize, m_sel: usize },
    Median,
    TrimmedMean { trim: usize },
}

/// Aggregated vector plus the input positions that contributed to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub vector: Vector,
    pub used: Vec<usize>,
}

/// Optional overrides used when turning an [`AggregatorKind`] into a [`Rule`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleParams {
    /// Assumed attacker count for Krum variants; default `⌊(n − 1)/2⌋`.
    pub f: Option<usize>,
    /// Multi-Krum pick count; default `n − f`.
    pub m_sel: Option<usize>,
    /// Fraction trimmed from each side by the trimmed mean.
    pub trim_fraction: f64,
}

impl Default for RuleParams {
    fn default() -> Self {
        Self {
            f: None,
            m_sel: None,
            trim_fraction: 0.2,
        }
    }
}

impl Rule {
    /// Concrete rule for `n` inputs, with parameters clamped into range.
    pub fn build(kind: AggregatorKind, n: usize, params: RuleParams) -> Rule {
        let f = params
            .f
            .unwrap_or(n.saturating_sub(1) / 2)
            .min(n.saturating_sub(1));
        match kind {
            AggregatorKind::Fedavg => Rule::Fedavg,
            AggregatorKind::Krum => Rule::Krum { f },
            AggregatorKind::MultiKrum => Rule::MultiKrum {
                f,
                m_sel: params.m_sel.unwrap_or(n - f).clamp(1, n.max(1)),
            },
            AggregatorKind::Median => Rule::Median,
            AggregatorKind::TrimmedMean => {
                let trim = (params.trim_fraction * n as f64).floor() as usize;
                Rule::TrimmedMean {
                    trim: trim.min(n.saturating_sub(1) / 2),
                }
            }
        }
    }

    pub fn apply(self, grads: &[Vector]) -> Result<Aggregate> {
        let all = || (0..grads.len()).collect::<Vec<_>>();
        Ok(match self {
            Rule::Fedavg => Aggregate {
                vector: fedavg(grads)?,
                used: all(),
            },
            Rule::Krum { f } => {
                let i = krum_select(grads, f)?;
                Aggregate {
                    vector: grads[i].clone(),
                    used: vec![i],
                }
            }
            Rule::MultiKrum { f, m_sel } => {
                let used = multi_krum_select(grads, f, m_sel)?;
                let picked: Vec<Vector> = used.iter().map(|&i| grads[i].clone()).collect();
                Aggregate {
                    vector: fedavg(&picked)?,
                    used,
                }
            }
            Rule::Median => Aggregate {
                vector: median(grads)?,
                used: all(),
            },
            Rule::TrimmedMean { trim } => Aggregate {
                vector: trimmed_mean(grads, trim)?,
                used: all(),
            },
        })
    }
}

fn check_same_len(context: &'static str, grads: &[Vector]) -> Result<usize> {
    let first = grads.first().ok_or(Error::Empty(context))?;
    for g in &grads[1..] {
        check_len(context, first.len(), g.len())?;
    }
    Ok(first.len())
}

/// Arithmetic mean.
pub fn fedavg(grads: &[Vector]) -> Result<Vector> {
    let d = check_same_len("fedavg", grads)?;
    let mut sum = vec![0.0; d];
    for g in grads {
        for (s, v) in sum.iter_mut().zip(g.iter()) {
            *s += v;
        }
    }
    let n = grads.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Vector::new(sum)
}

/// Krum scores over `grads`: for each gradient, the sum of its
/// `clamp(n − f − 2, 1, n − 1)` smallest squared distances to the others.
fn krum_scores(grads: &[&Vector], f: usize) -> Vec<f64> {
    let n = grads.len();
    let neighbours = n.saturating_sub(f + 2).max(1).min(n - 1);
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = squared_dist(grads[i], grads[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i * n + j]).collect();
            row.sort_by(f64::total_cmp);
            row.iter().take(neighbours).sum()
        })
        .collect()
}

fn argmin_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s < scores[best] {
            best = i;
        }
    }
    best
}

fn check_krum(grads: &[Vector], f: usize) -> Result<()> {
    check_same_len("krum", grads)?;
    let n = grads.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("krum needs at least 3 gradients, got {n}")));
    }
    if f >= n {
        return Err(Error::InvalidArgument(format!(
            "krum: assumed attacker count {f} not below gradient count {n}"
        )));
    }
    Ok(())
}

/// Index of the Krum winner; ties go to the lowest index.
pub fn krum_select(grads: &[Vector], f: usize) -> Result<usize> {
    check_krum(grads, f)?;
    let refs: Vec<&Vector> = grads.iter().collect();
    Ok(argmin_lowest(&krum_scores(&refs, f)))
}

pub fn krum(grads: &[Vector], f: usize) -> Result<Vector> {
    Ok(grads[krum_select(grads, f)?].clone())
}

/// Repeatedly picks and removes the Krum winner, `m_sel` times. Returned
/// indices are sorted ascending.
pub fn multi_krum_select(grads: &[Vector], f: usize, m_sel: usize) -> Result<Vec<usize>> {
    check_krum(grads, f)?;
    if m_sel == 0 || m_sel > grads.len() {
        return Err(Error::InvalidArgument(format!(
            "multi_krum: m_sel must be in 1..={}, got {m_sel}",
            grads.len()
        )));
    }
    let mut remaining: Vec<usize> = (0..grads.len()).collect();
    let mut picked = Vec::with_capacity(m_sel);
    while picked.len() < m_sel {
        let winner = if remaining.len() == 1 {
            0
        } else {
            let refs: Vec<&Vector> = remaining.iter().map(|&i| &grads[i]).collect();
            argmin_lowest(&krum_scores(&refs, f))
        };
        picked.push(remaining.remove(winner));
    }
    picked.sort_unstable();
    Ok(picked)
}

pub fn multi_krum(grads: &[Vector], f: usize, m_sel: usize) -> Result<Vector> {
    Rule::MultiKrum { f, m_sel }.apply(grads).map(|a| a.vector)
}

fn coordinate_columns(grads: &[Vector], d: usize) -> impl Iterator<Item = Vec<f64>> + '_ {
    (0..d).map(move |j| {
        let mut col: Vec<f64> = grads.iter().map(|g| g[j]).collect();
        col.sort_by(f64::total_cmp);
        col
    })
}

/// Coordinatewise median; an even count averages the two middle values.
pub fn median(grads: &[Vector]) -> Result<Vector> {
    let d = check_same_len("median", grads)?;
    let n = grads.len();
    let out = coordinate_columns(grads, d)
        .map(|col| {
            if n % 2 == 1 {
                col[n / 2]
            } else {
                (col[n / 2 - 1] + col[n / 2]) / 2.0
            }
        })
        .collect();
    Vector::new(out)
}

/// Coordinatewise mean after dropping the `trim` largest and `trim`
/// smallest values.
pub fn trimmed_mean(grads: &[Vector], trim: usize) -> Result<Vector> {
    let d = check_same_len("trimmed_mean", grads)?;
    let n = grads.len();
    if 2 * trim >= n {
        return Err(Error::InvalidArgument(format!(
            "trimmed_mean: cannot trim {trim} from each side of {n} values"
        )));
    }
    let kept = (n - 2 * trim) as f64;
    let out = coordinate_columns(grads, d)
        .map(|col| col[trim..n - trim].iter().sum::<f64>() / kept)
        .collect();
    Vector::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vs(rows: &[&[f64]]) -> Vec<Vector> {
        rows.iter().map(|r| Vector::new(r.to_vec()).unwrap()).collect()
    }

    #[test]
    fn fedavg_examples() {
        assert_eq!(fedavg(&vs(&[&[1.0, 1.0]])).unwrap().as_slice(), &[1.0, 1.0]);
        assert_eq!(
            fedavg(&vs(&[&[0.0, 2.0], &[2.0, 0.0]])).unwrap().as_slice(),
            &[1.0, 1.0]
        );
        let v = [0.1, -0.7, 3.3];
        let copies = vec![Vector::new(v.to_vec()).unwrap(); 7];
        for (a, b) in fedavg(&copies).unwrap().iter().zip(v) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
        assert!(matches!(fedavg(&[]), Err(Error::Empty(_))));
        assert!(fedavg(&vs(&[&[1.0], &[1.0, 2.0]])).is_err());
    }

    #[test]
    fn krum_examples() {
        let same = vs(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        assert_eq!(krum(&same, 0).unwrap().as_slice(), &[1.0, 2.0]);
        let g = vs(&[&[0.0], &[0.1], &[10.0]]);
        let w = krum(&g, 1).unwrap();
        assert_ne!(w.as_slice(), &[10.0]);
        // n − f − 2 = 0 is clamped to one neighbour: scores 0.01, 0.01, 98.01.
        assert_eq!(krum_select(&g, 1).unwrap(), 0);
    }

    #[test]
    fn krum_rejects_small_inputs() {
        assert!(krum(&vs(&[&[0.0], &[1.0]]), 0).is_err());
        assert!(krum(&vs(&[&[0.0], &[1.0], &[2.0]]), 3).is_err());
    }

    #[test]
    fn multi_krum_limits() {
        let g = vs(&[&[0.0, 1.0], &[0.2, 0.9], &[5.0, -3.0], &[0.1, 1.1], &[-0.3, 0.8]]);
        assert_eq!(multi_krum(&g, 1, 1).unwrap(), krum(&g, 1).unwrap());
        assert_eq!(multi_krum(&g, 0, g.len()).unwrap(), fedavg(&g).unwrap());
        assert!(multi_krum(&g, 0, 0).is_err());
        assert!(multi_krum(&g, 0, 6).is_err());
    }

    #[test]
    fn median_examples() {
        let g = vs(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(median(&g).unwrap().as_slice(), &[3.0, 4.0]);
        assert_eq!(median(&g[..1]).unwrap().as_slice(), &[1.0, 2.0]);
        assert_eq!(median(&g[..2]).unwrap().as_slice(), &[2.0, 3.0]);
        assert!(median(&[]).is_err());
    }

    #[test]
    fn trimmed_mean_examples() {
        let g = vs(&[&[0.0], &[1.0], &[100.0]]);
        assert_eq!(trimmed_mean(&g, 1).unwrap().as_slice(), &[1.0]);
        assert_eq!(trimmed_mean(&g, 0).unwrap(), fedavg(&g).unwrap());
        assert!(trimmed_mean(&g, 2).is_err());
        let four = vs(&[&[0.0], &[1.0], &[2.0], &[3.0]]);
        assert!(trimmed_mean(&four, 2).is_err());
    }

    fn grads_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (3usize..7, 1usize..5).prop_flat_map(|(n, d)| {
            proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, d), n)
        })
    }

    proptest! {
        #[test]
        fn aggregators_are_permutation_invariant(rows in grads_strategy(), rot in 0usize..7) {
            let g: Vec<Vector> = rows.iter().map(|r| Vector::new(r.clone()).unwrap()).collect();
            let mut p = g.clone();
            let k = rot % p.len();
            p.rotate_left(k);
            prop_assert_eq!(median(&g).unwrap(), median(&p).unwrap());
            prop_assert_eq!(trimmed_mean(&g, 1).unwrap(), trimmed_mean(&p, 1).unwrap());
            // Tied minimum scores legitimately resolve by position.
            let refs: Vec<&Vector> = g.iter().collect();
            let mut scores = krum_scores(&refs, 1);
            scores.sort_by(f64::total_cmp);
            prop_assume!(scores[0] != scores[1]);
            prop_assert_eq!(krum(&g, 1).unwrap(), krum(&p, 1).unwrap());
        }

        #[test]
        fn krum_returns_an_input_exactly(rows in grads_strategy(), f in 0usize..3) {
            let g: Vec<Vector> = rows.iter().map(|r| Vector::new(r.clone()).unwrap()).collect();
            let w = krum(&g, f).unwrap();
            prop_assert!(g.contains(&w));
        }

        #[test]
        fn median_and_trim_are_monotone(
            rows in grads_strategy(),
            who in 0usize..7,
            coord in 0usize..5,
            bump in 0.0f64..5.0,
        ) {
            let g: Vec<Vector> = rows.iter().map(|r| Vector::new(r.clone()).unwrap()).collect();
            let mut h = rows.clone();
            let i = who % h.len();
            let j = coord % h[0].len();
            h[i][j] += bump;
            let h: Vec<Vector> = h.into_iter().map(|r| Vector::new(r).unwrap()).collect();
            let (m0, m1) = (median(&g).unwrap(), median(&h).unwrap());
            let (t0, t1) = (trimmed_mean(&g, 1).unwrap(), trimmed_mean(&h, 1).unwrap());
            for k in 0..m0.len() {
                prop_assert!(m1[k] >= m0[k]);
                prop_assert!(t1[k] >= t0[k] - 1e-12);
            }
        }
    }
}
