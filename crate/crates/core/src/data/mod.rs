//! Classification datasets and their split across federated users.

mod idx;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{check_len, Error, Result};
use crate::rng::{stream, Purpose, StreamRng};

pub use idx::{load_idx, read_idx_images, read_idx_labels, IdxImages};

/// Per-coordinate standard deviation of the synthetic class clusters.
pub const SYNTHETIC_NOISE_STD: f64 = 0.2;

/// Row-major `len × dims` feature matrix with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dims: usize,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dims: usize, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument("a dataset needs at least 2 classes".into()));
        }
        if dims == 0 {
            return Err(Error::InvalidArgument("feature width must be positive".into()));
        }
        check_len("Dataset features", labels.len() * dims, features.len())?;
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("Dataset features"));
        }
        Ok(Self {
            features,
            dims,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (&self.features[i * self.dims..(i + 1) * self.dims], self.labels[i])
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dims);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let (x, y) = self.sample(i);
            features.extend_from_slice(x);
            labels.push(y);
        }
        Dataset {
            features,
            dims: self.dims,
            labels,
            classes: self.classes,
        }
    }

    /// Copy with every label mapped to `(label + 1) mod classes`.
    pub fn label_flipped(&self) -> Dataset {
        Dataset {
            features: self.features.clone(),
            dims: self.dims,
            labels: self.labels.iter().map(|l| (l + 1) % self.classes).collect(),
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Gaussian clusters around pairwise unit-distance class means.
///
/// With `classes <= dims` the means are `e_c / √2`; otherwise they sit at
/// unit spacing along the first axis.
pub fn make_synthetic(classes: usize, dims: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    synthetic(classes, dims, per_class, &mut stream(seed, Purpose::Data, 0, 0))
}

/// Held-out draw from the same class-conditional distributions as
/// [`make_synthetic`] with the same `seed`.
pub fn make_synthetic_test(classes: usize, dims: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    synthetic(classes, dims, per_class, &mut stream(seed, Purpose::TestData, 0, 0))
}

fn synthetic(classes: usize, dims: usize, per_class: usize, rng: &mut StreamRng) -> Result<Dataset> {
    if classes < 2 || dims < 2 || per_class < 1 {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs classes >= 2, dims >= 2, per_class >= 1 (got {classes}, {dims}, {per_class})"
        )));
    }
    let noise = Normal::new(0.0, SYNTHETIC_NOISE_STD).expect("valid std");
    let mut features = Vec::with_capacity(classes * per_class * dims);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let mut mean = vec![0.0; dims];
        if classes <= dims {
            mean[c] = std::f64::consts::FRAC_1_SQRT_2;
        } else {
            mean[0] = c as f64;
        }
        for _ in 0..per_class {
            features.extend(mean.iter().map(|m| m + noise.sample(rng)));
            labels.push(c);
        }
    }
    Dataset::new(features, dims, labels, classes)
}

/// Disjoint per-user sample indices.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub assignments: Vec<Vec<usize>>,
    pub beta: f64,
}

impl PartitionPlan {
    pub fn users(&self) -> usize {
        self.assignments.len()
    }

    pub fn total(&self) -> usize {
        self.assignments.iter().map(Vec::len).sum()
    }
}

/// Splits each class's samples across `users` with proportions drawn from
/// `Dir(beta · 1)`. Users left empty receive one sample taken from the
/// currently largest shard.
pub fn dirichlet_partition(ds: &Dataset, users: usize, beta: f64, seed: u64) -> Result<PartitionPlan> {
    if users == 0 {
        return Err(Error::InvalidArgument("need at least one user".into()));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    if ds.len() < users {
        return Err(Error::InvalidArgument(format!(
            "dataset of {} samples cannot cover {users} users",
            ds.len()
        )));
    }
    let mut rng = stream(seed, Purpose::Partition, 0, 0);
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }

    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); users];
    for mut idx in by_class.into_iter().filter(|c| !c.is_empty()) {
        idx.shuffle(&mut rng);
        let mut props: Vec<f64> = (0..users).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = props.iter().sum();
        if total > 0.0 && total.is_finite() {
            props.iter_mut().for_each(|p| *p /= total);
        } else {
            // Every gamma draw underflowed: give the class to one user.
            props = vec![0.0; users];
            props[rng.random_range(0..users)] = 1.0;
        }
        let n = idx.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (u, p) in props.iter().enumerate() {
            cum += p;
            let end = if u + 1 == users {
                n
            } else {
                ((cum * n as f64).round() as usize).clamp(start, n)
            };
            assignments[u].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }

    for u in 0..users {
        if assignments[u].is_empty() {
            let donor = (0..users)
                .max_by(|&a, &b| {
                    assignments[a]
                        .len()
                        .cmp(&assignments[b].len())
                        .then(b.cmp(&a))
                })
                .unwrap();
            let taken = assignments[donor].pop().expect("donor shard is non-empty");
            assignments[u].push(taken);
        }
    }
    Ok(PartitionPlan { assignments, beta })
}
