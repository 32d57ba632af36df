use std::ops::Deref;

use crate::error::{check_len, Error, Result};

/// A non-empty dense vector of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("Vector::new"));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("Vector::new"));
        }
        Ok(Vector(data))
    }

    /// # Panics
    /// If `len == 0`.
    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "Vector must be non-empty");
        Vector(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        assert!(len > 0, "Vector must be non-empty");
        assert!(value.is_finite());
        Vector(vec![value; len])
    }

    /// Wraps data already known to be non-empty and finite.
    pub(crate) fn from_trusted(data: Vec<f64>) -> Self {
        debug_assert!(!data.is_empty());
        debug_assert!(data.iter().all(|x| x.is_finite()));
        Vector(data)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn scaled(&self, factor: f64) -> Vector {
        Vector(self.0.iter().map(|x| x * factor).collect())
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        Vector::new(value)
    }
}

/// Inner product over the common prefix. Sums in eight interleaved lanes so
/// the compiler can vectorize; the order is fixed, so results are
/// reproducible.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    const LANES: usize = 8;
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f64>() + tail
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
///
/// Fails with [`Error::ZeroNorm`] if either input has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len("cosine", a.len(), b.len())?;
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine"));
    }
    let c = dot(a, b) / (na * nb);
    if !c.is_finite() {
        return Err(Error::NonFinite("cosine"));
    }
    Ok(c.clamp(-1.0, 1.0))
}

/// Euclidean distance `‖a − b‖₂`.
pub fn l2_dist(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len("l2_dist", a.len(), b.len())?;
    Ok(squared_dist(a, b).sqrt())
}

pub(crate) fn squared_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
