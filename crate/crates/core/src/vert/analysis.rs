//! Closed-form coefficient vectors for the activation-free square case.

use super::predictor::UserPredictorState;
use super::projector::Projector;
use crate::error::{check_len, Error, Result};
use crate::tensor::linalg::{matmul, matvec, solve};
use crate::tensor::Activation;

/// The predictor as one affine map `p ↦ W p + c`. Fails if any layer has an
/// activation.
pub fn predictor_affine(state: &UserPredictorState) -> Result<(Vec<f64>, Vec<f64>)> {
    let layers = state.predictor().layers();
    let n = state.predictor().input_dim();
    let mut w = vec![0.0; n * n];
    (0..n).for_each(|i| w[i * n + i] = 1.0);
    let mut c = vec![0.0; n];
    let mut width = n;
    for l in layers {
        if l.activation() != Activation::None {
            return Err(Error::InvalidArgument("closed form needs an activation-free predictor".into()));
        }
        w = matmul(l.weights(), &w, l.outputs(), width, n);
        c = matvec(l.weights(), &c, l.outputs(), width)
            .into_iter()
            .zip(l.bias())
            .map(|(x, b)| x + b)
            .collect();
        width = l.outputs();
    }
    Ok((w, c))
}

/// The integrated input `x` with `f_pred(f_proj(x)) = f_proj(g_next)`.
fn required_input(state: &UserPredictorState, proj: &Projector, g_next: &[f64]) -> Result<Vec<f64>> {
    let d = state.dim();
    if proj.output_dim() != d || proj.input_dim() != d {
        return Err(Error::InvalidArgument(format!(
            "closed form needs a square projector of size {d}, got {}x{}",
            proj.output_dim(),
            proj.input_dim()
        )));
    }
    if proj.activation() != Activation::None {
        return Err(Error::InvalidArgument("closed form needs an activation-free projector".into()));
    }
    check_len("closed form next gradient", d, g_next.len())?;
    let (w_pred, c) = predictor_affine(state)?;
    let m = matmul(&w_pred, proj.weights(), d, d, d);
    let rhs: Vec<f64> = proj.project(g_next).iter().zip(&c).map(|(t, c)| t - c).collect();
    solve(&m, &rhs, d)
}

fn divide(num: Vec<f64>, den: &[f64]) -> Result<Vec<f64>> {
    if den.contains(&0.0) {
        return Err(Error::Singular("closed form divisor has a zero entry"));
    }
    Ok(num.into_iter().zip(den).map(|(n, d)| n / d).collect())
}

/// `A = (M⁻¹ (W_proj g_next − c) − B ⊙ g_his) / g_k_his`, holding `B` fixed.
pub fn closed_form_a(
    state: &UserPredictorState,
    proj: &Projector,
    g_k_his: &[f64],
    g_his: &[f64],
    g_k_next: &[f64],
) -> Result<Vec<f64>> {
    check_len("closed form user gradient", state.dim(), g_k_his.len())?;
    check_len("closed form global gradient", state.dim(), g_his.len())?;
    let x = required_input(state, proj, g_k_next)?;
    let num = x.iter().zip(state.b()).zip(g_his).map(|((x, b), g)| x - b * g).collect();
    divide(num, g_k_his)
}

/// The same solve for `B`, holding `A` fixed.
pub fn closed_form_b(
    state: &UserPredictorState,
    proj: &Projector,
    g_k_his: &[f64],
    g_his: &[f64],
    g_k_next: &[f64],
) -> Result<Vec<f64>> {
    check_len("closed form user gradient", state.dim(), g_k_his.len())?;
    check_len("closed form global gradient", state.dim(), g_his.len())?;
    let x = required_input(state, proj, g_k_next)?;
    let num = x.iter().zip(state.a()).zip(g_k_his).map(|((x, a), u)| x - a * u).collect();
    divide(num, g_his)
}
