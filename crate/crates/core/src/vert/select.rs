use crate::error::{Error, Result};

/// The `kappa` highest-scoring users, ascending by id. Ties go to the lower
/// id; NaN scores rank last.
pub fn select_topk(scores: &[(usize, f64)], kappa: usize) -> Result<Vec<usize>> {
    if kappa > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "kappa = {kappa} exceeds the {} scored users",
            scores.len()
        )));
    }
    let key = |s: f64| if s.is_nan() { f64::NEG_INFINITY } else { s };
    let mut ranked = scores.to_vec();
    ranked.sort_by(|(ia, sa), (ib, sb)| key(*sb).total_cmp(&key(*sa)).then(ia.cmp(ib)));
    let mut picked: Vec<usize> = ranked.into_iter().take(kappa).map(|(id, _)| id).collect();
    picked.sort_unstable();
    Ok(picked)
}
