use crate::error::{check_len, Error, Result};
use crate::tensor::dot;

/// Row-major `rows × inner` times `inner × cols`.
pub fn matmul(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for k in 0..inner {
            let aik = a[i * inner + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..cols {
                out[i * cols + j] += aik * b[k * cols + j];
            }
        }
    }
    out
}

/// Row-major `rows × cols` matrix times vector.
pub fn matvec(a: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    a.chunks_exact(cols)
        .take(rows)
        .map(|row| dot(row, x))
        .collect()
}

/// Solves `M y = rhs` for square `M` by Gaussian elimination with partial
/// pivoting.
pub fn solve(m: &[f64], rhs: &[f64], n: usize) -> Result<Vec<f64>> {
    check_len("solve matrix", n * n, m.len())?;
    check_len("solve rhs", n, rhs.len())?;
    let mut a = m.to_vec();
    let mut b = rhs.to_vec();
    let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return Err(Error::Singular("solve"));
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap();
        if a[pivot * n + col].abs() <= 1e-12 * scale {
            return Err(Error::Singular("solve"));
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            b.swap(col, pivot);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[row * n + j] -= f * a[col * n + j];
            }
            b[row] -= f * b[col];
        }
    }
    let mut y = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|j| a[row * n + j] * y[j]).sum();
        y[row] = (b[row] - s) / a[row * n + row];
    }
    Ok(y)
}
