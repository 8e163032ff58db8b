//! Small dense solves used by the loss framework.

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

/// Solves `A x = b` for a row-major `n×n` matrix by Gaussian elimination with
/// partial pivoting.
///
/// Fails with [`Error::Numerical`] when a pivot falls below `n·eps·‖A‖∞`; the
/// message carries a cheap condition estimate `‖A‖∞ / min|pivot|`.
pub fn solve<S: Scalar>(a: &[S], b: &[S]) -> Result<Vec<S>> {
    let n = b.len();
    if a.len() != n * n {
        return dim_err(format!("solve: matrix has {} entries for n={n}", a.len()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    let norm = (0..n)
        .map(|i| m[i * n..(i + 1) * n].iter().map(|v| v.abs()).sum::<S>())
        .fold(S::zero(), S::max);
    let tol = S::of(n as f64) * S::epsilon() * norm.max(S::min_positive_value());
    let mut min_pivot = S::infinity();

    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if m[r * n + col].abs() > m[piv * n + col].abs() {
                piv = r;
            }
        }
        let p = m[piv * n + col];
        min_pivot = min_pivot.min(p.abs());
        if !(p.abs() > tol) {
            let cond = if min_pivot > S::zero() {
                norm / min_pivot
            } else {
                S::infinity()
            };
            return Err(Error::Numerical(format!(
                "singular system (pivot {p} in column {col}, condition estimate {cond})"
            )));
        }
        if piv != col {
            for c in 0..n {
                m.swap(col * n + c, piv * n + c);
            }
            x.swap(col, piv);
        }
        for r in col + 1..n {
            let f = m[r * n + col] / p;
            if f == S::zero() {
                continue;
            }
            for c in col..n {
                m[r * n + c] = m[r * n + c] - f * m[col * n + c];
            }
            x[r] = x[r] - f * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut s = x[col];
        for c in col + 1..n {
            s = s - m[col * n + c] * x[c];
        }
        x[col] = s / m[col * n + col];
    }
    Ok(x)
}

/// `out = Aᵀ·v` for a row-major `n×n` matrix.
pub fn mat_t_vec<S: Scalar>(a: &[S], v: &[S]) -> Vec<S> {
    let n = v.len();
    (0..n)
        .map(|j| (0..n).map(|i| a[i * n + j] * v[i]).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_pivoted_system() {
        // first pivot is zero without row exchange
        let a = [0.0f64, 1.0, 2.0, 1.0];
        let x = solve(&a, &[3.0, 4.0]).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-15 && (x[1] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn polyloss_two_by_two() {
        let a = [1.25f64, -0.25, -0.25, 1.25];
        let x = solve(&a, &[0.5, 0.5]).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-15 && (x[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn singular_reports_condition() {
        let err = solve(&[1.0, 2.0, 2.0, 4.0], &[1.0, 1.0]).unwrap_err();
        assert!(err.to_string().contains("condition estimate"), "{err}");
    }

    #[test]
    fn rejects_bad_shape() {
        assert!(solve(&[1.0, 2.0, 3.0], &[1.0, 1.0]).is_err());
    }
}
