//! Small dense linear algebra: partial-pivot Gaussian elimination and a
//! cyclic Jacobi eigensolver for symmetric matrices. Matrices are row-major
//! `Vec<f64>` of side `n`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("singular system: pivot {pivot:e} in column {column}")]
    Singular { column: usize, pivot: f64 },
    #[error("jacobi eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },
    #[error("matrix is not symmetric")]
    NotSymmetric,
}

const SINGULAR_PIVOT: f64 = 1e-300;

/// Solves `A x = b` for one or more right-hand sides stored column by column
/// in `rhs` (each of length `n`).
pub fn solve(n: usize, a: &[f64], rhs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, LinalgError> {
    assert_eq!(a.len(), n * n);
    let mut lu = a.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    for col in 0..n {
        let (pivot_row, pivot) = (col..n)
            .map(|r| (r, lu[r * n + col]))
            .max_by(|x, y| x.1.abs().total_cmp(&y.1.abs()))
            .expect("nonempty range");
        if pivot.abs() <= SINGULAR_PIVOT.max(scale * 1e-14) {
            return Err(LinalgError::Singular { column: col, pivot });
        }
        if pivot_row != col {
            for k in 0..n {
                lu.swap(col * n + k, pivot_row * n + k);
            }
            perm.swap(col, pivot_row);
        }
        for r in (col + 1)..n {
            let factor = lu[r * n + col] / pivot;
            lu[r * n + col] = factor;
            if factor != 0.0 {
                for k in (col + 1)..n {
                    lu[r * n + k] -= factor * lu[col * n + k];
                }
            }
        }
    }
    Ok(rhs
        .iter()
        .map(|b| {
            let mut x: Vec<f64> = perm.iter().map(|&p| b[p]).collect();
            for r in 0..n {
                let s: f64 = (0..r).map(|k| lu[r * n + k] * x[k]).sum();
                x[r] -= s;
            }
            for r in (0..n).rev() {
                let s: f64 = ((r + 1)..n).map(|k| lu[r * n + k] * x[k]).sum();
                x[r] = (x[r] - s) / lu[r * n + r];
            }
            x
        })
        .collect())
}

/// `‖A x − b‖∞ / (‖A‖∞ ‖x‖∞ + ‖b‖∞)`.
pub fn relative_residual(n: usize, a: &[f64], x: &[f64], b: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    let mut a_norm = 0.0f64;
    for r in 0..n {
        let row = &a[r * n..(r + 1) * n];
        let ax: f64 = row.iter().zip(x).map(|(p, q)| p * q).sum();
        worst = worst.max((ax - b[r]).abs());
        a_norm = a_norm.max(row.iter().map(|v| v.abs()).sum());
    }
    let x_norm = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let b_norm = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let denom = a_norm * x_norm + b_norm;
    if denom == 0.0 {
        worst
    } else {
        worst / denom
    }
}

pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigenvalues of a symmetric matrix, sorted descending.
///
/// Cyclic Jacobi rotations until the off-diagonal Frobenius norm falls below
/// a tenth of `tol` (scaled up for matrices of norm above one). The
/// off-diagonal norm bounds the eigenvalue error, so results are accurate to
/// `tol`.
pub fn symmetric_eigenvalues(n: usize, a: &[f64], tol: f64) -> Result<Vec<f64>, LinalgError> {
    assert_eq!(a.len(), n * n);
    for i in 0..n {
        for j in 0..i {
            let (x, y) = (a[i * n + j], a[j * n + i]);
            if (x - y).abs() > 1e-12 * (1.0 + x.abs().max(y.abs())) {
                return Err(LinalgError::NotSymmetric);
            }
        }
    }
    let mut m = a.to_vec();
    let total: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let off_norm = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    let mut sweeps = 0;
    loop {
        let off = off_norm(&m);
        if off <= 0.1 * tol * total.max(1.0) || off == 0.0 {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(LinalgError::NoConvergence {
                sweeps,
                residual: off,
            });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
            }
        }
        sweeps += 1;
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    Ok(eig)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_system() {
        // needs a row swap at the first pivot
        let a = [0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 2.0, 0.0, 3.0];
        let b = vec![5.0, 3.0, 13.0];
        let x = solve(3, &a, std::slice::from_ref(&b)).unwrap().remove(0);
        for (xi, ei) in x.iter().zip([2.0, 1.0, 3.0]) {
            assert!((xi - ei).abs() < 1e-12);
        }
        assert!(relative_residual(3, &a, &x, &b) < 1e-15);
    }

    #[test]
    fn detects_singular() {
        let a = [1.0, 2.0, 2.0, 4.0];
        assert!(matches!(
            solve(2, &a, &[vec![1.0, 2.0]]),
            Err(LinalgError::Singular { .. })
        ));
    }

    #[test]
    fn eigenvalues_of_known_matrix() {
        // [[2,1],[1,2]] -> {3, 1}
        let e = symmetric_eigenvalues(2, &[2.0, 1.0, 1.0, 2.0], 1e-12).unwrap();
        assert!((e[0] - 3.0).abs() < 1e-12 && (e[1] - 1.0).abs() < 1e-12);
        let diag = symmetric_eigenvalues(3, &[1.0, 0.0, 0.0, 0.0, -2.0, 0.0, 0.0, 0.0, 5.0], 1e-12)
            .unwrap();
        assert_eq!(diag, vec![5.0, 1.0, -2.0]);
    }

    #[test]
    fn rejects_asymmetric() {
        assert_eq!(
            symmetric_eigenvalues(2, &[1.0, 2.0, 0.0, 1.0], 1e-10),
            Err(LinalgError::NotSymmetric)
        );
    }

    #[test]
    fn trace_is_preserved() {
        let n = 6;
        let a: Vec<f64> = (0..n * n)
            .map(|k| {
                let (i, j) = (k / n, k % n);
                ((i * j) as f64).sin() + ((i + j) as f64).cos()
            })
            .collect();
        let e = symmetric_eigenvalues(n, &a, 1e-12).unwrap();
        let trace: f64 = (0..n).map(|i| a[i * n + i]).sum();
        assert!((e.iter().sum::<f64>() - trace).abs() < 1e-10);
    }
}
