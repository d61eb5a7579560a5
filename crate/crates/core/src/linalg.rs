//! Small dense solvers: Cholesky for SPD systems and partial-pivot LU for the
//! Newton iterations of the stiff integrator. Problem sizes in this crate stay
//! in the tens to low hundreds, so unblocked kernels are plenty.

use crate::error::{DueError, Result};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix
/// (row-major n×n).
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &[f64], n: usize) -> Result<Self> {
        assert_eq!(a.len(), n * n);
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if s <= 0.0 {
                        return Err(DueError::Numeric(format!(
                            "Cholesky pivot {} non-positive ({})",
                            i, s
                        )));
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(Cholesky { n, l })
    }

    /// Solve A x = b in place.
    pub fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        assert_eq!(b.len(), n);
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[i * n + k] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
    }
}

/// Condition number estimate of an SPD matrix from its eigenvalue extremes,
/// obtained by a few power/inverse-power iterations. Good to the accuracy the
/// conditioning checks here need.
pub fn spd_condition(a: &[f64], n: usize) -> Result<f64> {
    let chol = Cholesky::factor(a, n)?;
    let matvec = |x: &[f64], y: &mut [f64]| {
        for i in 0..n {
            y[i] = (0..n).map(|j| a[i * n + j] * x[j]).sum();
        }
    };
    let mut x: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64) * 0.1).collect();
    let mut y = vec![0.0; n];
    let mut lam_max = 0.0;
    for _ in 0..200 {
        matvec(&x, &mut y);
        lam_max = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi = yi / lam_max;
        }
    }
    let mut x: Vec<f64> = (0..n).map(|i| 1.0 - (i as f64) * 0.05).collect();
    let mut lam_min = 0.0;
    for _ in 0..200 {
        let mut b = x.clone();
        chol.solve(&mut b);
        let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        lam_min = 1.0 / norm;
        for (xi, bi) in x.iter_mut().zip(&b) {
            *xi = bi / norm;
        }
    }
    Ok(lam_max / lam_min)
}

/// Solve A x = b by LU with partial pivoting; A is destroyed.
pub fn lu_solve(a: &mut [f64], b: &mut [f64], n: usize) -> Result<()> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n);
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let mut pivot = col;
        let mut best = a[perm[col] * n + col].abs();
        for r in col + 1..n {
            let v = a[perm[r] * n + col].abs();
            if v > best {
                best = v;
                pivot = r;
            }
        }
        if best == 0.0 {
            return Err(DueError::Numeric("singular matrix in LU solve".into()));
        }
        perm.swap(col, pivot);
        let p = perm[col];
        for r in col + 1..n {
            let q = perm[r];
            let f = a[q * n + col] / a[p * n + col];
            a[q * n + col] = f;
            for c in col + 1..n {
                a[q * n + c] -= f * a[p * n + c];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[perm[i]];
        for k in 0..i {
            s -= a[perm[i] * n + k] * y[k];
        }
        y[i] = s;
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= a[perm[i] * n + k] * b[k];
        }
        b[i] = s / a[perm[i] * n + i];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves_spd_system() {
        // A = Mᵀ M + I for a fixed M.
        let m = [1.0, 2.0, 0.5, -1.0, 0.3, 2.0, 0.0, 1.0, 1.0];
        let n = 3;
        let mut a = vec![0.0; 9];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..n).map(|k| m[k * n + i] * m[k * n + j]).sum::<f64>()
                    + if i == j { 1.0 } else { 0.0 };
            }
        }
        let x_true = [0.5, -2.0, 3.0];
        let mut b = vec![0.0; 3];
        for i in 0..n {
            b[i] = (0..n).map(|j| a[i * n + j] * x_true[j]).sum();
        }
        let chol = Cholesky::factor(&a, n).unwrap();
        chol.solve(&mut b);
        for (got, want) in b.iter().zip(&x_true) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = vec![1.0, 2.0, 2.0, 1.0]; // eigenvalues 3, -1
        assert!(Cholesky::factor(&a, 2).is_err());
    }

    #[test]
    fn lu_solves_general_system() {
        let mut a = vec![0.0, 2.0, 1.0, 1.0, -1.0, 0.5, 3.0, 0.1, -2.0];
        let x_true = [1.0, -0.5, 2.0];
        let mut b = vec![0.0; 3];
        for i in 0..3 {
            b[i] = (0..3).map(|j| a[i * 3 + j] * x_true[j]).sum();
        }
        lu_solve(&mut a, &mut b, 3).unwrap();
        for (got, want) in b.iter().zip(&x_true) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn spd_condition_of_identity_is_one() {
        let a = vec![1.0, 0.0, 0.0, 1.0];
        let c = spd_condition(&a, 2).unwrap();
        assert!((c - 1.0).abs() < 1e-6);
    }
}
