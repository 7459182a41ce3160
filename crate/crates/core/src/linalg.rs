//! Reduced QR (the Stiefel retraction) and a Jacobi eigenvalue solver used to
//! certify positive definiteness in tests and in the `certify` command.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Relative pivot threshold below which QR reports rank deficiency.
pub const QR_RANK_TOL: f64 = 1e-12;

/// Tolerance on `|aᵢⱼ − aⱼᵢ|` accepted by [`sym_eigvals`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Reduced QR factors with the positive-diagonal convention on `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct QrFactors {
    pub q: Matrix,
    pub r: Matrix,
}

/// Householder reduced QR of an `n×p` matrix (`n ≥ p`), signs fixed so that
/// `diag(r) > 0`. Under that convention the factorization is unique and a
/// semi-orthogonal input maps to itself.
pub fn qr_reduced(a: &Matrix) -> Result<QrFactors> {
    let (n, p) = a.shape();
    if n < p {
        return Err(Error::contract(format!(
            "reduced QR needs rows >= cols, got {n}x{p}"
        )));
    }
    if p == 0 {
        return Err(Error::contract("reduced QR of a matrix with no columns"));
    }
    let threshold = QR_RANK_TOL * a.frobenius_norm();
    let mut work = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(p);

    for k in 0..p {
        let norm = (k..n).map(|i| work[(i, k)] * work[(i, k)]).sum::<f64>().sqrt();
        if norm <= threshold {
            return Err(Error::Singular {
                column: k,
                pivot: norm,
                threshold,
            });
        }
        let x0 = work[(k, k)];
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..n).map(|i| work[(i, k)]).collect();
        v[0] -= alpha;
        let v_norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if v_norm > 0.0 {
            for x in v.iter_mut() {
                *x /= v_norm;
            }
            apply_reflector(&mut work, &v, k, k);
        }
        reflectors.push(v);
    }

    // Accumulate Q = H₀ H₁ … H_{p−1} applied to the first p columns of Iₙ.
    let mut q = Matrix::from_fn(n, p, |i, j| if i == j { 1.0 } else { 0.0 });
    for k in (0..p).rev() {
        apply_reflector(&mut q, &reflectors[k], k, 0);
    }

    let mut r = Matrix::from_fn(p, p, |i, j| if j >= i { work[(i, j)] } else { 0.0 });
    for j in 0..p {
        let d = r[(j, j)];
        if d.abs() <= threshold {
            return Err(Error::Singular {
                column: j,
                pivot: d.abs(),
                threshold,
            });
        }
        if d < 0.0 {
            for c in j..p {
                r[(j, c)] = -r[(j, c)];
            }
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    Ok(QrFactors { q, r })
}

/// `m[offset.., col_start..] -= 2 v (vᵀ m[offset.., col_start..])` for unit `v`.
fn apply_reflector(m: &mut Matrix, v: &[f64], offset: usize, col_start: usize) {
    let cols = m.cols();
    for c in col_start..cols {
        let mut s = 0.0;
        for (t, vi) in v.iter().enumerate() {
            s += vi * m[(offset + t, c)];
        }
        if s == 0.0 {
            continue;
        }
        let s2 = 2.0 * s;
        for (t, vi) in v.iter().enumerate() {
            m[(offset + t, c)] -= s2 * vi;
        }
    }
}

/// Eigenvalues of a symmetric matrix in ascending order (cyclic Jacobi).
pub fn sym_eigvals(a: &Matrix) -> Result<Vec<f64>> {
    if !a.is_square() {
        return Err(Error::contract(format!(
            "eigenvalues need a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let asym = a.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::contract(format!(
            "eigenvalue solver needs a symmetric matrix, max |a_ij - a_ji| = {asym:e}"
        )));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("eigenvalue input".into()));
    }
    Ok(jacobi_eigvals(a))
}

/// Minimum eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &Matrix) -> Result<f64> {
    Ok(sym_eigvals(a)?.first().copied().unwrap_or(f64::NAN))
}

pub(crate) fn jacobi_eigvals(a: &Matrix) -> Vec<f64> {
    let n = a.rows();
    let mut m = a.symmetrize().expect("square");
    let scale = m.frobenius_norm();
    if scale == 0.0 {
        return vec![0.0; n];
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut m, p, q, c, s);
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    eig.sort_by(|x, y| x.total_cmp(y));
    eig
}

/// Applies `Jᵀ M J` for the Givens rotation in the `(p, q)` plane.
fn rotate(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = m.rows();
    for k in 0..n {
        let mkp = m[(k, p)];
        let mkq = m[(k, q)];
        m[(k, p)] = c * mkp - s * mkq;
        m[(k, q)] = s * mkp + c * mkq;
    }
    for k in 0..n {
        let mpk = m[(p, k)];
        let mqk = m[(q, k)];
        m[(p, k)] = c * mpk - s * mqk;
        m[(q, k)] = s * mpk + c * mqk;
    }
}

/// `‖AᵀA − I‖_F`, the distance of `A` from the Stiefel manifold.
pub fn orthogonality_error(a: &Matrix) -> f64 {
    let gram = a.t_matmul(a).expect("conforming");
    gram.sub(&Matrix::identity(a.cols()))
        .expect("square")
        .frobenius_norm()
}
