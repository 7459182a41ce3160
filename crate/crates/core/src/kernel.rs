//! RBF kernel aggregation of feature maps into an SPD matrix, plus the
//! covariance pooling baseline it generalizes.
//!
//! Each channel of a `C×H×W` tensor is one sample `fᵢ ∈ ℝᴺ`; the aggregated
//! matrix is `Kᵢⱼ = exp(−‖fᵢ − fⱼ‖² / 2σ²)` with `σ` the mean pairwise
//! distance between feature maps. The Gram matrix of a strictly positive
//! definite kernel over distinct points is nonsingular for any `C` and `N`,
//! unlike a covariance matrix whose rank is capped at `min(C, N − 1)`.
//!
//! The backward pass treats `σ` as a constant of the forward pass. For
//! `L(K)` with upstream gradient `G = ∂L/∂K`,
//!
//! ```text
//! ∂L/∂fᵢ = Σⱼ (Gᵢⱼ + Gⱼᵢ) · Kᵢⱼ · (fⱼ − fᵢ) / σ²
//! ```
//!
//! which in matrix form is `S·M − diag(S·1)·M` with `S = (G + Gᵀ)∘K / σ²`.

use crate::error::{Error, Result};
use crate::linalg::jacobi_eigvals;
use crate::tensor::{FeatureTensor, Matrix};

/// Lower bound on the bandwidth, reached only when every feature map coincides.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// A symmetric matrix expected to be positive definite.
///
/// Construction symmetrizes, so `data[i][j] == data[j][i]` holds bit-for-bit.
/// Positive definiteness is checked by [`certify`], not on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    data: Matrix,
}

impl SpdMatrix {
    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::NonFinite("SPD matrix".into()));
        }
        Ok(SpdMatrix {
            data: m.symmetrize()?,
        })
    }

    pub fn dim(&self) -> usize {
        self.data.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    pub fn into_matrix(self) -> Matrix {
        self.data
    }
}

/// Forward cache for [`kernel_backward`].
#[derive(Debug, Clone)]
pub struct KernelTape {
    pub m: Matrix,
    pub k: SpdMatrix,
    pub sigma: f64,
}

/// Mean Euclidean distance over unordered pairs of rows of `m`, floored at [`SIGMA_FLOOR`].
pub fn compute_sigma(m: &Matrix) -> Result<f64> {
    let c = m.rows();
    if c < 2 {
        return Err(Error::contract(format!(
            "bandwidth needs at least two feature maps, got {c}"
        )));
    }
    let mut total = 0.0;
    for i in 0..c {
        for j in (i + 1)..c {
            let d2: f64 = m
                .row(i)
                .iter()
                .zip(m.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += d2.sqrt();
        }
    }
    let pairs = (c * (c - 1) / 2) as f64;
    Ok((total / pairs).max(SIGMA_FLOOR))
}

/// Kernel aggregation with the bandwidth computed from the input.
pub fn kernel_forward(x: &FeatureTensor) -> Result<(SpdMatrix, KernelTape)> {
    check_input(x)?;
    let m = x.to_matrix();
    let sigma = compute_sigma(&m)?;
    kernel_from_matrix(m, sigma)
}

/// Kernel aggregation with a caller-supplied bandwidth. Used to evaluate the
/// layer at a frozen `σ`, which is what the backward pass differentiates.
pub fn kernel_forward_with_sigma(x: &FeatureTensor, sigma: f64) -> Result<(SpdMatrix, KernelTape)> {
    check_input(x)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::contract(format!("bandwidth must be positive, got {sigma}")));
    }
    if x.channels() < 2 {
        return Err(Error::contract("kernel aggregation needs at least two channels"));
    }
    kernel_from_matrix(x.to_matrix(), sigma)
}

fn check_input(x: &FeatureTensor) -> Result<()> {
    if !x.is_finite() {
        return Err(Error::NonFinite("kernel aggregation input".into()));
    }
    Ok(())
}

fn kernel_from_matrix(m: Matrix, sigma: f64) -> Result<(SpdMatrix, KernelTape)> {
    let (c, n) = m.shape();
    // K1 = (M∘M)·1ᵀ holds ‖fᵢ‖² in every column of row i, K2 = K1ᵀ, K3 = M·Mᵀ.
    let ones = Matrix::filled(c, n, 1.0);
    let sq = m.hadamard(&m)?;
    let k1 = sq.matmul_t(&ones)?;
    let k2 = ones.matmul_t(&sq)?;
    let k3 = m.matmul_t(&m)?;
    let mut dist = k1.add(&k2)?.sub(&k3.scale(2.0))?;
    for i in 0..c {
        for j in 0..c {
            // Cancellation can leave tiny negatives; a map is at distance zero from itself.
            dist[(i, j)] = if i == j { 0.0 } else { dist[(i, j)].max(0.0) };
        }
    }
    let denom = 2.0 * sigma * sigma;
    let k = SpdMatrix::from_matrix(&dist.map(|d| (-d / denom).exp()))?;
    let tape = KernelTape {
        m,
        k: k.clone(),
        sigma,
    };
    Ok((k, tape))
}

/// Gradient of the loss with respect to the reshaped features `M` (`C×N`).
pub fn kernel_backward(tape: &KernelTape, grad_k: &Matrix) -> Result<Matrix> {
    let k = tape.k.matrix();
    if grad_k.shape() != k.shape() {
        return Err(Error::Shape {
            op: "kernel_backward",
            left: k.shape(),
            right: grad_k.shape(),
        });
    }
    let inv_s2 = 1.0 / (tape.sigma * tape.sigma);
    let s = grad_k.add(&grad_k.transpose())?.hadamard(k)?.scale(inv_s2);
    let mut out = s.matmul(&tape.m)?;
    let n = tape.m.cols();
    for i in 0..s.rows() {
        let row_sum: f64 = s.row(i).iter().sum();
        for p in 0..n {
            out[(i, p)] -= row_sum * tape.m[(i, p)];
        }
    }
    Ok(out)
}

/// Forward cache for [`covariance_backward`]: the row-centered features.
#[derive(Debug, Clone)]
pub struct CovarianceTape {
    pub centered: Matrix,
}

/// Sample covariance `(1/(N−1)) Σ (xₙ − μ)(xₙ − μ)ᵀ` of the `N` local features.
pub fn covariance_forward(x: &FeatureTensor) -> Result<Matrix> {
    covariance_with_tape(x).map(|(cov, _)| cov)
}

pub fn covariance_with_tape(x: &FeatureTensor) -> Result<(Matrix, CovarianceTape)> {
    if !x.is_finite() {
        return Err(Error::NonFinite("covariance input".into()));
    }
    let m = x.to_matrix();
    let (c, n) = m.shape();
    if n < 2 {
        return Err(Error::contract("covariance needs at least two local features"));
    }
    let mean: Vec<f64> = (0..c).map(|i| m.row(i).iter().sum::<f64>() / n as f64).collect();
    let centered = Matrix::from_fn(c, n, |i, p| m[(i, p)] - mean[i]);
    let mut cov = Matrix::zeros(c, c);
    for p in 0..n {
        for i in 0..c {
            let xi = centered[(i, p)];
            for j in 0..c {
                cov[(i, j)] += xi * centered[(j, p)];
            }
        }
    }
    let cov = cov.scale(1.0 / (n as f64 - 1.0)).symmetrize()?;
    Ok((cov, CovarianceTape { centered }))
}

/// `∂L/∂M = (G + Gᵀ)·M̄ / (N − 1)`; the rows of `M̄` are centered so the
/// centering projection drops out.
pub fn covariance_backward(tape: &CovarianceTape, grad_cov: &Matrix) -> Result<Matrix> {
    let (c, n) = tape.centered.shape();
    if grad_cov.shape() != (c, c) {
        return Err(Error::Shape {
            op: "covariance_backward",
            left: (c, c),
            right: grad_cov.shape(),
        });
    }
    grad_cov
        .add(&grad_cov.transpose())?
        .matmul(&tape.centered)
        .map(|g| g.scale(1.0 / (n as f64 - 1.0)))
}

/// Minimum eigenvalue of `k`; strictly positive for a certified SPD matrix.
pub fn certify(k: &SpdMatrix) -> f64 {
    jacobi_eigvals(k.matrix())[0]
}
