//! The bilinear SPD layer `Y = WᵀKW` with `W` constrained to the orthogonal
//! Stiefel manifold `{W ∈ ℝ^{C×C′} : WᵀW = I}`.
//!
//! A semi-orthogonal `W` has full column rank, so `Y` is SPD whenever `K` is.
//! Updates follow the Riemannian recipe: project the Euclidean gradient onto
//! the tangent space at `W`, step, and retract with the Q factor of a QR.

use crate::error::{Error, Result};
use crate::kernel::SpdMatrix;
use crate::linalg::{orthogonality_error, qr_reduced};
use crate::rng::SeededRng;
use crate::tensor::Matrix;

/// Loosest orthogonality error accepted for a [`StiefelPoint`].
pub const STIEFEL_TOL: f64 = 1e-8;

/// Orthogonality error guaranteed right after a retraction.
pub const RETRACTION_TOL: f64 = 1e-10;

/// Steps between forced re-retractions in [`StiefelSgd`].
pub const RETIGHTEN_EVERY: u64 = 100;

/// A `C×C′` matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelPoint {
    w: Matrix,
}

impl StiefelPoint {
    pub fn new(w: Matrix) -> Result<Self> {
        if w.rows() < w.cols() || w.cols() == 0 {
            return Err(Error::contract(format!(
                "Stiefel point needs rows >= cols >= 1, got {}x{}",
                w.rows(),
                w.cols()
            )));
        }
        let err = orthogonality_error(&w);
        if !(err < STIEFEL_TOL) {
            return Err(Error::contract(format!(
                "matrix is not semi-orthogonal: ||WᵀW - I||_F = {err:e}"
            )));
        }
        Ok(StiefelPoint { w })
    }

    /// Wraps `w` without checking orthogonality. Only finite-difference
    /// probes, which step off the manifold on purpose, need this.
    pub(crate) fn unchecked(w: Matrix) -> Self {
        StiefelPoint { w }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.w
    }

    pub fn input_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn orthogonality_error(&self) -> f64 {
        orthogonality_error(&self.w)
    }

    /// Re-projects onto the manifold to shed accumulated rounding drift.
    pub fn retighten(&self) -> Result<StiefelPoint> {
        Ok(StiefelPoint {
            w: qr_reduced(&self.w)?.q,
        })
    }
}

/// Q factor of a standard-normal `c×c′` draw.
pub fn stiefel_init(c: usize, c_prime: usize, rng: &mut SeededRng) -> Result<StiefelPoint> {
    if c_prime == 0 || c < c_prime {
        return Err(Error::contract(format!(
            "Stiefel init needs c >= c' >= 1, got c={c}, c'={c_prime}"
        )));
    }
    let draw = rng.normal_matrix(c, c_prime);
    Ok(StiefelPoint {
        w: qr_reduced(&draw)?.q,
    })
}

#[derive(Debug, Clone)]
pub struct TransformTape {
    pub k: SpdMatrix,
    pub w: StiefelPoint,
    pub y: SpdMatrix,
}

/// `Wᵀ·K·W` on raw matrices, no symmetrization.
pub fn congruence(k: &Matrix, w: &Matrix) -> Result<Matrix> {
    if k.rows() != w.rows() || !k.is_square() {
        return Err(Error::Shape {
            op: "congruence",
            left: k.shape(),
            right: w.shape(),
        });
    }
    w.t_matmul(&k.matmul(w)?)
}

pub fn transform_forward(k: &SpdMatrix, w: &StiefelPoint) -> Result<(SpdMatrix, TransformTape)> {
    let y = SpdMatrix::from_matrix(&congruence(k.matrix(), w.matrix())?)?;
    let tape = TransformTape {
        k: k.clone(),
        w: w.clone(),
        y: y.clone(),
    };
    Ok((y, tape))
}

fn check_grad_y(tape: &TransformTape, grad_y: &Matrix, op: &'static str) -> Result<()> {
    let c_prime = tape.w.output_dim();
    if grad_y.shape() != (c_prime, c_prime) {
        return Err(Error::Shape {
            op,
            left: (c_prime, c_prime),
            right: grad_y.shape(),
        });
    }
    Ok(())
}

/// `∂L/∂K = W·G·Wᵀ`.
pub fn transform_backward_input(tape: &TransformTape, grad_y: &Matrix) -> Result<Matrix> {
    check_grad_y(tape, grad_y, "transform_backward_input")?;
    let w = tape.w.matrix();
    w.matmul(grad_y)?.matmul_t(w)
}

/// Euclidean `∂L/∂W = Kᵀ·W·G + K·W·Gᵀ`, before projection onto the tangent space.
pub fn transform_backward_param(tape: &TransformTape, grad_y: &Matrix) -> Result<Matrix> {
    check_grad_y(tape, grad_y, "transform_backward_param")?;
    let k = tape.k.matrix();
    let w = tape.w.matrix();
    let first = k.t_matmul(w)?.matmul(grad_y)?;
    let second = k.matmul(w)?.matmul_t(grad_y)?;
    first.add(&second)
}

/// Manifold gradient `G − W·Gᵀ·W`; `Wᵀ∇` is skew-symmetric.
pub fn tangent_project(w: &StiefelPoint, euclid_grad: &Matrix) -> Result<Matrix> {
    let wm = w.matrix();
    if euclid_grad.shape() != wm.shape() {
        return Err(Error::Shape {
            op: "tangent_project",
            left: wm.shape(),
            right: euclid_grad.shape(),
        });
    }
    let normal = wm.matmul(&euclid_grad.t_matmul(wm)?)?;
    euclid_grad.sub(&normal)
}

/// `q(W − lr·∇)`: a descent step followed by QR retraction.
pub fn retract_step(w: &StiefelPoint, manifold_grad: &Matrix, lr: f64) -> Result<StiefelPoint> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::contract(format!("learning rate must be positive, got {lr}")));
    }
    let wm = w.matrix();
    if manifold_grad.shape() != wm.shape() {
        return Err(Error::Shape {
            op: "retract_step",
            left: wm.shape(),
            right: manifold_grad.shape(),
        });
    }
    let mut moved = wm.clone();
    moved.axpy(-lr, manifold_grad)?;
    Ok(StiefelPoint {
        w: qr_reduced(&moved)?.q,
    })
}

/// Riemannian SGD on one Stiefel parameter: project, step, retract, and
/// re-retract every [`RETIGHTEN_EVERY`] steps.
#[derive(Debug, Clone)]
pub struct StiefelSgd {
    steps: u64,
}

impl Default for StiefelSgd {
    fn default() -> Self {
        Self::new()
    }
}

impl StiefelSgd {
    pub fn new() -> Self {
        StiefelSgd { steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from a Euclidean gradient. A zero learning rate
    /// leaves `w` untouched, including the periodic re-retraction.
    pub fn step(&mut self, w: &StiefelPoint, euclid_grad: &Matrix, lr: f64) -> Result<StiefelPoint> {
        self.steps += 1;
        if lr == 0.0 {
            return Ok(w.clone());
        }
        let grad = tangent_project(w, euclid_grad)?;
        let mut next = retract_step(w, &grad, lr)?;
        if self.steps % RETIGHTEN_EVERY == 0 {
            next = next.retighten()?;
        }
        Ok(next)
    }
}

/// Elementwise `max(0, ·)` applied after the transform, with its 0/1 mask.
#[derive(Debug, Clone)]
pub struct ReluTape {
    mask: Matrix,
}

pub fn spd_relu(y: &SpdMatrix) -> (Matrix, ReluTape) {
    let y = y.matrix();
    let mask = y.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let z = y.map(|v| v.max(0.0));
    (z, ReluTape { mask })
}

pub fn spd_relu_backward(tape: &ReluTape, grad_z: &Matrix) -> Result<Matrix> {
    grad_z.hadamard(&tape.mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{min_eigenvalue, sym_eigvals};

    fn random_spd(rng: &mut SeededRng, c: usize) -> SpdMatrix {
        let a = rng.normal_matrix(c, c);
        let m = a.matmul_t(&a).unwrap().add(&Matrix::identity(c).scale(0.1)).unwrap();
        SpdMatrix::from_matrix(&m).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(1.0)
    }

    #[test]
    fn init_one_dimensional() {
        let mut rng = SeededRng::new(0);
        let w = stiefel_init(1, 1, &mut rng).unwrap();
        assert_eq!(w.matrix(), &Matrix::from_rows(&[[1.0]]));
    }

    #[test]
    fn init_is_semi_orthogonal_and_deterministic() {
        let w1 = stiefel_init(8, 3, &mut SeededRng::new(5)).unwrap();
        let w2 = stiefel_init(8, 3, &mut SeededRng::new(5)).unwrap();
        assert!(w1.orthogonality_error() < 1e-10);
        assert_eq!(w1, w2);
        assert!(stiefel_init(2, 3, &mut SeededRng::new(5)).is_err());
    }

    #[test]
    fn new_rejects_non_orthogonal() {
        assert!(StiefelPoint::new(Matrix::from_rows(&[[1.0, 1.0], [0.0, 1.0]])).is_err());
        assert!(StiefelPoint::new(Matrix::identity(3)).is_ok());
    }

    #[test]
    fn identity_transform_is_noop() {
        let mut rng = SeededRng::new(1);
        let k = random_spd(&mut rng, 5);
        let w = StiefelPoint::new(Matrix::identity(5)).unwrap();
        let (y, _) = transform_forward(&k, &w).unwrap();
        assert_eq!(y, k);
    }

    #[test]
    fn identity_input_gives_identity() {
        let mut rng = SeededRng::new(2);
        let w = stiefel_init(6, 4, &mut rng).unwrap();
        let k = SpdMatrix::from_matrix(&Matrix::identity(6)).unwrap();
        let (y, _) = transform_forward(&k, &w).unwrap();
        assert!(y.matrix().max_abs_diff(&Matrix::identity(4)) < 1e-12);
    }

    #[test]
    fn output_is_positive_definite() {
        let mut rng = SeededRng::new(3);
        for _ in 0..20 {
            let k = random_spd(&mut rng, 10);
            let w = stiefel_init(10, 4, &mut rng).unwrap();
            let (y, _) = transform_forward(&k, &w).unwrap();
            assert!(min_eigenvalue(y.matrix()).unwrap() > 0.0);
        }
    }

    #[test]
    fn forward_dimension_mismatch() {
        let mut rng = SeededRng::new(4);
        let k = random_spd(&mut rng, 5);
        let w = stiefel_init(6, 2, &mut rng).unwrap();
        assert!(matches!(transform_forward(&k, &w), Err(Error::Shape { .. })));
    }

    #[test]
    fn backward_trivial_cases() {
        let mut rng = SeededRng::new(6);
        let k = random_spd(&mut rng, 4);
        let (_, tape) = transform_forward(&k, &StiefelPoint::new(Matrix::identity(4)).unwrap()).unwrap();
        let g = rng.normal_matrix(4, 4);
        assert!(transform_backward_input(&tape, &g).unwrap().max_abs_diff(&g) < 1e-15);
        let zero = Matrix::zeros(4, 4);
        assert_eq!(transform_backward_input(&tape, &zero).unwrap(), zero);
        assert_eq!(transform_backward_param(&tape, &zero).unwrap(), zero);
        assert!(transform_backward_input(&tape, &Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn param_gradient_symmetric_collapse() {
        let mut rng = SeededRng::new(7);
        let k = random_spd(&mut rng, 6);
        let w = stiefel_init(6, 3, &mut rng).unwrap();
        let (_, tape) = transform_forward(&k, &w).unwrap();
        let g = rng.normal_matrix(3, 3).symmetrize().unwrap();
        let grad = transform_backward_param(&tape, &g).unwrap();
        let expected = k.matrix().matmul(w.matrix()).unwrap().matmul(&g).unwrap().scale(2.0);
        assert!(grad.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(8);
        let k = random_spd(&mut rng, 5);
        let w = stiefel_init(5, 3, &mut rng).unwrap();
        let g = rng.normal_matrix(3, 3);
        let (_, tape) = transform_forward(&k, &w).unwrap();
        let analytic = transform_backward_input(&tape, &g).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let eval = |d: f64| {
                    let mut kk = k.matrix().clone();
                    kk[(i, j)] += d;
                    congruence(&kk, w.matrix()).unwrap().dot(&g).unwrap()
                };
                let fd = (eval(1e-5) - eval(-1e-5)) / 2e-5;
                assert!(rel_err(analytic[(i, j)], fd) < 1e-6);
            }
        }
    }

    #[test]
    fn param_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(9);
        let k = random_spd(&mut rng, 5);
        let w = stiefel_init(5, 3, &mut rng).unwrap();
        let g = rng.normal_matrix(3, 3);
        let (_, tape) = transform_forward(&k, &w).unwrap();
        let analytic = transform_backward_param(&tape, &g).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let eval = |d: f64| {
                    let mut ww = w.matrix().clone();
                    ww[(i, j)] += d;
                    congruence(k.matrix(), &ww).unwrap().dot(&g).unwrap()
                };
                let fd = (eval(1e-5) - eval(-1e-5)) / 2e-5;
                assert!(rel_err(analytic[(i, j)], fd) < 1e-6);
            }
        }
    }

    #[test]
    fn projection_at_identity_is_skew_part() {
        let mut rng = SeededRng::new(10);
        let w = StiefelPoint::new(Matrix::identity(4)).unwrap();
        let g = rng.normal_matrix(4, 4);
        let p = tangent_project(&w, &g).unwrap();
        assert!(p.max_abs_diff(&g.sub(&g.transpose()).unwrap()) < 1e-15);
    }

    #[test]
    fn projection_annihilates_normal_direction() {
        let w = stiefel_init(7, 3, &mut SeededRng::new(11)).unwrap();
        let p = tangent_project(&w, w.matrix()).unwrap();
        assert!(p.frobenius_norm() < 1e-12);
    }

    #[test]
    fn projection_is_tangent() {
        let mut rng = SeededRng::new(12);
        for _ in 0..20 {
            let w = stiefel_init(9, 4, &mut rng).unwrap();
            let g = rng.normal_matrix(9, 4);
            let p = tangent_project(&w, &g).unwrap();
            let wp = w.matrix().t_matmul(&p).unwrap();
            assert!(wp.add(&wp.transpose()).unwrap().frobenius_norm() < 1e-10);
        }
    }

    #[test]
    fn zero_step_is_fixed_point() {
        let w = stiefel_init(6, 3, &mut SeededRng::new(13)).unwrap();
        let next = retract_step(&w, &Matrix::zeros(6, 3), 0.1).unwrap();
        assert!(next.matrix().max_abs_diff(w.matrix()) < 1e-12);
        assert!(retract_step(&w, &Matrix::zeros(6, 3), 0.0).is_err());
    }

    #[test]
    fn rayleigh_descent_is_monotone() {
        let mut rng = SeededRng::new(14);
        let a = random_spd(&mut rng, 8);
        let mut w = stiefel_init(8, 3, &mut rng).unwrap();
        let objective = |w: &StiefelPoint| congruence(a.matrix(), w.matrix()).unwrap().trace();
        let mut prev = objective(&w);
        for _ in 0..100 {
            let euclid = a.matrix().matmul(w.matrix()).unwrap().scale(2.0);
            let grad = tangent_project(&w, &euclid).unwrap();
            w = retract_step(&w, &grad, 1e-3).unwrap();
            assert!(w.orthogonality_error() < 1e-10);
            let cur = objective(&w);
            assert!(cur <= prev + 1e-12, "objective rose from {prev} to {cur}");
            prev = cur;
        }
    }

    #[test]
    fn relu_cases() {
        let y = SpdMatrix::from_matrix(&Matrix::from_rows(&[[2.0, -1.0], [-1.0, 2.0]])).unwrap();
        let (z, tape) = spd_relu(&y);
        assert_eq!(z, Matrix::from_rows(&[[2.0, 0.0], [0.0, 2.0]]));
        assert_eq!(sym_eigvals(&z).unwrap(), vec![2.0, 2.0]);
        let g = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(
            spd_relu_backward(&tape, &g).unwrap(),
            Matrix::from_rows(&[[1.0, 0.0], [0.0, 4.0]])
        );

        let pos = SpdMatrix::from_matrix(&Matrix::from_rows(&[[2.0, 0.5], [0.5, 1.0]])).unwrap();
        assert_eq!(&spd_relu(&pos).0, pos.matrix());
    }

    #[test]
    fn relu_mask_zero_at_zero() {
        let y = SpdMatrix::from_matrix(&Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]])).unwrap();
        let (_, tape) = spd_relu(&y);
        let g = spd_relu_backward(&tape, &Matrix::filled(2, 2, 1.0)).unwrap();
        assert_eq!(g, Matrix::identity(2));
    }
}
