use proptest::prelude::*;
use spdagg::head::{head_dim, vectorize, vectorize_backward, HeadVector};
use spdagg::linalg::{orthogonality_error, qr_reduced};
use spdagg::Matrix;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
}

fn square() -> impl Strategy<Value = Matrix> {
    (1usize..9).prop_flat_map(|c| matrix(c, c))
}

proptest! {
    #[test]
    fn symmetrize_is_exactly_symmetric(m in square()) {
        let s = m.symmetrize().unwrap();
        prop_assert_eq!(s.clone(), s.transpose());
    }

    #[test]
    fn vectorize_preserves_frobenius_norm(m in square()) {
        let y = m.symmetrize().unwrap();
        let v = vectorize(&y).unwrap();
        prop_assert_eq!(v.len(), head_dim(y.rows()));
        prop_assert!((v.norm() - y.frobenius_norm()).abs() <= 1e-12 * y.frobenius_norm().max(1.0));
    }

    #[test]
    fn vectorize_backward_is_the_adjoint(m in square()) {
        // ⟨vectorize_backward(v), Y⟩_F = ⟨v, vectorize(Y)⟩ with v = vectorize(Y).
        let y = m.symmetrize().unwrap();
        let v = vectorize(&y).unwrap();
        let g = vectorize_backward(&v, y.rows()).unwrap();
        let lhs: f64 = v.0.iter().map(|a| a * a).sum();
        prop_assert!((g.dot(&y).unwrap() - lhs).abs() <= 1e-9 * lhs.max(1.0));
    }

    #[test]
    fn qr_factors_are_orthonormal_and_reconstruct(
        (r, c) in (1usize..8).prop_flat_map(|c| (c..10, Just(c))),
        seed in any::<u64>(),
    ) {
        let mut rng = spdagg::SeededRng::new(seed);
        let a = rng.normal_matrix(r, c);
        let f = qr_reduced(&a).unwrap();
        prop_assert!(orthogonality_error(&f.q) < 1e-12);
        prop_assert!(f.q.matmul(&f.r).unwrap().max_abs_diff(&a) < 1e-12);
        for i in 0..c {
            prop_assert!(f.r[(i, i)] > 0.0);
        }
    }
}

#[test]
fn head_vector_norm_of_zero_is_zero() {
    assert_eq!(HeadVector(vec![0.0; 3]).norm(), 0.0);
}
