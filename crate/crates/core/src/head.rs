//! Upper-triangle vectorization, power and ℓ2 normalization, and the dense
//! softmax classifier.

use std::f64::consts::SQRT_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SYMMETRY_TOL;
use crate::rng::SeededRng;
use crate::tensor::Matrix;

/// Clamp on `|v|` inside the power-normalization derivative `1/(2√|v|)`.
pub const POWER_EPS: f64 = 1e-8;

/// Norm below which ℓ2 normalization passes its input through.
pub const L2_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadVector(pub Vec<f64>);

impl HeadVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Length of the vectorized upper triangle of a `c×c` matrix.
pub fn head_dim(c: usize) -> usize {
    c * (c + 1) / 2
}

/// Row-major upper triangle with off-diagonal entries scaled by √2, so that
/// `‖V‖₂ = ‖Y‖_F`.
pub fn vectorize(y: &Matrix) -> Result<HeadVector> {
    let asym = y.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::contract(format!(
            "vectorize needs a symmetric matrix, max |y_ij - y_ji| = {asym:e}"
        )));
    }
    let c = y.rows();
    let mut v = Vec::with_capacity(head_dim(c));
    for i in 0..c {
        v.push(y[(i, i)]);
        for j in (i + 1)..c {
            v.push(SQRT_2 * y[(i, j)]);
        }
    }
    Ok(HeadVector(v))
}

/// Adjoint of [`vectorize`] on symmetric matrices: diagonal slots take the
/// gradient entry, each off-diagonal slot takes `entry/√2`.
pub fn vectorize_backward(grad_v: &HeadVector, c_prime: usize) -> Result<Matrix> {
    if grad_v.len() != head_dim(c_prime) {
        return Err(Error::contract(format!(
            "gradient length {} does not match {c_prime}x{c_prime} upper triangle ({})",
            grad_v.len(),
            head_dim(c_prime)
        )));
    }
    let mut g = Matrix::zeros(c_prime, c_prime);
    let mut it = grad_v.0.iter();
    for i in 0..c_prime {
        g[(i, i)] = *it.next().expect("length checked");
        for j in (i + 1)..c_prime {
            let half = it.next().expect("length checked") / SQRT_2;
            g[(i, j)] = half;
            g[(j, i)] = half;
        }
    }
    Ok(g)
}

#[derive(Debug, Clone)]
pub struct PowerTape {
    input: Vec<f64>,
}

/// Signed square root `sign(v)·√|v|`.
pub fn power_normalize(v: &HeadVector) -> (HeadVector, PowerTape) {
    let out = v.0.iter().map(|x| x.signum() * x.abs().sqrt()).map(|x| if x == 0.0 { 0.0 } else { x });
    (
        HeadVector(out.collect()),
        PowerTape { input: v.0.clone() },
    )
}

pub fn power_backward(tape: &PowerTape, grad: &HeadVector) -> Result<HeadVector> {
    if grad.len() != tape.input.len() {
        return Err(Error::contract("power normalization gradient length mismatch"));
    }
    Ok(HeadVector(
        tape.input
            .iter()
            .zip(&grad.0)
            .map(|(x, g)| g / (2.0 * x.abs().max(POWER_EPS).sqrt()))
            .collect(),
    ))
}

#[derive(Debug, Clone)]
pub struct L2Tape {
    unit: Vec<f64>,
    norm: f64,
}

pub fn l2_normalize(v: &HeadVector) -> (HeadVector, L2Tape) {
    let norm = v.norm();
    if norm < L2_EPS {
        return (v.clone(), L2Tape { unit: Vec::new(), norm });
    }
    let unit: Vec<f64> = v.0.iter().map(|x| x / norm).collect();
    (HeadVector(unit.clone()), L2Tape { unit, norm })
}

/// `(I − v̂v̂ᵀ)·g / ‖v‖`, or `g` itself when the input was (near) zero.
pub fn l2_backward(tape: &L2Tape, grad: &HeadVector) -> Result<HeadVector> {
    if tape.norm < L2_EPS {
        return Ok(grad.clone());
    }
    if grad.len() != tape.unit.len() {
        return Err(Error::contract("l2 normalization gradient length mismatch"));
    }
    let along: f64 = tape.unit.iter().zip(&grad.0).map(|(u, g)| u * g).sum();
    Ok(HeadVector(
        tape.unit
            .iter()
            .zip(&grad.0)
            .map(|(u, g)| (g - along * u) / tape.norm)
            .collect(),
    ))
}

/// Fully connected classifier `logits = W·v + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl DenseParams {
    pub fn zeros(num_classes: usize, head_dim: usize) -> Self {
        DenseParams {
            weights: Matrix::zeros(num_classes, head_dim),
            bias: vec![0.0; num_classes],
        }
    }

    /// Small Gaussian weights, zero bias.
    pub fn random(num_classes: usize, head_dim: usize, scale: f64, rng: &mut SeededRng) -> Self {
        DenseParams {
            weights: rng.normal_matrix(num_classes, head_dim).scale(scale),
            bias: vec![0.0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn logits(&self, v: &HeadVector) -> Result<Vec<f64>> {
        if v.len() != self.weights.cols() {
            return Err(Error::Shape {
                op: "dense",
                left: self.weights.shape(),
                right: (v.len(), 1),
            });
        }
        Ok((0..self.weights.rows())
            .map(|k| {
                self.weights
                    .row(k)
                    .iter()
                    .zip(&v.0)
                    .map(|(w, x)| w * x)
                    .sum::<f64>()
                    + self.bias[k]
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub v: HeadVector,
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax cross-entropy of the dense layer's logits against `label`, with
/// gradients for the input vector and both parameter blocks.
pub fn dense_softmax_ce(v: &HeadVector, params: &DenseParams, label: usize) -> Result<(f64, DenseGrads)> {
    let classes = params.num_classes();
    if label >= classes {
        return Err(Error::contract(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    let logits = params.logits(v)?;
    let top = argmax(&logits);
    let max = logits[top];
    let shifted: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    // log Σ exp(lₖ − max) = log(1 + Σ_{k≠top} …); ln_1p keeps saturated losses exact.
    let rest: f64 = shifted.iter().enumerate().filter(|(k, _)| *k != top).map(|(_, e)| e).sum();
    let log_norm = rest.ln_1p();
    let loss = (max - logits[label]) + log_norm;

    let total = 1.0 + rest;
    let mut delta: Vec<f64> = shifted.iter().map(|e| e / total).collect();
    delta[label] -= 1.0;

    let weights = Matrix::from_fn(classes, v.len(), |k, j| delta[k] * v.0[j]);
    let grad_v = (0..v.len())
        .map(|j| (0..classes).map(|k| params.weights[(k, j)] * delta[k]).sum())
        .collect();
    Ok((
        loss,
        DenseGrads {
            v: HeadVector(grad_v),
            weights,
            bias: delta,
        },
    ))
}
