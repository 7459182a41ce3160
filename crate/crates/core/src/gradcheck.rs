//! Central-difference check of every gradient block of the full pipeline.
//!
//! The kernel bandwidth is pinned to its value at the base point while
//! differencing, matching the backward pass which treats it as a constant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::DenseParams;
use crate::network::{backward, forward_with_sigma, Gradients, MixParams, NetworkParams, PipelineConfig};
use crate::rng::SeededRng;
use crate::tensor::FeatureTensor;
use crate::transform::{stiefel_init, StiefelPoint};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Largest parameter count the O(P) check accepts.
pub const MAX_CHECK_PARAMS: usize = 5000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.blocks.iter().all(|b| b.pass)
    }

    pub fn worst(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }
}

/// Relative error with denominator `max(1, |analytic|)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Checks a random instance of `pipeline` on a 3×3 spatial grid.
pub fn grad_check(pipeline: &PipelineConfig, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    grad_check_with(pipeline, (3, 3), seed, tolerance, |_| {})
}

/// As [`grad_check`], with an explicit grid and a hook that may tamper with
/// the analytic gradients before comparison.
pub fn grad_check_with(
    pipeline: &PipelineConfig,
    (height, width): (usize, usize),
    seed: u64,
    tolerance: f64,
    tamper: impl FnOnce(&mut Gradients),
) -> Result<GradCheckReport> {
    pipeline.validate()?;
    let mut rng = SeededRng::new(seed);
    let params = random_params(pipeline, &mut rng)?;
    if params.count() > MAX_CHECK_PARAMS {
        return Err(Error::contract(format!(
            "gradient check limited to {MAX_CHECK_PARAMS} parameters, pipeline has {}",
            params.count()
        )));
    }
    let c0 = pipeline.in_channels;
    let x = FeatureTensor::new(
        c0,
        height,
        width,
        (0..c0 * height * width).map(|_| rng.normal()).collect(),
    )?;
    let label = rng.index(pipeline.num_classes);

    let base = forward_with_sigma(pipeline, &params, &x, label, None)?;
    let sigma = base.tapes.sigma();
    let mut grads = backward(&params, &base.tapes, 1.0)?;
    tamper(&mut grads);

    let loss_at = |p: &NetworkParams, x: &FeatureTensor| -> Result<f64> {
        Ok(forward_with_sigma(pipeline, p, x, label, sigma)?.loss)
    };

    let mut blocks = Vec::new();
    if let (Some(mix), Some((gw, gb))) = (&params.mix, &grads.mix) {
        blocks.push(check_block("mix.weights", gw.as_slice(), mix.weights.as_slice().len(), tolerance, |i, d| {
            let mut p = params.clone();
            p.mix.as_mut().expect("mix").weights.as_mut_slice()[i] += d;
            loss_at(&p, &x)
        })?);
        blocks.push(check_block("mix.bias", gb, mix.bias.len(), tolerance, |i, d| {
            let mut p = params.clone();
            p.mix.as_mut().expect("mix").bias[i] += d;
            loss_at(&p, &x)
        })?);
    }
    blocks.push(check_block(
        "transform.w",
        grads.transform_euclid.as_slice(),
        grads.transform_euclid.as_slice().len(),
        tolerance,
        |i, d| {
            let mut p = params.clone();
            let mut w = p.transform.matrix().clone();
            w.as_mut_slice()[i] += d;
            // Unconstrained perturbation: the Euclidean gradient ignores the manifold.
            p.transform = StiefelPoint::unchecked(w);
            loss_at(&p, &x)
        },
    )?);
    blocks.push(check_block(
        "dense.weights",
        grads.dense_weights.as_slice(),
        grads.dense_weights.as_slice().len(),
        tolerance,
        |i, d| {
            let mut p = params.clone();
            p.dense.weights.as_mut_slice()[i] += d;
            loss_at(&p, &x)
        },
    )?);
    blocks.push(check_block("dense.bias", &grads.dense_bias, grads.dense_bias.len(), tolerance, |i, d| {
        let mut p = params.clone();
        p.dense.bias[i] += d;
        loss_at(&p, &x)
    })?);
    blocks.push(check_block("input", grads.input.as_slice(), grads.input.as_slice().len(), tolerance, |i, d| {
        let mut data = x.as_slice().to_vec();
        data[i] += d;
        loss_at(&params, &FeatureTensor::new(c0, height, width, data)?)
    })?);

    Ok(GradCheckReport { seed, tolerance, blocks })
}

fn check_block(
    name: &str,
    analytic: &[f64],
    entries: usize,
    tolerance: f64,
    loss: impl Fn(usize, f64) -> Result<f64>,
) -> Result<BlockReport> {
    if analytic.len() != entries {
        return Err(Error::contract(format!(
            "{name}: analytic gradient has {} entries, expected {entries}",
            analytic.len()
        )));
    }
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let numeric = (loss(i, FD_STEP)? - loss(i, -FD_STEP)?) / (2.0 * FD_STEP);
        let err = rel_error(*a, numeric);
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    Ok(BlockReport {
        name: name.to_string(),
        entries,
        max_rel_error: worst,
        pass: worst < tolerance,
    })
}

/// Well-scaled random parameters so every block carries a non-trivial gradient.
fn random_params(cfg: &PipelineConfig, rng: &mut SeededRng) -> Result<NetworkParams> {
    let mix = if cfg.mixed_channels == 0 {
        None
    } else {
        Some(MixParams {
            weights: rng.normal_matrix(cfg.mixed_channels, cfg.in_channels),
            bias: (0..cfg.mixed_channels).map(|_| 0.5 * rng.normal()).collect(),
        })
    };
    let transform = stiefel_init(cfg.aggregated_channels(), cfg.transform_dim, rng)?;
    let dense = DenseParams {
        weights: rng.normal_matrix(cfg.num_classes, cfg.head_dim()),
        bias: (0..cfg.num_classes).map(|_| rng.normal()).collect(),
    };
    Ok(NetworkParams { mix, transform, dense })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_config_passes() {
        let report = grad_check(&PipelineConfig::small(), 0, 1e-5).unwrap();
        assert!(report.pass(), "{report:#?}");
        assert_eq!(report.blocks.len(), 6);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let report = grad_check_with(&PipelineConfig::small(), (3, 3), 0, 1e-5, |g| {
            g.transform_euclid = g.transform_euclid.scale(1.01);
        })
        .unwrap();
        assert!(!report.pass());
        let w = report.blocks.iter().find(|b| b.name == "transform.w").unwrap();
        assert!(!w.pass);
    }

    #[test]
    fn infinite_tolerance_always_passes() {
        let report = grad_check_with(&PipelineConfig::small(), (3, 3), 1, f64::INFINITY, |g| {
            g.input = g.input.scale(3.0);
        })
        .unwrap();
        assert!(report.pass());
    }

    #[test]
    fn oversized_pipeline_rejected() {
        let cfg = PipelineConfig {
            in_channels: 64,
            mixed_channels: 64,
            transform_dim: 32,
            ..PipelineConfig::default()
        };
        assert!(grad_check(&cfg, 0, 1e-5).is_err());
    }
}
