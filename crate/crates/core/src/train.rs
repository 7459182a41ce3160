//! Two-stage mini-batch SGD. Euclidean parameters take plain gradient steps;
//! the Stiefel parameter is updated by tangent projection and QR retraction.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{backward, forward, predict, NetworkParams, PipelineConfig};
use crate::rng::SeededRng;
use crate::tensor::{FeatureTensor, Matrix};
use crate::transform::StiefelSgd;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    /// Initial Stiefel step size for stage 1; `None` follows the Euclidean rate.
    pub lr_stiefel: Option<f64>,
    pub decay_factor: f64,
    pub plateau_patience: usize,
    /// Minimum drop in epoch loss that counts as improvement.
    pub plateau_threshold: f64,
    pub batch_size: usize,
    pub epochs_per_stage: [usize; 2],
    pub seed: u64,
    /// Freeze the 1×1 mixing layer during stage 1.
    pub freeze_mix_stage1: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_stage1: 0.5,
            lr_stage2: 0.05,
            lr_stiefel: None,
            decay_factor: 10.0,
            plateau_patience: 3,
            plateau_threshold: 1e-4,
            batch_size: 32,
            epochs_per_stage: [15, 15],
            seed: 0,
            freeze_mix_stage1: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr_stage1, self.lr_stage2, self.lr_stiefel.unwrap_or(1.0)];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::contract("learning rates must be finite and non-negative"));
        }
        if !(self.decay_factor >= 1.0) {
            return Err(Error::contract("decay_factor must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub x: FeatureTensor,
    pub label: usize,
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub stage: usize,
    pub mean_train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub lr: f64,
    /// Largest `‖WᵀW − I‖_F` observed after any step of the epoch.
    pub stiefel_orthogonality_error: f64,
    pub wall_ms: u64,
}

/// Reported after every optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepEvent {
    pub step: u64,
    pub stage: usize,
    pub orthogonality_error: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub history: Vec<MetricsRecord>,
}

/// Classification accuracy of `params` over `samples`.
pub fn evaluate(cfg: &PipelineConfig, params: &NetworkParams, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty set"));
    }
    let mut correct = 0usize;
    for s in samples {
        if predict(cfg, params, &s.x)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

pub fn train(
    samples: &[Sample],
    test: Option<&[Sample]>,
    cfg: &PipelineConfig,
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut rng = SeededRng::new(tc.seed);
    let params = NetworkParams::init(cfg, &mut rng)?;
    train_from(params, samples, test, cfg, tc, &mut |_| {})
}

/// Trains from given initial parameters, calling `on_step` after every update.
pub fn train_from(
    mut params: NetworkParams,
    samples: &[Sample],
    test: Option<&[Sample]>,
    cfg: &PipelineConfig,
    tc: &TrainConfig,
    on_step: &mut dyn FnMut(&StepEvent),
) -> Result<TrainOutcome> {
    tc.validate()?;
    params.check(cfg)?;
    if samples.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.label >= cfg.num_classes {
            return Err(Error::contract(format!(
                "sample {i} has label {} but only {} classes",
                s.label, cfg.num_classes
            )));
        }
    }

    // Shuffles draw from their own stream so they do not depend on initialization.
    let mut shuffle_rng = SeededRng::new(tc.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut stiefel = StiefelSgd::new();
    let mut history = Vec::new();
    let mut epoch = 0usize;
    let mut order: Vec<usize> = (0..samples.len()).collect();

    for stage in 1..=2 {
        let mut lr = if stage == 1 { tc.lr_stage1 } else { tc.lr_stage2 };
        let mut lr_w = match tc.lr_stiefel {
            None => lr,
            Some(s) if stage == 1 => s,
            Some(s) if tc.lr_stage1 > 0.0 => s * tc.lr_stage2 / tc.lr_stage1,
            Some(s) => s,
        };
        let train_mix = stage == 2 || !tc.freeze_mix_stage1;
        let mut best = f64::INFINITY;
        let mut stale_epochs = 0usize;

        for _ in 0..tc.epochs_per_stage[stage - 1] {
            epoch += 1;
            let started = Instant::now();
            shuffle_rng.shuffle(&mut order);
            let mut loss_sum = 0.0;
            let mut correct = 0usize;
            let mut worst_orth = params.transform.orthogonality_error();

            for batch in order.chunks(tc.batch_size) {
                let scale = 1.0 / batch.len() as f64;
                let mut acc = GradAccumulator::zeros(&params);
                for &i in batch {
                    let s = &samples[i];
                    let out = forward(cfg, &params, &s.x, s.label).map_err(|e| annotate(e, epoch, i))?;
                    loss_sum += out.loss;
                    if out.prediction == s.label {
                        correct += 1;
                    }
                    let g = backward(&params, &out.tapes, scale).map_err(|e| annotate(e, epoch, i))?;
                    acc.add(&g)?;
                }
                acc.apply(&mut params, lr, train_mix)?;
                if cfg.learn_transform {
                    params.transform = stiefel.step(&params.transform, &acc.transform, lr_w)?;
                }
                let orth = params.transform.orthogonality_error();
                worst_orth = worst_orth.max(orth);
                on_step(&StepEvent {
                    step: stiefel.steps(),
                    stage,
                    orthogonality_error: orth,
                });
            }

            let mean_loss = loss_sum / samples.len() as f64;
            if !mean_loss.is_finite() {
                return Err(Error::NonFinite(format!("mean training loss at epoch {epoch}")));
            }
            let test_accuracy = match test {
                Some(t) if !t.is_empty() => Some(evaluate(cfg, &params, t)?),
                _ => None,
            };
            history.push(MetricsRecord {
                epoch,
                stage,
                mean_train_loss: mean_loss,
                train_accuracy: correct as f64 / samples.len() as f64,
                test_accuracy,
                lr,
                stiefel_orthogonality_error: worst_orth,
                wall_ms: started.elapsed().as_millis() as u64,
            });

            if mean_loss < best - tc.plateau_threshold {
                best = mean_loss;
                stale_epochs = 0;
            } else {
                stale_epochs += 1;
                if stale_epochs >= tc.plateau_patience {
                    lr /= tc.decay_factor;
                    lr_w /= tc.decay_factor;
                    stale_epochs = 0;
                }
            }
        }
    }
    Ok(TrainOutcome { params, history })
}

fn annotate(e: Error, epoch: usize, sample: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} (epoch {epoch}, sample {sample})")),
        other => other,
    }
}

/// Ordered sum of per-sample gradients over a mini-batch.
struct GradAccumulator {
    mix: Option<(Matrix, Vec<f64>)>,
    transform: Matrix,
    dense_weights: Matrix,
    dense_bias: Vec<f64>,
}

impl GradAccumulator {
    fn zeros(p: &NetworkParams) -> Self {
        GradAccumulator {
            mix: p
                .mix
                .as_ref()
                .map(|m| (Matrix::zeros(m.weights.rows(), m.weights.cols()), vec![0.0; m.bias.len()])),
            transform: Matrix::zeros(p.transform.input_dim(), p.transform.output_dim()),
            dense_weights: Matrix::zeros(p.dense.weights.rows(), p.dense.weights.cols()),
            dense_bias: vec![0.0; p.dense.bias.len()],
        }
    }

    fn add(&mut self, g: &crate::network::Gradients) -> Result<()> {
        if let (Some((w, b)), Some((gw, gb))) = (&mut self.mix, &g.mix) {
            w.axpy(1.0, gw)?;
            add_into(b, gb);
        }
        // Euclidean gradient; the optimizer projects the batch mean once.
        self.transform.axpy(1.0, &g.transform_euclid)?;
        self.dense_weights.axpy(1.0, &g.dense_weights)?;
        add_into(&mut self.dense_bias, &g.dense_bias);
        Ok(())
    }

    fn apply(&self, p: &mut NetworkParams, lr: f64, train_mix: bool) -> Result<()> {
        if lr == 0.0 {
            return Ok(());
        }
        if train_mix {
            if let (Some(m), Some((gw, gb))) = (&mut p.mix, &self.mix) {
                m.weights.axpy(-lr, gw)?;
                for (b, g) in m.bias.iter_mut().zip(gb) {
                    *b -= lr * g;
                }
            }
        }
        p.dense.weights.axpy(-lr, &self.dense_weights)?;
        for (b, g) in p.dense.bias.iter_mut().zip(&self.dense_bias) {
            *b -= lr * g;
        }
        Ok(())
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}
