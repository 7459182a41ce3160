//! The full pipeline: 1×1 channel mixing + ReLU, kernel (or covariance)
//! aggregation, Stiefel transform, optional elementwise ReLU, vectorization,
//! power and ℓ2 normalization, dense layer and softmax cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{
    argmax, dense_softmax_ce, head_dim, l2_backward, l2_normalize, power_backward, power_normalize,
    vectorize, vectorize_backward, DenseGrads, DenseParams, HeadVector, L2Tape, PowerTape,
};
use crate::kernel::{
    covariance_backward, covariance_with_tape, kernel_backward, kernel_forward, kernel_forward_with_sigma,
    CovarianceTape, KernelTape, SpdMatrix,
};
use crate::rng::SeededRng;
use crate::tensor::{FeatureTensor, Matrix};
use crate::transform::{
    spd_relu, spd_relu_backward, stiefel_init, tangent_project, transform_backward_input,
    transform_backward_param, transform_forward, ReluTape, StiefelPoint, TransformTape,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Kernel,
    Covariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Normalizations {
    pub power: bool,
    pub l2: bool,
}

impl Default for Normalizations {
    fn default() -> Self {
        Normalizations { power: true, l2: true }
    }
}

fn default_true() -> bool {
    true
}

/// Layer shapes and switches. `mixed_channels = 0` skips the 1×1 mixing layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub in_channels: usize,
    pub mixed_channels: usize,
    pub transform_dim: usize,
    pub num_classes: usize,
    pub use_spd_relu: bool,
    pub aggregator: Aggregator,
    pub normalizations: Normalizations,
    /// When false the Stiefel parameter keeps its random initialization.
    #[serde(default = "default_true")]
    pub learn_transform: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            in_channels: 16,
            mixed_channels: 12,
            transform_dim: 8,
            num_classes: 2,
            use_spd_relu: false,
            aggregator: Aggregator::Kernel,
            normalizations: Normalizations::default(),
            learn_transform: true,
        }
    }
}

impl PipelineConfig {
    /// The small instance used for gradient checks: `C₀=6, C=5, C′=3`, 3 classes.
    pub fn small() -> Self {
        PipelineConfig {
            in_channels: 6,
            mixed_channels: 5,
            transform_dim: 3,
            num_classes: 3,
            ..PipelineConfig::default()
        }
    }

    /// Channels entering the aggregation layer.
    pub fn aggregated_channels(&self) -> usize {
        if self.mixed_channels == 0 {
            self.in_channels
        } else {
            self.mixed_channels
        }
    }

    pub fn head_dim(&self) -> usize {
        head_dim(self.transform_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.transform_dim == 0 || self.num_classes == 0 {
            return Err(Error::contract("pipeline counts must all be at least 1"));
        }
        let c = self.aggregated_channels();
        if self.aggregator == Aggregator::Kernel && c < 2 {
            return Err(Error::contract("kernel aggregation needs at least two channels"));
        }
        if self.transform_dim > c {
            return Err(Error::contract(format!(
                "transform_dim {} exceeds aggregated channels {c}",
                self.transform_dim
            )));
        }
        Ok(())
    }
}

/// Weights of the 1×1 convolution, a per-position `C×C₀` linear map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixParams {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MixTape {
    input: Matrix,
    pre: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixGrads {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub input: Matrix,
}

/// `out = max(0, W·x + b)` at every spatial position.
pub fn mix_forward(x: &FeatureTensor, p: &MixParams) -> Result<(FeatureTensor, MixTape)> {
    if x.channels() != p.weights.cols() {
        return Err(Error::contract(format!(
            "mixing layer expects {} input channels, got {}",
            p.weights.cols(),
            x.channels()
        )));
    }
    let input = x.to_matrix();
    let mut pre = p.weights.matmul(&input)?;
    for i in 0..pre.rows() {
        for j in 0..pre.cols() {
            pre[(i, j)] += p.bias[i];
        }
    }
    let out = pre.map(|v| v.max(0.0));
    let out = FeatureTensor::from_matrix(out, x.height(), x.width())?;
    Ok((out, MixTape { input, pre }))
}

/// Gradients of the mixing layer from the upstream gradient on its `C×N` output.
pub fn mix_backward(tape: &MixTape, p: &MixParams, grad_out: &Matrix) -> Result<MixGrads> {
    if grad_out.shape() != tape.pre.shape() {
        return Err(Error::Shape {
            op: "mix_backward",
            left: tape.pre.shape(),
            right: grad_out.shape(),
        });
    }
    let mut delta = grad_out.clone();
    for (d, z) in delta.as_mut_slice().iter_mut().zip(tape.pre.as_slice()) {
        if *z <= 0.0 {
            *d = 0.0;
        }
    }
    let weights = delta.matmul_t(&tape.input)?;
    let bias = (0..delta.rows()).map(|i| delta.row(i).iter().sum()).collect();
    let input = p.weights.t_matmul(&delta)?;
    Ok(MixGrads { weights, bias, input })
}

/// All trainable parameters of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub mix: Option<MixParams>,
    pub transform: StiefelPoint,
    pub dense: DenseParams,
}

impl NetworkParams {
    /// Random initialization: Gaussian mixing weights scaled by `1/√C₀` with a
    /// small positive bias, a Stiefel draw for the transform, and small
    /// Gaussian dense weights.
    pub fn init(cfg: &PipelineConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let mix = if cfg.mixed_channels == 0 {
            None
        } else {
            let scale = 1.0 / (cfg.in_channels as f64).sqrt();
            Some(MixParams {
                weights: rng.normal_matrix(cfg.mixed_channels, cfg.in_channels).scale(scale),
                bias: vec![0.1; cfg.mixed_channels],
            })
        };
        let transform = stiefel_init(cfg.aggregated_channels(), cfg.transform_dim, rng)?;
        let dense = DenseParams::random(cfg.num_classes, cfg.head_dim(), 0.01, rng);
        Ok(NetworkParams { mix, transform, dense })
    }

    pub fn check(&self, cfg: &PipelineConfig) -> Result<()> {
        cfg.validate()?;
        match (&self.mix, cfg.mixed_channels) {
            (None, 0) => {}
            (Some(m), c) if c > 0 => {
                if m.weights.shape() != (c, cfg.in_channels) || m.bias.len() != c {
                    return Err(Error::contract("mixing parameters do not match the pipeline shape"));
                }
            }
            _ => return Err(Error::contract("mixing layer presence does not match the pipeline")),
        }
        if self.transform.matrix().shape() != (cfg.aggregated_channels(), cfg.transform_dim) {
            return Err(Error::contract("transform parameter does not match the pipeline shape"));
        }
        if self.dense.weights.shape() != (cfg.num_classes, cfg.head_dim()) || self.dense.bias.len() != cfg.num_classes {
            return Err(Error::contract("dense parameters do not match the pipeline shape"));
        }
        Ok(())
    }

    /// Number of scalar parameters across all blocks.
    pub fn count(&self) -> usize {
        let mix = self.mix.as_ref().map_or(0, |m| m.weights.as_slice().len() + m.bias.len());
        mix + self.transform.matrix().as_slice().len() + self.dense.weights.as_slice().len() + self.dense.bias.len()
    }
}

#[derive(Debug, Clone)]
enum AggTape {
    Kernel(KernelTape),
    Covariance(CovarianceTape),
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Tapes {
    mix: Option<MixTape>,
    agg: AggTape,
    transform: TransformTape,
    relu: Option<ReluTape>,
    power: Option<PowerTape>,
    l2: Option<L2Tape>,
    dense: DenseGrads,
    input_shape: (usize, usize),
}

impl Tapes {
    /// Bandwidth used by the kernel layer, if the pipeline aggregates with the kernel.
    pub fn sigma(&self) -> Option<f64> {
        match &self.agg {
            AggTape::Kernel(t) => Some(t.sigma),
            AggTape::Covariance(_) => None,
        }
    }

    /// The aggregated matrix `K` (or the covariance) fed to the transform.
    pub fn aggregated(&self) -> &SpdMatrix {
        &self.transform.k
    }

    /// The transform output `Y`.
    pub fn transformed(&self) -> &SpdMatrix {
        &self.transform.y
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub loss: f64,
    pub prediction: usize,
    pub logits: Vec<f64>,
    pub tapes: Tapes,
}

struct Embedding {
    v: HeadVector,
    mix: Option<MixTape>,
    agg: AggTape,
    transform: TransformTape,
    relu: Option<ReluTape>,
    power: Option<PowerTape>,
    l2: Option<L2Tape>,
}

fn ensure_finite(ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn embed(cfg: &PipelineConfig, params: &NetworkParams, x: &FeatureTensor, sigma: Option<f64>) -> Result<Embedding> {
    if x.channels() != cfg.in_channels {
        return Err(Error::contract(format!(
            "pipeline expects {} input channels, got {}",
            cfg.in_channels,
            x.channels()
        )));
    }
    ensure_finite(x.is_finite(), "input features")?;
    let (mixed, mix_tape) = match &params.mix {
        Some(p) => {
            let (out, tape) = mix_forward(x, p)?;
            ensure_finite(out.is_finite(), "mixed features")?;
            (out, Some(tape))
        }
        None => (x.clone(), None),
    };
    let (agg_matrix, agg) = match cfg.aggregator {
        Aggregator::Kernel => {
            let (k, tape) = match sigma {
                Some(s) => kernel_forward_with_sigma(&mixed, s)?,
                None => kernel_forward(&mixed)?,
            };
            (k, AggTape::Kernel(tape))
        }
        Aggregator::Covariance => {
            let (cov, tape) = covariance_with_tape(&mixed)?;
            (SpdMatrix::from_matrix(&cov)?, AggTape::Covariance(tape))
        }
    };
    ensure_finite(agg_matrix.matrix().is_finite(), "aggregated matrix")?;
    let (y, transform) = transform_forward(&agg_matrix, &params.transform)?;
    ensure_finite(y.matrix().is_finite(), "transformed matrix")?;
    let (y, relu) = if cfg.use_spd_relu {
        let (z, tape) = spd_relu(&y);
        (z, Some(tape))
    } else {
        (y.into_matrix(), None)
    };
    let mut v = vectorize(&y)?;
    let power = if cfg.normalizations.power {
        let (out, tape) = power_normalize(&v);
        v = out;
        Some(tape)
    } else {
        None
    };
    let l2 = if cfg.normalizations.l2 {
        let (out, tape) = l2_normalize(&v);
        v = out;
        Some(tape)
    } else {
        None
    };
    ensure_finite(v.0.iter().all(|x| x.is_finite()), "head vector")?;
    Ok(Embedding {
        v,
        mix: mix_tape,
        agg,
        transform,
        relu,
        power,
        l2,
    })
}

/// Runs the pipeline on one sample and returns its loss, predicted class and tapes.
pub fn forward(cfg: &PipelineConfig, params: &NetworkParams, x: &FeatureTensor, label: usize) -> Result<ForwardOutput> {
    forward_with_sigma(cfg, params, x, label, None)
}

/// As [`forward`], but with the kernel bandwidth pinned to `sigma` when given.
pub fn forward_with_sigma(
    cfg: &PipelineConfig,
    params: &NetworkParams,
    x: &FeatureTensor,
    label: usize,
    sigma: Option<f64>,
) -> Result<ForwardOutput> {
    let e = embed(cfg, params, x, sigma)?;
    let logits = params.dense.logits(&e.v)?;
    ensure_finite(logits.iter().all(|l| l.is_finite()), "logits")?;
    let (loss, dense) = dense_softmax_ce(&e.v, &params.dense, label)?;
    ensure_finite(loss.is_finite(), "loss")?;
    Ok(ForwardOutput {
        loss,
        prediction: argmax(&logits),
        logits,
        tapes: Tapes {
            mix: e.mix,
            agg: e.agg,
            transform: e.transform,
            relu: e.relu,
            power: e.power,
            l2: e.l2,
            dense,
            input_shape: (x.channels(), x.positions()),
        },
    })
}

/// Predicted class for one sample.
pub fn predict(cfg: &PipelineConfig, params: &NetworkParams, x: &FeatureTensor) -> Result<usize> {
    let e = embed(cfg, params, x, None)?;
    Ok(argmax(&params.dense.logits(&e.v)?))
}

/// Parameter and input gradients of one sample's loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub mix: Option<(Matrix, Vec<f64>)>,
    /// Euclidean `∂L/∂W`.
    pub transform_euclid: Matrix,
    /// Tangent-space projection of `transform_euclid`.
    pub transform: Matrix,
    pub dense_weights: Matrix,
    pub dense_bias: Vec<f64>,
    /// Gradient with respect to the `C₀×N` input features.
    pub input: Matrix,
}

/// Back-propagates `upstream · ∂L` through the tapes of one forward pass.
pub fn backward(params: &NetworkParams, tapes: &Tapes, upstream: f64) -> Result<Gradients> {
    if tapes.transform.w != params.transform {
        return Err(Error::contract("stale tape: transform parameter changed since the forward pass"));
    }
    if tapes.dense.weights.shape() != params.dense.weights.shape() {
        return Err(Error::contract("tape does not match the dense layer shape"));
    }
    if tapes.mix.is_some() != params.mix.is_some() {
        return Err(Error::contract("tape does not match the mixing layer configuration"));
    }

    let dense_weights = tapes.dense.weights.scale(upstream);
    let dense_bias: Vec<f64> = tapes.dense.bias.iter().map(|b| b * upstream).collect();
    let mut grad_v = HeadVector(tapes.dense.v.0.iter().map(|g| g * upstream).collect());
    if let Some(t) = &tapes.l2 {
        grad_v = l2_backward(t, &grad_v)?;
    }
    if let Some(t) = &tapes.power {
        grad_v = power_backward(t, &grad_v)?;
    }
    let c_prime = params.transform.output_dim();
    let mut grad_y = vectorize_backward(&grad_v, c_prime)?;
    if let Some(t) = &tapes.relu {
        grad_y = spd_relu_backward(t, &grad_y)?;
    }
    let grad_k = transform_backward_input(&tapes.transform, &grad_y)?;
    let transform_euclid = transform_backward_param(&tapes.transform, &grad_y)?;
    let transform = tangent_project(&params.transform, &transform_euclid)?;
    let grad_m = match &tapes.agg {
        AggTape::Kernel(t) => kernel_backward(t, &grad_k)?,
        AggTape::Covariance(t) => covariance_backward(t, &grad_k)?,
    };
    let (mix, input) = match (&tapes.mix, &params.mix) {
        (Some(t), Some(p)) => {
            let g = mix_backward(t, p, &grad_m)?;
            (Some((g.weights, g.bias)), g.input)
        }
        _ => (None, grad_m),
    };
    if input.shape() != tapes.input_shape {
        return Err(Error::contract("tape input shape mismatch"));
    }
    Ok(Gradients {
        mix,
        transform_euclid,
        transform,
        dense_weights,
        dense_bias,
        input,
    })
}
