use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use spdagg::gradcheck::{grad_check, GradCheckReport};
use spdagg::kernel::{certify, covariance_forward, kernel_forward};
use spdagg::linalg::min_eigenvalue;
use spdagg::train::{evaluate, train, TrainOutcome};
use spdagg::transform::{stiefel_init, transform_forward};
use spdagg::{Aggregator, FeatureTensor, PipelineConfig, SeededRng, SpdMatrix, TrainConfig};

use crate::checkpoint;
use crate::fts::{fts_read, fts_write};
use crate::synth::synth_generate;
use crate::CliError;

/// Pipeline and training settings in one flat JSON object.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parses a config file. Shape fields the file leaves out are taken from
    /// the dataset (`in_channels`, `num_classes`).
    pub fn from_json(text: &str, data_channels: Option<usize>, data_classes: Option<usize>) -> Result<Self, CliError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| CliError::Config("config must be a JSON object".into()))?;
        let mut cfg: RunConfig = serde_json::from_value(value.clone()).map_err(|e| CliError::Config(e.to_string()))?;
        if let (false, Some(c)) = (obj.contains_key("in_channels"), data_channels) {
            cfg.pipeline.in_channels = c;
        }
        if let (false, Some(k)) = (obj.contains_key("num_classes"), data_classes) {
            cfg.pipeline.num_classes = k;
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, data_channels: Option<usize>, data_classes: Option<usize>) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => fs::read_to_string(p)?,
            None => "{}".to_string(),
        };
        Self::from_json(&text, data_channels, data_classes)
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub classes: u32,
    #[arg(long = "per-class")]
    pub per_class: u32,
    #[arg(long)]
    pub channels: u32,
    /// Side length of the square spatial grid.
    #[arg(long)]
    pub spatial: u32,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep only the first N samples in --out and write the rest to --out-test.
    #[arg(long = "train-count", requires = "out_test")]
    pub train_count: Option<u32>,
    #[arg(long = "out-test", requires = "train_count")]
    pub out_test: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthSummary {
    pub samples: usize,
    pub test_samples: usize,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<SynthSummary, CliError> {
    let spatial = args.spatial as usize;
    let data = synth_generate(
        args.classes as usize,
        args.per_class as usize,
        args.channels as usize,
        spatial,
        spatial,
        args.seed,
    )?;
    match (args.train_count, &args.out_test) {
        (Some(n), Some(test_path)) => {
            let (train, test) = data.split_at(n as usize);
            if train.is_empty() || test.is_empty() {
                return Err(CliError::Usage(format!(
                    "--train-count {n} leaves an empty split of {} samples",
                    data.len()
                )));
            }
            fts_write(&train, &args.out)?;
            fts_write(&test, test_path)?;
            Ok(SynthSummary {
                samples: train.len(),
                test_samples: test.len(),
            })
        }
        _ => {
            fts_write(&data, &args.out)?;
            Ok(SynthSummary {
                samples: data.len(),
                test_samples: 0,
            })
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "out-metrics")]
    pub out_metrics: PathBuf,
    #[arg(long = "out-ckpt")]
    pub out_ckpt: PathBuf,
    /// Record per-epoch wall time; otherwise `wall_ms` is written as 0 so
    /// metrics files are reproducible.
    #[arg(long = "record-wall-time")]
    pub record_wall_time: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_train_loss: f64,
    pub final_test_accuracy: Option<f64>,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary, CliError> {
    let data = fts_read(&args.data)?;
    let test = args.test.as_deref().map(fts_read).transpose()?;
    if let Some(t) = &test {
        if (t.channels, t.height, t.width) != (data.channels, data.height, data.width) {
            return Err(CliError::Usage("test set shape differs from training set".into()));
        }
    }
    let mut cfg = RunConfig::load(args.config.as_deref(), Some(data.channels), Some(data.num_classes))?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let samples = data.to_samples();
    let test_samples = test.as_ref().map(|t| t.to_samples());
    let TrainOutcome { params, mut history } = train(&samples, test_samples.as_deref(), &cfg.pipeline, &cfg.train)?;

    if !args.record_wall_time {
        for r in history.iter_mut() {
            r.wall_ms = 0;
        }
    }
    let mut out = BufWriter::new(File::create(&args.out_metrics)?);
    for record in &history {
        serde_json::to_writer(&mut out, record).map_err(|e| CliError::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    checkpoint::save(&args.out_ckpt, &cfg.pipeline, &params)?;

    let last = history.last();
    Ok(TrainSummary {
        epochs: history.len(),
        final_train_loss: last.map_or(f64::NAN, |r| r.mean_train_loss),
        final_test_accuracy: last.and_then(|r| r.test_accuracy),
    })
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub accuracy: f64,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport, CliError> {
    let data = fts_read(&args.data)?;
    let (cfg, params) = checkpoint::load(&args.ckpt)?;
    if data.channels != cfg.in_channels {
        return Err(CliError::Usage(format!(
            "dataset has {} channels but the checkpoint expects {}",
            data.channels, cfg.in_channels
        )));
    }
    let samples = data.to_samples();
    Ok(EvalReport {
        samples: samples.len(),
        accuracy: evaluate(&cfg, &params, &samples)?,
    })
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Pipeline config; defaults to C₀=6, C=5, C′=3 with 3 classes.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds to check, starting at --seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<Vec<GradCheckReport>, CliError> {
    let pipeline = match &args.config {
        Some(p) => RunConfig::from_json(&fs::read_to_string(p)?, None, None)?.pipeline,
        None => PipelineConfig::small(),
    };
    if args.tol.is_nan() || args.tol < 0.0 {
        return Err(CliError::Usage(format!("--tol must be non-negative, got {}", args.tol)));
    }
    (args.seed..args.seed + args.seeds.max(1))
        .map(|seed| grad_check(&pipeline, seed, args.tol).map_err(CliError::from))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AggregatorArg {
    Kernel,
    Covariance,
}

impl From<AggregatorArg> for Aggregator {
    fn from(a: AggregatorArg) -> Self {
        match a {
            AggregatorArg::Kernel => Aggregator::Kernel,
            AggregatorArg::Covariance => Aggregator::Covariance,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CertifyArgs {
    #[arg(long, value_enum)]
    pub aggregator: AggregatorArg,
    #[arg(long)]
    pub channels: u32,
    /// Number of spatial positions N.
    #[arg(long)]
    pub spatial: u32,
    #[arg(long)]
    pub trials: u32,
    #[arg(long)]
    pub seed: u64,
    /// Output size of the transform; defaults to half the channels.
    #[arg(long = "transform-dim")]
    pub transform_dim: Option<u32>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CertifyReport {
    pub aggregator: Aggregator,
    pub channels: usize,
    pub spatial: usize,
    pub transform_dim: usize,
    pub trials: usize,
    /// Smallest eigenvalue of the aggregated matrix over all trials.
    pub min_eig_aggregated: f64,
    /// Smallest eigenvalue of the transformed matrix over all trials.
    pub min_eig_transformed: f64,
    pub positive_trials: usize,
}

pub fn cmd_certify(args: &CertifyArgs) -> Result<CertifyReport, CliError> {
    let c = args.channels as usize;
    let n = args.spatial as usize;
    let c_prime = args.transform_dim.map_or((c / 2).max(1), |d| d as usize);
    if c < 2 || n < 2 || args.trials == 0 {
        return Err(CliError::Usage("certify needs --channels >= 2, --spatial >= 2, --trials >= 1".into()));
    }
    if c_prime == 0 || c_prime > c {
        return Err(CliError::Usage(format!("--transform-dim must be in 1..={c}")));
    }
    let aggregator = Aggregator::from(args.aggregator);
    let mut rng = SeededRng::new(args.seed);
    let mut min_agg = f64::INFINITY;
    let mut min_y = f64::INFINITY;
    let mut positive = 0;
    for _ in 0..args.trials {
        let x = FeatureTensor::new(c, n, 1, (0..c * n).map(|_| rng.normal()).collect())?;
        let k = match aggregator {
            Aggregator::Kernel => kernel_forward(&x)?.0,
            Aggregator::Covariance => SpdMatrix::from_matrix(&covariance_forward(&x)?)?,
        };
        let w = stiefel_init(c, c_prime, &mut rng)?;
        let (y, _) = transform_forward(&k, &w)?;
        let eig_k = certify(&k);
        let eig_y = min_eigenvalue(y.matrix())?;
        if eig_k > 0.0 && eig_y > 0.0 {
            positive += 1;
        }
        min_agg = min_agg.min(eig_k);
        min_y = min_y.min(eig_y);
    }
    Ok(CertifyReport {
        aggregator,
        channels: c,
        spatial: n,
        transform_dim: c_prime,
        trials: args.trials as usize,
        min_eig_aggregated: min_agg,
        min_eig_transformed: min_y,
        positive_trials: positive,
    })
}
