//! Saving and restoring trained pipelines in the FTSP container.

use std::fs;
use std::path::Path;

use spdagg::head::DenseParams;
use spdagg::network::{MixParams, Normalizations};
use spdagg::{Aggregator, Matrix, NetworkParams, PipelineConfig, StiefelPoint};

use crate::fts::{blocks_from_bytes, blocks_to_bytes, Block, FormatError};
use crate::CliError;

/// Block holding the pipeline shape and switches, encoded as numbers:
/// `[in, mixed, transform, classes, aggregator, spd_relu, power, l2, learn_transform]`.
pub const PIPELINE_BLOCK: &str = "pipeline";

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn matrix_block(name: &str, m: &Matrix) -> Block {
    Block {
        name: name.to_string(),
        rows: m.rows(),
        cols: m.cols(),
        data: m.as_slice().to_vec(),
    }
}

fn vector_block(name: &str, v: &[f64]) -> Block {
    Block {
        name: name.to_string(),
        rows: 1,
        cols: v.len(),
        data: v.to_vec(),
    }
}

pub fn to_blocks(cfg: &PipelineConfig, params: &NetworkParams) -> Vec<Block> {
    let header = vec![
        cfg.in_channels as f64,
        cfg.mixed_channels as f64,
        cfg.transform_dim as f64,
        cfg.num_classes as f64,
        match cfg.aggregator {
            Aggregator::Kernel => 0.0,
            Aggregator::Covariance => 1.0,
        },
        flag(cfg.use_spd_relu),
        flag(cfg.normalizations.power),
        flag(cfg.normalizations.l2),
        flag(cfg.learn_transform),
    ];
    let mut blocks = vec![vector_block(PIPELINE_BLOCK, &header)];
    if let Some(mix) = &params.mix {
        blocks.push(matrix_block("mix.weights", &mix.weights));
        blocks.push(vector_block("mix.bias", &mix.bias));
    }
    blocks.push(matrix_block("transform.w", params.transform.matrix()));
    blocks.push(matrix_block("dense.weights", &params.dense.weights));
    blocks.push(vector_block("dense.bias", &params.dense.bias));
    blocks
}

fn bad(reason: impl Into<String>) -> CliError {
    CliError::Checkpoint(reason.into())
}

fn find<'a>(blocks: &'a [Block], name: &str) -> Result<&'a Block, CliError> {
    blocks
        .iter()
        .find(|b| b.name == name)
        .ok_or_else(|| bad(format!("missing block {name:?}")))
}

fn as_matrix(b: &Block) -> Result<Matrix, CliError> {
    Matrix::from_vec(b.rows, b.cols, b.data.clone()).map_err(|e| bad(format!("{}: {e}", b.name)))
}

fn count(v: f64, what: &str) -> Result<usize, CliError> {
    if v.fract() != 0.0 || !(0.0..=u32::MAX as f64).contains(&v) {
        return Err(bad(format!("{what} is not a count: {v}")));
    }
    Ok(v as usize)
}

fn as_flag(v: f64, what: &str) -> Result<bool, CliError> {
    if v == 0.0 {
        Ok(false)
    } else if v == 1.0 {
        Ok(true)
    } else {
        Err(bad(format!("{what} is not a flag: {v}")))
    }
}

pub fn from_blocks(blocks: &[Block]) -> Result<(PipelineConfig, NetworkParams), CliError> {
    let header = find(blocks, PIPELINE_BLOCK)?;
    if header.data.len() != 9 {
        return Err(bad("pipeline block must hold 9 values"));
    }
    let h = &header.data;
    let cfg = PipelineConfig {
        in_channels: count(h[0], "in_channels")?,
        mixed_channels: count(h[1], "mixed_channels")?,
        transform_dim: count(h[2], "transform_dim")?,
        num_classes: count(h[3], "num_classes")?,
        aggregator: match count(h[4], "aggregator")? {
            0 => Aggregator::Kernel,
            1 => Aggregator::Covariance,
            other => return Err(bad(format!("unknown aggregator code {other}"))),
        },
        use_spd_relu: as_flag(h[5], "use_spd_relu")?,
        normalizations: Normalizations {
            power: as_flag(h[6], "power")?,
            l2: as_flag(h[7], "l2")?,
        },
        learn_transform: as_flag(h[8], "learn_transform")?,
    };
    let mix = if cfg.mixed_channels == 0 {
        None
    } else {
        Some(MixParams {
            weights: as_matrix(find(blocks, "mix.weights")?)?,
            bias: find(blocks, "mix.bias")?.data.clone(),
        })
    };
    let transform = StiefelPoint::new(as_matrix(find(blocks, "transform.w")?)?)?;
    let dense = DenseParams {
        weights: as_matrix(find(blocks, "dense.weights")?)?,
        bias: find(blocks, "dense.bias")?.data.clone(),
    };
    let params = NetworkParams { mix, transform, dense };
    params.check(&cfg)?;
    Ok((cfg, params))
}

pub fn save(path: &Path, cfg: &PipelineConfig, params: &NetworkParams) -> Result<(), CliError> {
    fs::write(path, blocks_to_bytes(&to_blocks(cfg, params))).map_err(FormatError::from)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(PipelineConfig, NetworkParams), CliError> {
    let bytes = fs::read(path).map_err(FormatError::from)?;
    from_blocks(&blocks_from_bytes(&bytes)?)
}
