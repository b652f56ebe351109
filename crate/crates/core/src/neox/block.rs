use serde::{Deserialize, Serialize};

use super::attention::attend_naive;
use super::cache::KvCache;
use super::config::ModelConfig;
use super::ops::{layernorm_two_pass, mlp, output_projection, qkv_project, rope_partial, HeadQkv};
use super::weights::BlockWeights;
use crate::{Error, Result};

/// Every intermediate of one golden decode step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockTrace {
    pub ln1: Vec<f64>,
    /// Per-head projections after RoPE on q and k.
    pub heads: Vec<HeadQkv>,
    /// Concatenated per-head attention outputs.
    pub context: Vec<f64>,
    pub attn_out: Vec<f64>,
    pub ln2: Vec<f64>,
    pub mlp_out: Vec<f64>,
    pub output: Vec<f64>,
}

pub(crate) fn check_step(x: &[f64], cache: &KvCache, pos: usize, cfg: &ModelConfig) -> Result<()> {
    cfg.validate()?;
    if x.len() != cfg.hidden {
        return Err(Error::shape(format!(
            "block input of length {} for hidden {}",
            x.len(),
            cfg.hidden
        )));
    }
    if cache.n_heads() != cfg.n_heads {
        return Err(Error::shape(format!(
            "{}-head cache for a {}-head model",
            cache.n_heads(),
            cfg.n_heads
        )));
    }
    if cache.len() != pos {
        return Err(Error::shape(format!(
            "cache holds {} positions but pos = {pos}",
            cache.len()
        )));
    }
    Ok(())
}

/// Projects, rotates and caches this step's keys/values.
pub(crate) fn project_and_cache(
    ln1: &[f64],
    w: &BlockWeights,
    cache: &mut KvCache,
    pos: usize,
    cfg: &ModelConfig,
) -> Result<Vec<HeadQkv>> {
    let rd = cfg.rotary_dims();
    let heads = qkv_project(ln1, w, cfg)?
        .into_iter()
        .map(|h| {
            Ok(HeadQkv {
                q: rope_partial(&h.q, pos, rd, cfg.rope_theta)?,
                k: rope_partial(&h.k, pos, rd, cfg.rope_theta)?,
                v: h.v,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let keys: Vec<Vec<f64>> = heads.iter().map(|h| h.k.clone()).collect();
    let values: Vec<Vec<f64>> = heads.iter().map(|h| h.v.clone()).collect();
    cache.append(&keys, &values)?;
    Ok(heads)
}

/// Combines the residual stream with the attention and MLP branches.
///
/// Parallel residual: `x + attn + mlp(ln2(x))`.
/// Sequential: `h = x + attn; h + mlp(ln2(h))`.
pub(crate) fn residual_input<'a>(x: &'a [f64], attn_out: &[f64], cfg: &ModelConfig) -> std::borrow::Cow<'a, [f64]> {
    if cfg.parallel_residual {
        std::borrow::Cow::Borrowed(x)
    } else {
        std::borrow::Cow::Owned(x.iter().zip(attn_out).map(|(a, b)| a + b).collect())
    }
}

/// The unfused decode step in f64, recording intermediates.
pub fn decoder_block_golden_traced(
    x: &[f64],
    w: &BlockWeights,
    cache: &mut KvCache,
    pos: usize,
    cfg: &ModelConfig,
) -> Result<BlockTrace> {
    check_step(x, cache, pos, cfg)?;
    w.validate(cfg)?;

    let ln1 = layernorm_two_pass(x, &w.ln1_gain, &w.ln1_bias, cfg.ln_eps)?;
    let heads = project_and_cache(&ln1, w, cache, pos, cfg)?;

    let scale = cfg.attn_scale();
    let mut context = Vec::with_capacity(cfg.hidden);
    for (h, qkv) in heads.iter().enumerate() {
        context.extend(attend_naive(&qkv.q, cache.head(h), scale)?);
    }
    let attn_out = output_projection(&context, w)?;

    let mlp_in = residual_input(x, &attn_out, cfg);
    let ln2 = layernorm_two_pass(&mlp_in, &w.ln2_gain, &w.ln2_bias, cfg.ln_eps)?;
    let mlp_out = mlp(&ln2, w, cfg.gelu)?;

    let output = x
        .iter()
        .zip(&attn_out)
        .zip(&mlp_out)
        .map(|((a, b), c)| a + b + c)
        .collect();

    Ok(BlockTrace {
        ln1,
        heads,
        context,
        attn_out,
        ln2,
        mlp_out,
        output,
    })
}

/// One decode step of the reference block; appends this step's K/V to `cache`.
pub fn decoder_block_golden(
    x: &[f64],
    w: &BlockWeights,
    cache: &mut KvCache,
    pos: usize,
    cfg: &ModelConfig,
) -> Result<Vec<f64>> {
    Ok(decoder_block_golden_traced(x, w, cache, pos, cfg)?.output)
}
