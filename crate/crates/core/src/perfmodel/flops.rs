use serde::{Deserialize, Serialize};

use crate::neox::{tensor_shapes, ModelConfig};

/// Prompt length the decode-timing tables were measured after.
pub const DEFAULT_PROMPT_LEN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopCount {
    pub prefill: f64,
    pub decode: f64,
}

impl FlopCount {
    pub fn total(&self) -> f64 {
        self.prefill + self.decode
    }
}

fn non_embedding_params(cfg: &ModelConfig) -> f64 {
    let block: usize = tensor_shapes(cfg).iter().map(|s| s.iter().product::<usize>()).sum();
    // plus the final LayerNorm
    (cfg.n_layers * block + 2 * cfg.hidden) as f64
}

/// FLOPs to produce the token at `position` (number of earlier tokens).
///
/// Two per multiply-accumulate over every non-embedding weight and the
/// unembedding, plus `q.k` and `p.v` over the cache. Embedding lookups are free.
pub fn per_token_flops(cfg: &ModelConfig, position: f64) -> f64 {
    2.0 * non_embedding_params(cfg)
        + 2.0 * (cfg.vocab * cfg.hidden) as f64
        + 4.0 * (cfg.hidden * cfg.n_layers) as f64 * position
}

fn span(cfg: &ModelConfig, start: usize, len: usize) -> f64 {
    // sum of an arithmetic series: per-token cost is affine in position
    if len == 0 {
        return 0.0;
    }
    let mid = start as f64 + (len - 1) as f64 / 2.0;
    len as f64 * per_token_flops(cfg, mid)
}

pub fn flops(cfg: &ModelConfig, prompt_len: usize, decode_tokens: usize) -> FlopCount {
    FlopCount {
        prefill: span(cfg, 0, prompt_len),
        decode: span(cfg, prompt_len, decode_tokens),
    }
}

/// The prompt length in `1..=max_len` whose prefill count is closest to
/// `prefill_flops`.
pub fn calibrate_prompt_len(cfg: &ModelConfig, prefill_flops: f64, max_len: usize) -> usize {
    (1..=max_len.max(1))
        .min_by(|&a, &b| {
            let ea = (flops(cfg, a, 0).prefill - prefill_flops).abs();
            let eb = (flops(cfg, b, 0).prefill - prefill_flops).abs();
            ea.total_cmp(&eb)
        })
        .expect("non-empty range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_decode() {
        assert_eq!(flops(&ModelConfig::pythia_2_8b(), 5, 0).decode, 0.0);
    }

    #[test]
    fn series_matches_loop() {
        let cfg = ModelConfig::tiny();
        let looped: f64 = (3..3 + 17).map(|p| per_token_flops(&cfg, p as f64)).sum();
        assert_eq!(flops(&cfg, 3, 17).decode, looped);
    }

    #[test]
    fn prompt_len_recovered() {
        let cfg = ModelConfig::pythia_2_8b();
        assert_eq!(calibrate_prompt_len(&cfg, 26.48e9, 64), DEFAULT_PROMPT_LEN);
    }
}
