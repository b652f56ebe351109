//! Reference (unfused, f64) GPT-NeoX decoder block.
//!
//! Everything the simulator computes is checked against this module.

mod attention;
mod block;
mod cache;
mod config;
mod matrix;
mod ops;
mod weights;

pub use attention::{attend_naive, prefill_attention_tiled, SoftmaxState};
pub(crate) use block::{check_step, project_and_cache};
pub use block::{decoder_block_golden, decoder_block_golden_traced, BlockTrace};
pub use cache::{KvCache, KvHead};
pub use config::{ModelConfig, PRESET_NAMES};
pub use matrix::{dot, Matrix};
pub use ops::{
    gelu_exact, gelu_tanh, layernorm_single_pass, layernorm_two_pass, mlp, mlp_up, output_projection, qkv_project,
    rope_partial, rope_partial_inverse, GeluVariant, HeadQkv, GELU_TANH_MAX_ERROR,
};
pub use weights::{tensor_shapes, BlockWeights, Manifest, TensorEntry, TENSOR_NAMES};
