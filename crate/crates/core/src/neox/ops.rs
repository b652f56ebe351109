use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::weights::BlockWeights;
use crate::{Error, Result};

fn check_ln_args(x: &[f64], gain: &[f64], bias: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::shape("layernorm of an empty vector"));
    }
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(Error::shape(format!(
            "layernorm over {} values with gain {} / bias {}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(())
}

fn ln_apply(x: &[f64], mean: f64, var: f64, eps: f64, gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let inv = 1.0 / (var + eps).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect()
}

/// LayerNorm with the mean and the (population) variance each taking a pass.
pub fn layernorm_two_pass(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_ln_args(x, gain, bias)?;
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(ln_apply(x, mean, var, eps, gain, bias))
}

/// LayerNorm accumulating `sum x` and `sum x^2` in one sweep,
/// `Var = E[x^2] - E[x]^2`. The variance is clamped at zero since the
/// subtraction can cancel to a small negative number.
pub fn layernorm_single_pass(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_ln_args(x, gain, bias)?;
    let n = x.len() as f64;
    let (s1, s2) = x.iter().fold((0.0, 0.0), |(s1, s2), v| (s1 + v, s2 + v * v));
    let mean = s1 / n;
    let var = (s2 / n - mean * mean).max(0.0);
    Ok(ln_apply(x, mean, var, eps, gain, bias))
}

/// One head's projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadQkv {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

/// QKV projection over the interleaved per-head weight layout.
pub fn qkv_project(x_normed: &[f64], w: &BlockWeights, cfg: &ModelConfig) -> Result<Vec<HeadQkv>> {
    let d = cfg.d_head;
    if w.qkv_weight.rows != 3 * cfg.n_heads * d || w.qkv_bias.len() != w.qkv_weight.rows {
        return Err(Error::shape(format!(
            "qkv weight has {} rows / bias {}, expected {}",
            w.qkv_weight.rows,
            w.qkv_bias.len(),
            3 * cfg.n_heads * d
        )));
    }
    let y = w.qkv_weight.affine(x_normed, &w.qkv_bias)?;
    Ok(y.chunks_exact(3 * d)
        .map(|head| HeadQkv {
            q: head[..d].to_vec(),
            k: head[d..2 * d].to_vec(),
            v: head[2 * d..].to_vec(),
        })
        .collect())
}

fn rope_rotate(v: &[f64], pos: usize, rotary_dims: usize, theta_base: f64, sign: f64) -> Result<Vec<f64>> {
    if !rotary_dims.is_multiple_of(2) {
        return Err(Error::OddRotary(rotary_dims));
    }
    if rotary_dims > v.len() {
        return Err(Error::shape(format!(
            "rotary dims {rotary_dims} exceed head dim {}",
            v.len()
        )));
    }
    let half = rotary_dims / 2;
    let mut out = v.to_vec();
    for i in 0..half {
        let inv_freq = theta_base.powf(-2.0 * i as f64 / rotary_dims as f64);
        let (sin, cos) = (sign * pos as f64 * inv_freq).sin_cos();
        let (a, b) = (v[i], v[i + half]);
        out[i] = a * cos - b * sin;
        out[i + half] = b * cos + a * sin;
    }
    Ok(out)
}

/// Partial rotary embedding, GPT-NeoX half-split pairing.
///
/// Dims `i` and `i + rotary_dims/2` (for `i < rotary_dims/2`) rotate by
/// `pos * theta_base^(-2i/rotary_dims)`; dims at and past `rotary_dims`
/// are copied through untouched.
pub fn rope_partial(v: &[f64], pos: usize, rotary_dims: usize, theta_base: f64) -> Result<Vec<f64>> {
    rope_rotate(v, pos, rotary_dims, theta_base, 1.0)
}

/// Inverse of [`rope_partial`] at the same position.
pub fn rope_partial_inverse(v: &[f64], pos: usize, rotary_dims: usize, theta_base: f64) -> Result<Vec<f64>> {
    rope_rotate(v, pos, rotary_dims, theta_base, -1.0)
}

/// `x * Phi(x)`.
pub fn gelu_exact(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// The tanh approximation used by fast GPU kernels.
pub fn gelu_tanh(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Maximum of `|gelu_tanh - gelu_exact|` over `[-8, 8]` on a 1e-4 grid,
/// recorded from a dense sweep (see the `gelu_bound` test).
pub const GELU_TANH_MAX_ERROR: f64 = 4.732_355_193e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeluVariant {
    #[default]
    Exact,
    Tanh,
}

impl GeluVariant {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            GeluVariant::Exact => gelu_exact(x),
            GeluVariant::Tanh => gelu_tanh(x),
        }
    }
}

/// Pre-activation of the MLP: `up * x + b_up`.
pub fn mlp_up(x_normed: &[f64], w: &BlockWeights) -> Result<Vec<f64>> {
    w.up_weight.affine(x_normed, &w.up_bias)
}

/// `down * gelu(up * x + b_up) + b_down`.
pub fn mlp(x_normed: &[f64], w: &BlockWeights, gelu: GeluVariant) -> Result<Vec<f64>> {
    let act: Vec<f64> = mlp_up(x_normed, w)?.into_iter().map(|u| gelu.apply(u)).collect();
    w.down_weight.affine(&act, &w.down_bias)
}

/// `out * context + b_out`.
pub fn output_projection(context: &[f64], w: &BlockWeights) -> Result<Vec<f64>> {
    w.out_weight.affine(context, &w.out_bias)
}
