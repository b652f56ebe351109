use serde::{Deserialize, Serialize};

use super::cache::KvHead;
use super::matrix::{dot, Matrix};
use crate::{Error, Result};

/// Partial softmax-attention state over a subset of keys.
///
/// `m` is the running max logit, `l = sum exp(s_i - m)` and
/// `o = sum exp(s_i - m) v_i` (unnormalized).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxState {
    pub m: f64,
    pub l: f64,
    pub o: Vec<f64>,
}

impl SoftmaxState {
    /// State over no keys: the identity for [`merge`](Self::merge).
    pub fn empty(d: usize) -> Self {
        SoftmaxState {
            m: f64::NEG_INFINITY,
            l: 0.0,
            o: vec![0.0; d],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.l == 0.0 && self.m == f64::NEG_INFINITY
    }

    /// State over the keys of `kv`, with scores `q . k * scale`.
    pub fn over(q: &[f64], kv: KvHead<'_>, scale: f64) -> Self {
        let d = q.len();
        if kv.is_empty() {
            return Self::empty(d);
        }
        let scores: Vec<f64> = kv.keys.iter().map(|k| dot(q, k) * scale).collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut l = 0.0;
        let mut o = vec![0.0; d];
        for (s, v) in scores.iter().zip(kv.values) {
            let w = (s - m).exp();
            l += w;
            for (acc, x) in o.iter_mut().zip(v) {
                *acc += w * x;
            }
        }
        SoftmaxState { m, l, o }
    }

    /// Log-sum-exp merge: both sides are rescaled to `max(m1, m2)`.
    pub fn merge(&self, other: &SoftmaxState) -> SoftmaxState {
        if other.is_empty() {
            return self.clone();
        }
        if self.is_empty() {
            return other.clone();
        }
        let m = self.m.max(other.m);
        let a = (self.m - m).exp();
        let b = (other.m - m).exp();
        SoftmaxState {
            m,
            l: self.l * a + other.l * b,
            o: self.o.iter().zip(&other.o).map(|(x, y)| x * a + y * b).collect(),
        }
    }

    /// Rescales this state's output to a global `(m, l)`: the block's share
    /// of the final normalized attention output.
    pub fn share_of(&self, m: f64, l: f64) -> Vec<f64> {
        if self.is_empty() {
            return vec![0.0; self.o.len()];
        }
        let f = (self.m - m).exp() / l;
        self.o.iter().map(|x| x * f).collect()
    }

    pub fn finalize(&self) -> Vec<f64> {
        self.o.iter().map(|x| x / self.l).collect()
    }
}

/// Softmax attention of one query over a head's whole cache, with max
/// subtraction for stability.
pub fn attend_naive(q: &[f64], kv: KvHead<'_>, scale: f64) -> Result<Vec<f64>> {
    if kv.is_empty() {
        return Err(Error::EmptyCache);
    }
    if kv.keys.iter().chain(kv.values).any(|v| v.len() != q.len()) {
        return Err(Error::shape("cache entries do not match query length"));
    }
    let scores: Vec<f64> = kv.keys.iter().map(|k| dot(q, k) * scale).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    let mut acc = vec![0.0; q.len()];
    for (s, v) in scores.iter().zip(kv.values) {
        let w = (s - max).exp();
        denom += w;
        for (a, x) in acc.iter_mut().zip(v) {
            *a += w * x;
        }
    }
    Ok(acc.into_iter().map(|a| a / denom).collect())
}

/// Tiled (flash-style) attention for a whole prompt.
///
/// Queries are processed in row tiles of `tile`; for each query the key/value
/// sequence is swept in tiles of `tile`, each tile producing a
/// [`SoftmaxState`] folded into the running state. With `causal`, query `i`
/// sees keys `0..=i`.
pub fn prefill_attention_tiled(q: &Matrix, k: &Matrix, v: &Matrix, tile: usize, causal: bool) -> Result<Matrix> {
    if tile == 0 {
        return Err(Error::shape("tile size must be at least 1"));
    }
    let (seq, d) = (q.rows, q.cols);
    if seq == 0 {
        return Err(Error::shape("empty sequence"));
    }
    if (k.rows, k.cols) != (seq, d) || (v.rows, v.cols) != (seq, d) {
        return Err(Error::shape(format!(
            "Q {seq}x{d}, K {}x{}, V {}x{}",
            k.rows, k.cols, v.rows, v.cols
        )));
    }
    let keys: Vec<Vec<f64>> = (0..seq).map(|r| k.row(r).to_vec()).collect();
    let values: Vec<Vec<f64>> = (0..seq).map(|r| v.row(r).to_vec()).collect();
    let kv = KvHead {
        keys: &keys,
        values: &values,
    };
    let scale = 1.0 / (d as f64).sqrt();

    let mut out = Matrix::zeros(seq, d);
    for q_start in (0..seq).step_by(tile) {
        for i in q_start..(q_start + tile).min(seq) {
            let visible = if causal { i + 1 } else { seq };
            let mut state = SoftmaxState::empty(d);
            for kv_start in (0..visible).step_by(tile) {
                let kv_end = (kv_start + tile).min(visible);
                let part = SoftmaxState::over(q.row(i), kv.slice(kv_start..kv_end), scale);
                state = state.merge(&part);
            }
            out.row_mut(i).copy_from_slice(&state.finalize());
        }
    }
    Ok(out)
}
