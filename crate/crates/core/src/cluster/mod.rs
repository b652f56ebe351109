//! Simulation of the cluster-cooperative fused decode kernel.
//!
//! The KV sequence is split across the blocks of a cluster. Each block
//! produces a partial softmax state per head, the states are merged across
//! blocks (ring or tree over simulated distributed shared memory), and every
//! block then pushes its share of the output projection into the residual
//! stream with atomic adds. The simulator returns the numeric result and an
//! [`ExecTrace`] of the data movement the plan implies.

mod trace;

pub use trace::{ExecTrace, KernelRecord};

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::halfnum::{atomic_accumulate, round16, ExactSum, Precision, ReductionStrategy};
use crate::neox::{
    self, check_step, layernorm_single_pass, mlp_up, project_and_cache, BlockWeights, KvCache, KvHead, Matrix,
    ModelConfig, SoftmaxState,
};
use crate::plan::{FusionPlan, Operator};
use crate::rng;
use crate::{Error, Result};

/// Bytes per stored activation / weight element (FP16).
pub const ELEM_BYTES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub n_blocks: usize,
    pub reduction: ReductionStrategy,
    pub accumulation_precision: Precision,
    pub atomic_seed: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        ClusterSpec {
            n_blocks: 4,
            reduction: ReductionStrategy::Tree,
            accumulation_precision: Precision::Exact,
            atomic_seed: 0,
        }
    }
}

impl ClusterSpec {
    pub fn new(n_blocks: usize) -> Self {
        ClusterSpec {
            n_blocks,
            ..Default::default()
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.accumulation_precision = precision;
        self
    }

    pub fn with_reduction(mut self, reduction: ReductionStrategy) -> Self {
        self.reduction = reduction;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.atomic_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::Config("cluster needs at least one block".into()));
        }
        Ok(())
    }

    /// The strategy actually used to merge states. A tree needs a power of
    /// two blocks; other sizes fall back to a ring.
    pub fn effective_reduction(&self) -> ReductionStrategy {
        if self.reduction == ReductionStrategy::Tree && !self.n_blocks.is_power_of_two() {
            log::warn!(
                "tree reduction over {} blocks is not a power of two; using ring",
                self.n_blocks
            );
            return ReductionStrategy::Ring;
        }
        self.reduction
    }
}

/// Balanced contiguous split of `0..seq_len` into `n_blocks` ranges; the
/// first `seq_len % n_blocks` ranges get one extra position. Ranges are
/// empty when there are more blocks than positions.
pub fn partition_kv(seq_len: usize, n_blocks: usize) -> Vec<Range<usize>> {
    let n = n_blocks.max(1);
    let (base, extra) = (seq_len / n, seq_len % n);
    let mut start = 0;
    (0..n)
        .map(|b| {
            let len = base + usize::from(b < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

fn store(state: SoftmaxState, precision: Precision) -> SoftmaxState {
    match precision {
        Precision::Exact => state,
        Precision::Fp16 => SoftmaxState {
            m: state.m,
            l: round16(state.l),
            o: state.o.into_iter().map(round16).collect(),
        },
    }
}

/// Cross-block merge of per-block states. Returns the merged state and the
/// number of dependent merge levels.
pub fn merge_states(
    states: &[SoftmaxState],
    strategy: ReductionStrategy,
    precision: Precision,
) -> Result<(SoftmaxState, usize)> {
    if states.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let steps = strategy.steps(states.len());
    if states.len() == 1 {
        return Ok((states[0].clone(), 0));
    }
    if precision == Precision::Exact {
        return Ok((merge_exact(states), steps));
    }
    let mut items: Vec<SoftmaxState> = states.iter().cloned().map(|s| store(s, precision)).collect();
    let merged = match strategy {
        ReductionStrategy::Tree => {
            while items.len() > 1 {
                let mut next = Vec::with_capacity(items.len().div_ceil(2));
                let mut it = items.into_iter();
                while let Some(a) = it.next() {
                    next.push(match it.next() {
                        Some(b) => store(a.merge(&b), precision),
                        None => a,
                    });
                }
                items = next;
            }
            items.pop().expect("non-empty")
        }
        ReductionStrategy::Ring => {
            let mut it = items.into_iter();
            let first = it.next().expect("non-empty");
            it.fold(first, |acc, s| store(acc.merge(&s), precision))
        }
        ReductionStrategy::PermutedAtomic { seed } => {
            let order = rng::permutation(items.len(), seed);
            let mut acc = items[order[0]].clone();
            for &i in &order[1..] {
                acc = store(acc.merge(&items[i]), precision);
            }
            acc
        }
    };
    Ok((merged, steps))
}

/// Every state rescaled to the global max, then summed without rounding, so
/// the result does not depend on combine order.
fn merge_exact(states: &[SoftmaxState]) -> SoftmaxState {
    let d = states[0].o.len();
    let live: Vec<&SoftmaxState> = states.iter().filter(|s| !s.is_empty()).collect();
    let Some(m) = live.iter().map(|s| s.m).reduce(f64::max) else {
        return SoftmaxState::empty(d);
    };
    let scales: Vec<f64> = live.iter().map(|s| (s.m - m).exp()).collect();
    let l = ExactSum::of(live.iter().zip(&scales).map(|(s, a)| s.l * a)).value();
    let o = (0..d)
        .map(|c| ExactSum::of(live.iter().zip(&scales).map(|(s, a)| s.o[c] * a)).value())
        .collect();
    SoftmaxState { m, l, o }
}

/// Per-block and merged states of one head.
#[derive(Debug, Clone)]
pub struct HeadSplit {
    pub block_states: Vec<SoftmaxState>,
    pub merged: SoftmaxState,
    pub steps: usize,
}

pub fn split_head(q: &[f64], kv: KvHead<'_>, scale: f64, spec: &ClusterSpec) -> Result<HeadSplit> {
    spec.validate()?;
    if kv.is_empty() {
        return Err(Error::EmptyCache);
    }
    if kv.keys.iter().chain(kv.values).any(|v| v.len() != q.len()) {
        return Err(Error::shape("cache entries do not match query length"));
    }
    let block_states: Vec<SoftmaxState> = partition_kv(kv.len(), spec.n_blocks)
        .into_iter()
        .map(|r| SoftmaxState::over(q, kv.slice(r), scale))
        .collect();
    let (merged, steps) = merge_states(&block_states, spec.effective_reduction(), spec.accumulation_precision)?;
    Ok(HeadSplit {
        block_states,
        merged,
        steps,
    })
}

/// Split-KV attention for one head. Equals [`neox::attend_naive`] up to the
/// precision of the cross-block merge.
pub fn attend_split(q: &[f64], kv: KvHead<'_>, scale: f64, spec: &ClusterSpec) -> Result<(Vec<f64>, ExecTrace)> {
    let split = split_head(q, kv, scale, spec)?;
    let d = q.len();
    let exchanges = spec.n_blocks - 1;
    let record = KernelRecord {
        name: Operator::Attend.name().into(),
        bytes_offchip: ((d + 2 * kv.len() * d + d) * ELEM_BYTES) as u64,
        bytes_onchip: (exchanges * (d + 2) * ELEM_BYTES) as u64,
        sync_steps: split.steps as u64,
        dsmem_exchanges: exchanges as u64,
    };
    Ok((split.merged.finalize(), ExecTrace::from_records(vec![record])))
}

/// Output projection with per-block atomic accumulation into the residual.
///
/// Block `b` contributes `w_out * per_block_partials[b]`. Output element `e`
/// starts as `residual[e] + b_out[e]` and receives the block contributions in
/// the order keyed by `substream(atomic_seed, e)`, under the spec's precision.
pub fn output_project_atomic(
    per_block_partials: &[Vec<f64>],
    w_out: &Matrix,
    b_out: &[f64],
    residual: &[f64],
    spec: &ClusterSpec,
) -> Result<Vec<f64>> {
    if residual.len() != w_out.rows || b_out.len() != w_out.rows {
        return Err(Error::shape(format!(
            "residual {} / bias {} for {} output rows",
            residual.len(),
            b_out.len(),
            w_out.rows
        )));
    }
    let contributions = per_block_partials
        .iter()
        .map(|p| w_out.matvec(p))
        .collect::<Result<Vec<_>>>()?;
    let mut operands = Vec::with_capacity(contributions.len());
    Ok((0..w_out.rows)
        .map(|e| {
            operands.clear();
            operands.extend(contributions.iter().map(|c| c[e]));
            atomic_accumulate(
                residual[e] + b_out[e],
                &operands,
                rng::substream(spec.atomic_seed, e as u64),
                spec.accumulation_precision,
            )
        })
        .collect())
}

/// Lengths of the tensors each operator actually consumed and produced.
#[derive(Default)]
struct Observed {
    input: [usize; 7],
    output: [usize; 7],
    weights: [usize; 7],
    kv: [usize; 7],
}

impl Observed {
    fn op(&mut self, op: Operator, input: usize, output: usize, weights: usize) {
        let i = op.index();
        self.input[i] = input;
        self.output[i] = output;
        self.weights[i] = weights;
    }
}

/// One decode step executed with cluster semantics under `plan`.
///
/// Attention is split across `spec.n_blocks` blocks and merged with
/// `spec.reduction`; the output projection is accumulated atomically. Both
/// LayerNorms use the single-pass formulation. The numeric result does not
/// depend on `plan`; the trace does.
pub fn fused_block_step(
    x: &[f64],
    w: &BlockWeights,
    cache: &mut KvCache,
    pos: usize,
    cfg: &ModelConfig,
    spec: &ClusterSpec,
    plan: &FusionPlan,
) -> Result<(Vec<f64>, ExecTrace)> {
    plan.validate()?;
    spec.validate()?;
    check_step(x, cache, pos, cfg)?;
    w.validate(cfg)?;
    let precision = spec.accumulation_precision;
    let mut seen = Observed::default();

    let ln1 = layernorm_single_pass(x, &w.ln1_gain, &w.ln1_bias, cfg.ln_eps)?;
    seen.op(Operator::PreLn, x.len(), ln1.len(), 2 * w.ln1_gain.len());

    let heads = project_and_cache(&ln1, w, cache, pos, cfg)?;
    let qkv_len: usize = heads.iter().map(|h| h.q.len() + h.k.len() + h.v.len()).sum();
    seen.op(
        Operator::QkvRope,
        ln1.len(),
        qkv_len,
        w.qkv_weight.data.len() + w.qkv_bias.len(),
    );
    seen.kv[Operator::QkvRope.index()] = heads.iter().map(|h| h.k.len() + h.v.len()).sum();

    let scale = cfg.attn_scale();
    let mut splits = Vec::with_capacity(cfg.n_heads);
    let mut kv_read = 0;
    for (h, qkv) in heads.iter().enumerate() {
        let kv = cache.head(h);
        kv_read += kv.keys.iter().chain(kv.values).map(Vec::len).sum::<usize>();
        splits.push(split_head(&qkv.q, kv, scale, spec)?);
    }
    seen.kv[Operator::Attend.index()] = kv_read;
    let sync_steps = splits.iter().map(|s| s.steps).max().unwrap_or(0);
    let exchanges = cfg.n_heads * (spec.n_blocks - 1);
    let exchange_bytes = exchanges * (cfg.d_head + 2) * ELEM_BYTES;

    // Block b's share of the normalized context, all heads concatenated.
    let partials: Vec<Vec<f64>> = (0..spec.n_blocks)
        .map(|b| {
            splits
                .iter()
                .flat_map(|s| s.block_states[b].share_of(s.merged.m, s.merged.l))
                .collect()
        })
        .collect();
    seen.op(Operator::Attend, qkv_len, cfg.hidden, 0);

    let attn_acc = output_project_atomic(&partials, &w.out_weight, &w.out_bias, x, spec)?;
    seen.op(
        Operator::OutProj,
        cfg.hidden,
        attn_acc.len(),
        w.out_weight.data.len() + w.out_bias.len(),
    );

    // attn_acc already holds x + attention branch.
    let mlp_in: &[f64] = if cfg.parallel_residual { x } else { &attn_acc };
    let ln2 = layernorm_single_pass(mlp_in, &w.ln2_gain, &w.ln2_bias, cfg.ln_eps)?;
    seen.op(Operator::PostLn, attn_acc.len(), ln2.len(), 2 * w.ln2_gain.len());

    let act: Vec<f64> = mlp_up(&ln2, w)?.into_iter().map(|u| cfg.gelu.apply(u)).collect();
    seen.op(
        Operator::MlpUpGelu,
        ln2.len(),
        act.len(),
        w.up_weight.data.len() + w.up_bias.len(),
    );

    let mlp_out = w.down_weight.affine(&act, &w.down_bias)?;
    let output: Vec<f64> = attn_acc
        .iter()
        .zip(&mlp_out)
        .map(|(a, m)| match precision {
            Precision::Exact => a + m,
            Precision::Fp16 => round16(a + m),
        })
        .collect();
    seen.op(
        Operator::MlpDown,
        act.len(),
        output.len(),
        w.down_weight.data.len() + w.down_bias.len(),
    );

    let records = plan
        .kernels
        .iter()
        .map(|k| {
            let first = k.first().index();
            let last = k.last().index();
            let mut offchip = seen.input[first] + seen.output[last];
            let mut onchip: usize = k.ops[..k.ops.len() - 1]
                .iter()
                .map(|o| 2 * seen.output[o.index()])
                .sum();
            offchip += k
                .ops
                .iter()
                .map(|o| seen.weights[o.index()] + seen.kv[o.index()])
                .sum::<usize>();
            let attends = k.contains(Operator::Attend);
            if attends {
                onchip += exchange_bytes / ELEM_BYTES;
            }
            KernelRecord {
                name: k.name(),
                bytes_offchip: (offchip * ELEM_BYTES) as u64,
                bytes_onchip: (onchip * ELEM_BYTES) as u64,
                sync_steps: if attends { sync_steps as u64 } else { 0 },
                dsmem_exchanges: if attends { exchanges as u64 } else { 0 },
            }
        })
        .collect();

    Ok((output, ExecTrace::from_records(records)))
}

/// Convenience: golden and fused outputs for the same step on cloned caches.
pub fn compare_step(
    x: &[f64],
    w: &BlockWeights,
    cache: &KvCache,
    pos: usize,
    cfg: &ModelConfig,
    spec: &ClusterSpec,
    plan: &FusionPlan,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let golden = neox::decoder_block_golden(x, w, &mut cache.clone(), pos, cfg)?;
    let (fused, _) = fused_block_step(x, w, &mut cache.clone(), pos, cfg, spec, plan)?;
    Ok((golden, fused))
}
