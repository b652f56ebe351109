//! Binary16 emulation and combine-order-aware reductions.
//!
//! Cluster reductions and FP16 atomics are the only places where the fused
//! kernel's arithmetic depends on execution order. This module gives both an
//! order-sensitive half-precision path and an order-independent exact path
//! to compare it against.

mod exact;
mod half;

pub use exact::ExactSum;
pub use half::{half_round, round16, ulp16, Half};

use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

/// Order in which per-block partials are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionStrategy {
    /// Sequential pass around the blocks: `n - 1` dependent steps.
    Ring,
    /// Pairwise binary tree: `ceil(log2 n)` levels.
    Tree,
    /// Atomic adds landing in a seed-determined order.
    PermutedAtomic { seed: u64 },
}

impl ReductionStrategy {
    /// Combine steps on the critical path for `n` operands.
    pub fn steps(self, n: usize) -> usize {
        match self {
            ReductionStrategy::Tree => ceil_log2(n),
            ReductionStrategy::Ring | ReductionStrategy::PermutedAtomic { .. } => n.saturating_sub(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// Error-free accumulation, rounded once at the end.
    #[default]
    Exact,
    /// Operands and every intermediate sum rounded to binary16.
    Fp16,
}

pub fn ceil_log2(n: usize) -> usize {
    if n <= 1 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reduction {
    pub sum: Vec<f64>,
    pub steps: usize,
}

/// Elementwise sum of `values` combined in the order `strategy` prescribes.
///
/// In [`Precision::Exact`] every strategy returns the correctly rounded
/// exact sum. In [`Precision::Fp16`] operands are stored as binary16 and each
/// combine rounds.
pub fn reduce(values: &[Vec<f64>], strategy: ReductionStrategy, precision: Precision) -> Result<Reduction> {
    let first = values.first().ok_or(Error::EmptyReduction)?;
    let len = first.len();
    if let Some(bad) = values.iter().find(|v| v.len() != len) {
        return Err(Error::shape(format!(
            "reduction operand of length {} (expected {len})",
            bad.len()
        )));
    }
    let n = values.len();
    let steps = strategy.steps(n);
    let sum = match precision {
        Precision::Exact => {
            let accs: Vec<Vec<ExactSum>> = values
                .iter()
                .map(|v| v.iter().map(|&x| ExactSum::of([x])).collect())
                .collect();
            combine(accs, strategy, |a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    x.merge(y);
                }
            })
            .iter()
            .map(ExactSum::value)
            .collect()
        }
        Precision::Fp16 => {
            let halves: Vec<Vec<Half>> = values
                .iter()
                .map(|v| v.iter().map(|&x| Half::from_f64(x)).collect())
                .collect();
            combine(halves, strategy, |a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x = *x + *y;
                }
            })
            .iter()
            .map(|h| h.to_f64())
            .collect()
        }
    };
    Ok(Reduction { sum, steps })
}

/// Applies `add(acc, operand)` in the strategy's order. For
/// `PermutedAtomic` each element gets its own order, keyed by
/// `substream(seed, element index)`, so it is handled elementwise.
fn combine<T: Clone>(mut items: Vec<Vec<T>>, strategy: ReductionStrategy, add: impl Fn(&mut Vec<T>, Vec<T>)) -> Vec<T> {
    match strategy {
        ReductionStrategy::Ring => {
            let mut rest = items.drain(..);
            let mut acc = rest.next().expect("non-empty");
            for v in rest {
                add(&mut acc, v);
            }
            acc
        }
        ReductionStrategy::Tree => {
            while items.len() > 1 {
                let mut next = Vec::with_capacity(items.len().div_ceil(2));
                let mut it = items.into_iter();
                while let Some(mut a) = it.next() {
                    if let Some(b) = it.next() {
                        add(&mut a, b);
                    }
                    next.push(a);
                }
                items = next;
            }
            items.pop().expect("non-empty")
        }
        ReductionStrategy::PermutedAtomic { seed } => {
            let len = items[0].len();
            let n = items.len();
            let mut out = Vec::with_capacity(len);
            #[allow(clippy::needless_range_loop)]
            for e in 0..len {
                let order = rng::permutation(n, rng::substream(seed, e as u64));
                let mut acc = vec![items[order[0]][e].clone()];
                for &i in &order[1..] {
                    add(&mut acc, vec![items[i][e].clone()]);
                }
                out.push(acc.pop().expect("one element"));
            }
            out
        }
    }
}

/// Accumulates `operands` onto `init` in the order of the permutation keyed
/// by `seed`, as a sequence of atomic adds into one memory word would.
///
/// With [`Precision::Fp16`] the word holds a binary16 value: `init` and each
/// operand are rounded on store and each add rounds.
pub fn atomic_accumulate(init: f64, operands: &[f64], seed: u64, precision: Precision) -> f64 {
    match precision {
        Precision::Exact => {
            let mut s = ExactSum::of([init]);
            for &x in operands {
                s.add(x);
            }
            s.value()
        }
        Precision::Fp16 => {
            let order = rng::permutation(operands.len(), seed);
            let mut acc = Half::from_f64(init);
            for i in order {
                acc = acc + Half::from_f64(operands[i]);
            }
            acc.to_f64()
        }
    }
}

/// Sum of scalars in seed-permuted order; see [`atomic_accumulate`].
pub fn permuted_sum(values: &[f64], seed: u64, precision: Precision) -> f64 {
    atomic_accumulate(0.0, values, seed, precision)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_counts() {
        assert_eq!(ReductionStrategy::Ring.steps(8), 7);
        assert_eq!(ReductionStrategy::Tree.steps(8), 3);
        assert_eq!(ReductionStrategy::Tree.steps(5), 3);
        assert_eq!(ReductionStrategy::Tree.steps(1), 0);
        assert_eq!(ReductionStrategy::Ring.steps(1), 0);
    }

    #[test]
    fn reduce_reports_steps() {
        let vals: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
        let ring = reduce(&vals, ReductionStrategy::Ring, Precision::Exact).unwrap();
        let tree = reduce(&vals, ReductionStrategy::Tree, Precision::Exact).unwrap();
        assert_eq!((ring.steps, tree.steps), (7, 3));
        assert_eq!(ring.sum, vec![28.0]);
        assert_eq!(tree.sum, vec![28.0]);
    }

    #[test]
    fn single_operand_is_identity() {
        let v = vec![vec![0.1, -3.5, 1e-7]];
        for s in [
            ReductionStrategy::Ring,
            ReductionStrategy::Tree,
            ReductionStrategy::PermutedAtomic { seed: 9 },
        ] {
            let r = reduce(&v, s, Precision::Exact).unwrap();
            assert_eq!(r.sum, v[0]);
            assert_eq!(r.steps, 0);
        }
    }

    #[test]
    fn empty_and_ragged_inputs() {
        let err = reduce(&[], ReductionStrategy::Tree, Precision::Exact).unwrap_err();
        assert_eq!(err.to_string(), "empty reduction");
        let ragged = vec![vec![1.0], vec![1.0, 2.0]];
        assert!(matches!(
            reduce(&ragged, ReductionStrategy::Ring, Precision::Fp16),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn fp16_tree_and_ring_differ_on_absorption() {
        // Ring: ((1 + e) + e) + e... loses every e; tree pairs the e's first.
        let e = 2f64.powi(-11);
        let vals = vec![vec![1.0], vec![e], vec![e], vec![e]];
        let ring = reduce(&vals, ReductionStrategy::Ring, Precision::Fp16).unwrap();
        let tree = reduce(&vals, ReductionStrategy::Tree, Precision::Fp16).unwrap();
        assert_eq!(ring.sum[0], 1.0);
        assert_eq!(tree.sum[0], 1.0 + 2f64.powi(-10));
    }

    #[test]
    fn permuted_sum_zero_and_exact() {
        assert_eq!(permuted_sum(&[0.0; 5], 3, Precision::Fp16), 0.0);
        let vals = [0.1, 1e10, -1e10, 3.3];
        let reference = permuted_sum(&vals, 0, Precision::Exact);
        for seed in 1..50 {
            assert_eq!(permuted_sum(&vals, seed, Precision::Exact), reference);
        }
    }

    #[test]
    fn atomic_starts_from_init() {
        let got = atomic_accumulate(1.0, &[2f64.powi(-11), 2f64.powi(-11)], 0, Precision::Exact);
        assert_eq!(got, 1.0 + 2f64.powi(-10));
    }
}
