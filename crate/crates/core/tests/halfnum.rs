use std::collections::BTreeSet;

use half::f16;
use neoxsim::halfnum::{
    atomic_accumulate, ceil_log2, half_round, reduce, round16, ulp16, Half, Precision, ReductionStrategy,
};
use neoxsim::rng::permutation;
use proptest::prelude::*;

#[test]
fn every_bit_pattern_decodes_like_the_reference() {
    for bits in 0..=u16::MAX {
        let ours = Half::from_bits(bits).to_f64();
        let theirs = f16::from_bits(bits).to_f64();
        if theirs.is_nan() {
            assert!(ours.is_nan(), "{bits:#06x}");
            continue;
        }
        assert_eq!(ours.to_bits(), theirs.to_bits(), "{bits:#06x}");
        assert_eq!(half_round(ours).to_bits(), bits, "round trip {bits:#06x}");
    }
}

#[test]
fn boundary_values() {
    // Midpoints between adjacent halves around each binade, plus overflow edges.
    let mut xs = vec![65504.0, 65520.0, -65520.0, 2049.0, 2051.0, 2.9802322387695312e-8];
    for e in -25..16 {
        let p = 2f64.powi(e);
        xs.extend([p, p * (1.0 + 1.0 / 2048.0), p * (1.0 + 3.0 / 2048.0), -p * 1.5]);
    }
    for x in xs {
        // every value here is exact in f32, so from_f32 rounds once
        assert_eq!(x as f32 as f64, x);
        assert_eq!(half_round(x).to_bits(), f16::from_f32(x as f32).to_bits(), "{x:e}");
    }
}

#[test]
fn just_below_overflow_threshold() {
    // The overflow threshold is MAX + ulp/2 = 65520; anything below rounds to MAX.
    let threshold = 65504.0 + 16.0;
    assert_eq!(half_round(threshold - 1e-3), Half::MAX);
    assert_eq!(half_round(f64::from_bits(threshold.to_bits() - 1)), Half::MAX);
    assert_eq!(half_round(threshold), Half::INFINITY);
}

// Operands are f32 values, and a sum of two halves is exact in f32.
fn fold16(init: f32, ops: &[f32], order: &[usize]) -> f64 {
    let mut acc = f16::from_f32(init);
    for &i in order {
        acc = f16::from_f32(acc.to_f32() + f16::from_f32(ops[i]).to_f32());
    }
    acc.to_f64()
}

#[test]
fn atomic_outcomes_are_permutation_folds() {
    let ops = [0.3337f32, 1024.5, -1023.7];
    let init = 0.0009765f32;
    let ops64 = ops.map(f64::from);
    let orders: Vec<[usize; 3]> = vec![[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let all: BTreeSet<u64> = orders.iter().map(|o| fold16(init, &ops, o).to_bits()).collect();
    assert!(all.len() > 1, "instance should be order sensitive");
    let mut seen = BTreeSet::new();
    for seed in 0..200 {
        let got = atomic_accumulate(init as f64, &ops64, seed, Precision::Fp16);
        assert_eq!(got, fold16(init, &ops, &permutation(3, seed)));
        seen.insert(got.to_bits());
    }
    assert_eq!(seen, all);
}

#[test]
fn ring_of_eight_takes_seven_steps() {
    let v: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
    assert_eq!(reduce(&v, ReductionStrategy::Ring, Precision::Exact).unwrap().steps, 7);
    assert_eq!(reduce(&v, ReductionStrategy::Tree, Precision::Exact).unwrap().steps, 3);
    assert_eq!(
        reduce(&[], ReductionStrategy::Tree, Precision::Exact)
            .unwrap_err()
            .to_string(),
        "empty reduction"
    );
}

fn fixed_point_vectors() -> impl Strategy<Value = Vec<Vec<i64>>> {
    (1usize..40, 1usize..6)
        .prop_flat_map(|(n, len)| prop::collection::vec(prop::collection::vec(-(1i64 << 40)..(1i64 << 40), len), n))
}

proptest! {
    #[test]
    fn conversion_matches_reference(x in prop::num::f32::ANY) {
        let ours = half_round(x as f64);
        let theirs = f16::from_f32(x);
        if x.is_nan() {
            prop_assert!(ours.is_nan());
        } else {
            prop_assert_eq!(ours.to_bits(), theirs.to_bits());
        }
    }

    #[test]
    fn conversion_matches_reference_in_range(x in -70000.0f32..70000.0) {
        prop_assert_eq!(half_round(x as f64).to_bits(), f16::from_f32(x).to_bits());
    }

    #[test]
    fn step_counts(n in 1usize..=1024) {
        prop_assert_eq!(ReductionStrategy::Tree.steps(n), (n as f64).log2().ceil() as usize);
        prop_assert_eq!(ceil_log2(n), (n as f64).log2().ceil() as usize);
        prop_assert_eq!(ReductionStrategy::Ring.steps(n), n - 1);
    }

    #[test]
    fn exact_sums_ignore_order(ints in fixed_point_vectors(), seed in any::<u64>()) {
        let scale = 2f64.powi(-20);
        let values: Vec<Vec<f64>> = ints.iter().map(|v| v.iter().map(|&i| i as f64 * scale).collect()).collect();
        // Integer oracle: the sum is exact in i128 and representable in f64.
        let want: Vec<f64> = (0..ints[0].len())
            .map(|j| ints.iter().map(|v| v[j] as i128).sum::<i128>() as f64 * scale)
            .collect();
        for s in [ReductionStrategy::Ring, ReductionStrategy::Tree, ReductionStrategy::PermutedAtomic { seed }] {
            prop_assert_eq!(&reduce(&values, s, Precision::Exact).unwrap().sum, &want);
        }
    }

    #[test]
    fn permuted_atomic_is_reproducible(v in prop::collection::vec(-100.0f64..100.0, 1..30), seed in any::<u64>()) {
        let a = atomic_accumulate(1.0, &v, seed, Precision::Fp16);
        let b = atomic_accumulate(1.0, &v, seed, Precision::Fp16);
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn fp16_error_is_bounded(init in -8.0f64..8.0, v in prop::collection::vec(-4.0f64..4.0, 1..16), seed in any::<u64>()) {
        let exact = atomic_accumulate(init, &v, seed, Precision::Exact);
        let got = atomic_accumulate(init, &v, seed, Precision::Fp16);
        let big = 2.0 * (init.abs() + v.iter().map(|x| x.abs()).sum::<f64>());
        prop_assert!((got - exact).abs() <= (v.len() + 1) as f64 * ulp16(big));
    }

    #[test]
    fn round16_is_idempotent(x in -65504.0f64..65504.0) {
        prop_assert_eq!(round16(round16(x)), round16(x));
    }
}
