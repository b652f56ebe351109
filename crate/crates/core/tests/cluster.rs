use neoxsim::cluster::{
    attend_split, fused_block_step, merge_states, output_project_atomic, partition_kv, ClusterSpec, ExecTrace,
    ELEM_BYTES,
};
use neoxsim::halfnum::{ulp16, Precision, ReductionStrategy};
use neoxsim::neox::{
    attend_naive, decoder_block_golden, BlockWeights, KvCache, KvHead, Matrix, ModelConfig, SoftmaxState,
};
use neoxsim::plan::{FusionPlan, Operator, PlanPreset};
use neoxsim::rng::Stream;
use proptest::prelude::*;

fn cache(len: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
    let mut s = Stream::new(seed);
    let keys = (0..len).map(|_| s.signed_vec(d, 1.5)).collect();
    let values = (0..len).map(|_| s.signed_vec(d, 1.5)).collect();
    (keys, values, s.signed_vec(d, 1.5))
}

/// Runs `steps` decode steps through both paths and returns the last outputs.
fn run_both(
    cfg: &ModelConfig,
    spec: &ClusterSpec,
    plan: &FusionPlan,
    seed: u64,
    steps: usize,
) -> (Vec<f64>, Vec<f64>, ExecTrace) {
    let w = BlockWeights::synthetic(cfg, seed);
    let mut s = Stream::new(seed ^ 0xABCD);
    let mut golden_cache = KvCache::new(cfg.n_heads, cfg.d_head);
    let mut fused_cache = KvCache::new(cfg.n_heads, cfg.d_head);
    let mut last = (vec![], vec![], ExecTrace::default());
    for pos in 0..steps {
        let x = s.signed_vec(cfg.hidden, 1.0);
        let g = decoder_block_golden(&x, &w, &mut golden_cache, pos, cfg).unwrap();
        let (f, t) = fused_block_step(&x, &w, &mut fused_cache, pos, cfg, spec, plan).unwrap();
        last = (g, f, t);
    }
    last
}

fn all_plans() -> Vec<FusionPlan> {
    let mut plans: Vec<FusionPlan> = PlanPreset::ALL.iter().map(|p| p.plan(false)).collect();
    // every contiguous grouping of the pipeline: 2^6 ways to cut it
    for mask in 0u32..64 {
        let mut groups = vec![vec![Operator::PIPELINE[0]]];
        for (i, &op) in Operator::PIPELINE[1..].iter().enumerate() {
            if mask & (1 << i) != 0 {
                groups.push(vec![op]);
            } else {
                groups.last_mut().unwrap().push(op);
            }
        }
        plans.push(FusionPlan::from_groups(groups, false).unwrap());
    }
    plans
}

#[test]
fn fused_step_matches_golden_under_exact_accumulation() {
    let cfg = ModelConfig::tiny();
    for parallel in [true, false] {
        let cfg = ModelConfig {
            parallel_residual: parallel,
            ..cfg.clone()
        };
        for n_blocks in [1, 2, 3, 4, 8] {
            let spec = ClusterSpec::new(n_blocks);
            let (g, f, _) = run_both(&cfg, &spec, &FusionPlan::fused(false), 21, 11);
            let err = g.iter().zip(&f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "parallel={parallel} n_blocks={n_blocks}: {err:e}");
        }
    }
}

#[test]
fn numerics_do_not_depend_on_plan() {
    let cfg = ModelConfig::tiny();
    let spec = ClusterSpec::new(4).with_precision(Precision::Fp16).with_seed(5);
    let reference = run_both(&cfg, &spec, &FusionPlan::fused(false), 2, 6).1;
    for plan in all_plans() {
        assert_eq!(run_both(&cfg, &spec, &plan, 2, 6).1, reference);
    }
}

#[test]
fn trace_bytes_follow_boundary_rules() {
    // Oracle: enumerate the tensors crossing each kernel boundary by hand.
    let cfg = ModelConfig::tiny();
    let (h, m) = (cfg.hidden, cfg.d_mlp);
    let out = [h, 3 * h, h, h, h, m, h];
    let weights = [2 * h, 3 * h * h + 3 * h, 0, h * h + h, 2 * h, m * h + m, h * m + h];
    let steps = 5;
    for plan in all_plans() {
        let (_, _, trace) = run_both(&cfg, &ClusterSpec::new(2), &plan, 8, steps);
        assert_eq!(trace.kernel_count, plan.kernel_count());
        for (k, rec) in plan.kernels.iter().zip(&trace.kernels) {
            let first = k.first().index();
            let input = if first == 0 { h } else { out[first - 1] };
            let mut elems = input + out[k.last().index()];
            elems += k.ops.iter().map(|o| weights[o.index()]).sum::<usize>();
            if k.contains(Operator::QkvRope) {
                elems += 2 * h;
            }
            if k.contains(Operator::Attend) {
                elems += 2 * steps * h;
            }
            assert_eq!(rec.bytes_offchip, (elems * ELEM_BYTES) as u64, "{}", rec.name);
            assert_eq!(rec.name, k.name());

            let analytic = k.traffic(&cfg, steps as f64);
            assert_eq!(rec.bytes_offchip as f64, analytic.offchip() * ELEM_BYTES as f64);
        }
    }
}

#[test]
fn fusion_never_adds_offchip_traffic() {
    let cfg = ModelConfig::tiny();
    let spec = ClusterSpec::new(4);
    for plan in all_plans() {
        let before = run_both(&cfg, &spec, &plan, 3, 4).2;
        for i in 0..plan.kernel_count().saturating_sub(1) {
            let merged = plan.merge_adjacent(i).unwrap();
            let after = run_both(&cfg, &spec, &merged, 3, 4).2;
            let boundary = plan.kernels[i].last();
            let saved = (2 * boundary.output_elems(&cfg) * ELEM_BYTES) as u64;
            assert_eq!(before.bytes_offchip - after.bytes_offchip, saved);
            assert!(after.bytes_onchip >= before.bytes_onchip);
        }
    }
}

#[test]
fn sync_steps_and_exchanges() {
    let cfg = ModelConfig::tiny();
    for (n, strategy, steps) in [
        (4, ReductionStrategy::Tree, 2),
        (8, ReductionStrategy::Tree, 3),
        (4, ReductionStrategy::Ring, 3),
        (3, ReductionStrategy::Tree, 2), // falls back to a ring
        (1, ReductionStrategy::Tree, 0),
    ] {
        let spec = ClusterSpec::new(n).with_reduction(strategy);
        let (_, _, t) = run_both(&cfg, &spec, &FusionPlan::fused(false), 1, 12);
        assert_eq!(t.sync_steps, steps, "{n} {strategy:?}");
        assert_eq!(t.dsmem_exchanges, (cfg.n_heads * (n - 1)) as u64);
    }
}

#[test]
fn single_block_is_seed_invariant() {
    let cfg = ModelConfig::tiny();
    let spec = ClusterSpec::new(1).with_precision(Precision::Fp16);
    let a = run_both(&cfg, &spec.clone().with_seed(1), &FusionPlan::fused(true), 4, 7).1;
    for seed in 2..20 {
        assert_eq!(
            run_both(&cfg, &spec.clone().with_seed(seed), &FusionPlan::fused(true), 4, 7).1,
            a
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_attention_matches_naive(len in 1usize..300, n_blocks in 1usize..17, seed in any::<u64>(), ring in any::<bool>()) {
        let (keys, values, q) = cache(len, 16, seed);
        let kv = KvHead { keys: &keys, values: &values };
        let strategy = if ring { ReductionStrategy::Ring } else { ReductionStrategy::Tree };
        let spec = ClusterSpec::new(n_blocks).with_reduction(strategy);
        let (got, _) = attend_split(&q, kv, 0.25, &spec).unwrap();
        let want = attend_naive(&q, kv, 0.25).unwrap();
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn partitions_are_balanced(len in 0usize..5000, n in 1usize..64) {
        let parts = partition_kv(len, n);
        prop_assert_eq!(parts.len(), n);
        prop_assert_eq!(parts[0].start, 0);
        prop_assert_eq!(parts[n - 1].end, len);
        for w in parts.windows(2) {
            prop_assert_eq!(w[0].end, w[1].start);
            prop_assert!(w[0].len() >= w[1].len());
        }
        prop_assert!(parts[0].len() - parts[n - 1].len() <= 1);
    }

    #[test]
    fn fp16_atomics_stay_within_rounding_bound(seed in any::<u64>(), n_blocks in 1usize..9, atomic in any::<u64>()) {
        let mut s = Stream::new(seed);
        let (rows, cols) = (6, 5);
        let w = Matrix::from_vec(rows, cols, s.signed_vec(rows * cols, 1.0)).unwrap();
        let partials: Vec<Vec<f64>> = (0..n_blocks).map(|_| s.signed_vec(cols, 1.0)).collect();
        let (b, r) = (s.signed_vec(rows, 0.1), s.signed_vec(rows, 4.0));
        let spec = ClusterSpec::new(n_blocks).with_seed(atomic);
        let exact = output_project_atomic(&partials, &w, &b, &r, &spec).unwrap();
        let half = output_project_atomic(&partials, &w, &b, &r, &spec.clone().with_precision(Precision::Fp16)).unwrap();
        for e in 0..rows {
            let contrib: Vec<f64> = partials.iter().map(|p| (0..cols).map(|c| w.get(e, c) * p[c]).sum::<f64>()).collect();
            let big = 2.0 * ((r[e] + b[e]).abs() + contrib.iter().map(|c| c.abs()).sum::<f64>());
            prop_assert!((exact[e] - half[e]).abs() <= (n_blocks + 1) as f64 * ulp16(big));
        }
    }

    #[test]
    fn exact_merge_ignores_order(len in 1usize..200, n in 1usize..17, seed in any::<u64>(), perm in any::<u64>()) {
        let (keys, values, q) = cache(len, 8, seed);
        let kv = KvHead { keys: &keys, values: &values };
        let states: Vec<SoftmaxState> = partition_kv(len, n).into_iter().map(|r| SoftmaxState::over(&q, kv.slice(r), 0.3)).collect();
        let (reference, _) = merge_states(&states, ReductionStrategy::Ring, Precision::Exact).unwrap();
        for strategy in [ReductionStrategy::Tree, ReductionStrategy::PermutedAtomic { seed: perm }] {
            let (got, _) = merge_states(&states, strategy, Precision::Exact).unwrap();
            prop_assert_eq!(&got, &reference);
        }
    }
}
