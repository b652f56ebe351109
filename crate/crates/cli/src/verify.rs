//! Oracle-equivalence suites behind `neoxsim verify`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use neoxsim::cluster::{attend_split, fused_block_step, ClusterSpec};
use neoxsim::fidelity::{seed_sweep, Instance, ADVERSARIAL_SEED, DEFAULT_KS};
use neoxsim::halfnum::{reduce, Precision, ReductionStrategy};
use neoxsim::neox::{
    attend_naive, decoder_block_golden, layernorm_single_pass, layernorm_two_pass, prefill_attention_tiled,
    rope_partial, rope_partial_inverse, BlockWeights, KvCache, KvHead, Matrix, ModelConfig,
};
use neoxsim::plan::FusionPlan;
use neoxsim::rng::{substream, Stream};
use neoxsim::table::{Table, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Suite {
    SplitInvariance,
    Layernorm,
    Rope,
    TiledPrefill,
    ReductionOrder,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::SplitInvariance,
        Suite::Layernorm,
        Suite::Rope,
        Suite::TiledPrefill,
        Suite::ReductionOrder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::SplitInvariance => "split_invariance",
            Suite::Layernorm => "layernorm",
            Suite::Rope => "rope",
            Suite::TiledPrefill => "tiled_prefill",
            Suite::ReductionOrder => "reduction_order",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Suite::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            let names: Vec<_> = Suite::ALL.iter().map(|x| x.name()).collect();
            format!("unknown suite {s:?} (expected one of {})", names.join(", "))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub suite: Suite,
    pub checks: usize,
    /// Largest deviation seen, in the suite's own error measure.
    pub max_error: f64,
    /// First failing check, if any.
    pub failure: Option<String>,
    pub elapsed_s: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

/// Accumulates checks for one suite.
struct Checker {
    checks: usize,
    max_error: f64,
    failure: Option<String>,
}

impl Checker {
    fn new() -> Self {
        Checker {
            checks: 0,
            max_error: 0.0,
            failure: None,
        }
    }

    fn within(&mut self, err: f64, tol: f64, what: impl FnOnce() -> String) {
        self.checks += 1;
        self.max_error = self.max_error.max(err);
        if !matches!(
            err.partial_cmp(&tol),
            Some(std::cmp::Ordering::Less | std::cmp::Ordering::Equal)
        ) && self.failure.is_none()
        {
            self.failure = Some(format!("{}: error {err:.3e} exceeds {tol:.0e}", what()));
        }
    }

    fn holds(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok && self.failure.is_none() {
            self.failure = Some(what());
        }
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Test hook: nudges the first element of a result so the suite must fail.
fn inject(v: &mut [f64], fault: bool) {
    if fault {
        if let Some(x) = v.first_mut() {
            *x += 1e-4 * x.abs().max(1.0);
        }
    }
}

pub fn run_suite(suite: Suite, seed: u64, fault: bool) -> SuiteResult {
    let start = Instant::now();
    let mut c = Checker::new();
    let seed = substream(seed, suite as u64);
    match suite {
        Suite::SplitInvariance => split_invariance(&mut c, seed, fault),
        Suite::Layernorm => layernorm(&mut c, seed, fault),
        Suite::Rope => rope(&mut c, seed, fault),
        Suite::TiledPrefill => tiled_prefill(&mut c, seed, fault),
        Suite::ReductionOrder => reduction_order(&mut c, seed, fault),
    }
    SuiteResult {
        suite,
        checks: c.checks,
        max_error: c.max_error,
        failure: c.failure,
        elapsed_s: start.elapsed().as_secs_f64(),
    }
}

/// Split-KV attention against the unsplit reference, then the whole fused
/// step against the golden block.
fn split_invariance(c: &mut Checker, seed: u64, fault: bool) {
    let mut s = Stream::new(seed);
    let d = 64;
    for case in 0..50 {
        let len = 1 + s.below(512) as usize;
        let (n_blocks, strategy) = match case % 3 {
            0 => (1 + s.below(16) as usize, ReductionStrategy::Ring),
            1 => (1 << s.below(5), ReductionStrategy::Tree),
            _ => (
                1 + s.below(16) as usize,
                ReductionStrategy::PermutedAtomic { seed: s.next_u64() },
            ),
        };
        let keys: Vec<Vec<f64>> = (0..len).map(|_| s.signed_vec(d, 2.0)).collect();
        let values: Vec<Vec<f64>> = (0..len).map(|_| s.signed_vec(d, 2.0)).collect();
        let q = s.signed_vec(d, 2.0);
        let kv = KvHead {
            keys: &keys,
            values: &values,
        };
        let spec = ClusterSpec::new(n_blocks).with_reduction(strategy);
        let scale = 1.0 / (d as f64).sqrt();
        let (mut got, _) = match attend_split(&q, kv, scale, &spec) {
            Ok(r) => r,
            Err(e) => return c.holds(false, || format!("attend_split failed: {e}")),
        };
        if case == 0 {
            inject(&mut got, fault);
        }
        let want = attend_naive(&q, kv, scale).expect("non-empty cache");
        c.within(max_abs_diff(&got, &want), 1e-10, || {
            format!("seq {len}, {n_blocks} blocks, {strategy:?}")
        });
    }

    for parallel in [true, false] {
        let cfg = ModelConfig {
            parallel_residual: parallel,
            ..ModelConfig::tiny()
        };
        let w = BlockWeights::synthetic(&cfg, s.next_u64());
        for n_blocks in [1, 2, 4, 8] {
            let spec = ClusterSpec::new(n_blocks);
            let (mut gc, mut fc) = (
                KvCache::new(cfg.n_heads, cfg.d_head),
                KvCache::new(cfg.n_heads, cfg.d_head),
            );
            let mut inputs = Stream::new(s.next_u64());
            for pos in 0..8 {
                let x = inputs.signed_vec(cfg.hidden, 1.0);
                let g = decoder_block_golden(&x, &w, &mut gc, pos, &cfg).expect("valid step");
                let f = fused_block_step(&x, &w, &mut fc, pos, &cfg, &spec, &FusionPlan::fused(false))
                    .expect("valid step")
                    .0;
                c.within(max_abs_diff(&f, &g), 1e-10, || {
                    format!("fused block, {n_blocks} blocks, parallel_residual={parallel}, pos {pos}")
                });
            }
        }
    }
}

fn layernorm(c: &mut Checker, seed: u64, fault: bool) {
    let mut s = Stream::new(seed);
    for i in 0..1000 {
        let n = 2 + s.below(2559) as usize;
        let scale = 0.1 + 20.0 * s.next_unit();
        let x = s.signed_vec(n, scale);
        let gain: Vec<f64> = (0..n).map(|_| 1.0 + 0.2 * s.next_signed()).collect();
        let bias = s.signed_vec(n, 0.2);
        let want = layernorm_two_pass(&x, &gain, &bias, 1e-5).expect("matching lengths");
        let mut got = layernorm_single_pass(&x, &gain, &bias, 1e-5).expect("matching lengths");
        if i == 0 {
            inject(&mut got, fault);
        }
        let norm = want.iter().map(|v| v.abs()).fold(0.0, f64::max);
        c.within(max_abs_diff(&got, &want) / norm, 1e-6, || {
            format!("random vector {i} (n = {n})")
        });
    }
    // Large common offset: the single-pass variance cancels catastrophically
    // long before 1e8, so stay at offsets a real activation can reach.
    for i in 0..100 {
        let n = 64 + s.below(2497) as usize;
        let offset = 1e4 * s.next_signed();
        let x: Vec<f64> = s.signed_vec(n, 1.0).into_iter().map(|v| v + offset).collect();
        let (gain, bias) = (vec![1.0; n], vec![0.0; n]);
        let want = layernorm_two_pass(&x, &gain, &bias, 1e-5).expect("matching lengths");
        let got = layernorm_single_pass(&x, &gain, &bias, 1e-5).expect("matching lengths");
        c.within(max_abs_diff(&got, &want), 1e-3, || {
            format!("offset {offset:.1} vector {i}")
        });
    }
}

fn rope(c: &mut Checker, seed: u64, fault: bool) {
    let mut s = Stream::new(seed);
    let (d, rd, theta) = (80, 20, 10_000.0);
    for i in 0..200 {
        let v = s.signed_vec(d, 3.0);
        let pos = s.below(65_536) as usize;
        let mut r = rope_partial(&v, pos, rd, theta).expect("even rotary dims");
        if i == 0 {
            inject(&mut r, fault);
        }
        for p in 0..rd / 2 {
            let freq = theta.powf(-(p as f64) / (rd / 2) as f64);
            let (sin, cos) = (pos as f64 * freq).sin_cos();
            let (re, im) = (v[p], v[p + rd / 2]);
            let want = [re * cos - im * sin, re * sin + im * cos];
            c.within(max_abs_diff(&[r[p], r[p + rd / 2]], &want), 1e-12, || {
                format!("pair {p} at pos {pos}")
            });
        }
        c.holds(r[rd..] == v[rd..], || {
            format!("pass-through slice changed at pos {pos}")
        });
        let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>();
        c.within(
            (norm(&r[..rd]) - norm(&v[..rd])).abs() / norm(&v[..rd]).max(1.0),
            1e-12,
            || format!("norm at pos {pos}"),
        );
        let back = rope_partial_inverse(&r, pos, rd, theta).expect("even rotary dims");
        c.within(max_abs_diff(&back, &v), 1e-10, || format!("inverse at pos {pos}"));

        let k = s.signed_vec(d, 1.0);
        let (a, b, shift) = (s.below(4096) as usize, s.below(4096) as usize, s.below(4096) as usize);
        let score = |i: usize, j: usize| {
            let qr = rope_partial(&v, i, rd, theta).expect("even rotary dims");
            let kr = rope_partial(&k, j, rd, theta).expect("even rotary dims");
            qr.iter().zip(&kr).map(|(x, y)| x * y).sum::<f64>()
        };
        c.within((score(a, b) - score(a + shift, b + shift)).abs(), 1e-9, || {
            format!("relative position ({a}, {b}) shifted by {shift}")
        });
    }
}

/// Causal softmax attention written out directly.
pub fn naive_causal(q: &Matrix, k: &Matrix, v: &Matrix) -> Matrix {
    let (n, d) = (q.rows, q.cols);
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        let scores: Vec<f64> = (0..=i)
            .map(|j| (0..d).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() * scale)
            .collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = scores.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = w.iter().sum();
        for c in 0..d {
            out.set(i, c, (0..=i).map(|j| w[j] * v.get(j, c)).sum::<f64>() / z);
        }
    }
    out
}

fn tiled_prefill(c: &mut Checker, seed: u64, fault: bool) {
    let mut s = Stream::new(seed);
    let mut lens = vec![1, 2, 5, 17, 64, 127, 128];
    lens.extend((0..5).map(|_| 1 + s.below(128) as usize));
    for (i, seq) in lens.into_iter().enumerate() {
        let d = [8, 16, 32][i % 3];
        let mut m = || Matrix::from_vec(seq, d, s.signed_vec(seq * d, 2.0)).expect("sized buffer");
        let (q, k, v) = (m(), m(), m());
        let want = naive_causal(&q, &k, &v);
        for tile in [1, 3, 16, seq] {
            let mut got = prefill_attention_tiled(&q, &k, &v, tile, true)
                .expect("valid shapes")
                .data;
            if i == 0 && tile == 1 {
                inject(&mut got, fault);
            }
            c.within(max_abs_diff(&got, &want.data), 1e-10, || {
                format!("seq {seq}, tile {tile}")
            });
        }
    }
}

/// Critical-path depth of a pairwise tree, counted level by level.
fn tree_levels(mut n: usize) -> usize {
    let mut levels = 0;
    while n > 1 {
        n = n.div_ceil(2);
        levels += 1;
    }
    levels
}

fn reduction_order(c: &mut Checker, seed: u64, fault: bool) {
    for n in 1..=1024 {
        let tree = ReductionStrategy::Tree.steps(n);
        let ring = ReductionStrategy::Ring.steps(n);
        c.holds(tree == tree_levels(n) && ring == n - 1, || {
            format!(
                "n = {n}: tree {tree} (want {}), ring {ring} (want {})",
                tree_levels(n),
                n - 1
            )
        });
    }

    let mut s = Stream::new(seed);
    for case in 0..40 {
        let n = 1 + s.below(64) as usize;
        let values: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mag = 10f64.powi(s.below(12) as i32 - 6);
                s.signed_vec(8, mag)
            })
            .collect();
        let reference = reduce(&values, ReductionStrategy::Ring, Precision::Exact)
            .expect("non-empty")
            .sum;
        let mut strategies = vec![ReductionStrategy::Tree];
        strategies.extend((0..8).map(|k| ReductionStrategy::PermutedAtomic { seed: k }));
        for strategy in strategies {
            let mut got = reduce(&values, strategy, Precision::Exact).expect("non-empty").sum;
            if case == 0 && strategy == ReductionStrategy::Tree {
                inject(&mut got, fault);
            }
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            c.holds(bits(&got) == bits(&reference), || {
                format!("exact sum of {n} operands differs under {strategy:?}")
            });
        }
    }

    let inst = Instance::adversarial(ADVERSARIAL_SEED);
    let spec = ClusterSpec::new(4);
    match (
        seed_sweep(
            &inst,
            &spec.clone().with_precision(Precision::Fp16),
            0..100,
            &DEFAULT_KS,
        ),
        seed_sweep(&inst, &spec, 0..100, &DEFAULT_KS),
    ) {
        (Ok(half), Ok(exact)) => {
            c.holds(half.distinct_outputs >= 2, || {
                format!(
                    "fp16 atomics gave {} distinct outputs over 100 seeds",
                    half.distinct_outputs
                )
            });
            c.holds(exact.distinct_outputs == 1, || {
                format!("exact accumulation gave {} distinct outputs", exact.distinct_outputs)
            });
        }
        (Err(e), _) | (_, Err(e)) => c.holds(false, || format!("seed sweep failed: {e}")),
    }
}

pub fn summary_table(results: &[SuiteResult]) -> Table {
    let mut t = Table::new(&["suite", "status", "checks", "max_error", "detail"]);
    for r in results {
        t.push(vec![
            Value::Text(r.suite.name().into()),
            Value::Text(if r.passed() { "pass" } else { "fail" }.into()),
            Value::Int(r.checks as i64),
            Value::Num(r.max_error),
            Value::Text(r.failure.clone().unwrap_or_default()),
        ]);
    }
    t
}
