#![allow(clippy::needless_range_loop)]
use neoxsim::neox::{
    attend_naive, gelu_exact, gelu_tanh, layernorm_single_pass, layernorm_two_pass, prefill_attention_tiled,
    qkv_project, rope_partial, rope_partial_inverse, BlockWeights, KvHead, Matrix, ModelConfig, GELU_TANH_MAX_ERROR,
};
use neoxsim::rng::Stream;
use proptest::prelude::*;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn qkv_layout_is_interleaved_per_head() {
    let cfg = ModelConfig {
        hidden: 12,
        n_heads: 3,
        d_head: 4,
        ..ModelConfig::tiny()
    };
    let w = BlockWeights::synthetic(&cfg, 3);
    let x = Stream::new(9).signed_vec(cfg.hidden, 1.0);
    let heads = qkv_project(&x, &w, &cfg).unwrap();

    // Oracle: view the fused weight as [head][q|k|v][dim][col] and contract by hand.
    let d = cfg.d_head;
    let proj = |head: usize, which: usize| -> Vec<f64> {
        (0..d)
            .map(|i| {
                let row = head * 3 * d + which * d + i;
                let mut acc = w.qkv_bias[row];
                for c in 0..cfg.hidden {
                    acc += w.qkv_weight.data[row * cfg.hidden + c] * x[c];
                }
                acc
            })
            .collect()
    };
    assert_eq!(heads.len(), 3);
    for (h, got) in heads.iter().enumerate() {
        assert!(close(&got.q, &proj(h, 0), 1e-12));
        assert!(close(&got.k, &proj(h, 1), 1e-12));
        assert!(close(&got.v, &proj(h, 2), 1e-12));
    }
}

#[test]
fn rope_against_complex_rotation() {
    let v = Stream::new(4).signed_vec(80, 1.0);
    let rd = 20;
    for pos in [0, 1, 7, 2047] {
        let got = rope_partial(&v, pos, rd, 10_000.0).unwrap();
        for i in 0..rd / 2 {
            let freq = 1.0 / 10_000f64.powf(i as f64 / (rd / 2) as f64);
            let (re, im) = (v[i], v[i + rd / 2]);
            let (c, s) = ((pos as f64 * freq).cos(), (pos as f64 * freq).sin());
            assert!((got[i] - (re * c - im * s)).abs() < 1e-12);
            assert!((got[i + rd / 2] - (re * s + im * c)).abs() < 1e-12);
        }
        assert_eq!(&got[rd..], &v[rd..], "pass-through dims must be untouched");
    }
    assert!(rope_partial(&v, 3, 5, 10_000.0).is_err());
}

fn naive_causal(q: &Matrix, k: &Matrix, v: &Matrix) -> Matrix {
    let (n, d) = (q.rows, q.cols);
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        let w: Vec<f64> = (0..=i)
            .map(|j| ((0..d).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() * scale).exp())
            .collect();
        let z: f64 = w.iter().sum();
        for c in 0..d {
            out.set(i, c, (0..=i).map(|j| w[j] * v.get(j, c)).sum::<f64>() / z);
        }
    }
    out
}

#[test]
fn tiled_prefill_matches_naive() {
    let mut s = Stream::new(12);
    for seq in [1, 5, 37, 128] {
        let d = 8;
        let m = |s: &mut Stream| Matrix::from_vec(seq, d, s.signed_vec(seq * d, 1.0)).unwrap();
        let (q, k, v) = (m(&mut s), m(&mut s), m(&mut s));
        let want = naive_causal(&q, &k, &v);
        for tile in [1, 3, 16, seq] {
            let got = prefill_attention_tiled(&q, &k, &v, tile, true).unwrap();
            assert!(close(&got.data, &want.data, 1e-10), "seq {seq} tile {tile}");
        }
    }
}

#[test]
fn gelu_reference_points() {
    assert_eq!(gelu_exact(0.0), 0.0);
    assert!((gelu_exact(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
    assert!((gelu_exact(-1.0) + 0.158_655_253_931_457_05).abs() < 1e-15);
    let worst = (-80_000..80_000)
        .map(|i| i as f64 * 1e-4)
        .map(|x| (gelu_exact(x) - gelu_tanh(x)).abs())
        .fold(0.0, f64::max);
    assert!(worst <= GELU_TANH_MAX_ERROR + 1e-12);
    assert!(worst > 0.99 * GELU_TANH_MAX_ERROR);
}

fn welford(x: &[f64]) -> (f64, f64) {
    let (mut mean, mut m2) = (0.0, 0.0);
    for (i, &v) in x.iter().enumerate() {
        let delta = v - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (v - mean);
    }
    (mean, m2 / x.len() as f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn two_pass_layernorm_matches_welford(x in prop::collection::vec(-50.0f64..50.0, 2..300)) {
        let ones = vec![1.0; x.len()];
        let zeros = vec![0.0; x.len()];
        let got = layernorm_two_pass(&x, &ones, &zeros, 1e-5).unwrap();
        let (mean, var) = welford(&x);
        let want: Vec<f64> = x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();
        prop_assert!(close(&got, &want, 1e-9));
    }

    #[test]
    fn single_pass_layernorm_tracks_two_pass(
        x in prop::collection::vec(-10.0f64..10.0, 2..512),
        offset in -1e4f64..1e4,
        seed in any::<u64>(),
    ) {
        let x: Vec<f64> = x.iter().map(|v| v + offset).collect();
        let mut s = Stream::new(seed);
        let gain: Vec<f64> = (0..x.len()).map(|_| 1.0 + 0.1 * s.next_signed()).collect();
        let bias = s.signed_vec(x.len(), 0.1);
        let a = layernorm_two_pass(&x, &gain, &bias, 1e-5).unwrap();
        let b = layernorm_single_pass(&x, &gain, &bias, 1e-5).unwrap();
        prop_assert!(close(&a, &b, 1e-3));
    }

    #[test]
    fn rope_inverse_round_trips(v in prop::collection::vec(-5.0f64..5.0, 16), pos in 0usize..100_000) {
        let r = rope_partial(&v, pos, 8, 10_000.0).unwrap();
        prop_assert!(close(&rope_partial_inverse(&r, pos, 8, 10_000.0).unwrap(), &v, 1e-11));
        let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>();
        prop_assert!((norm(&r) - norm(&v)).abs() < 1e-10 * norm(&v).max(1.0));
    }

    #[test]
    fn rope_scores_depend_on_offset_only(
        q in prop::collection::vec(-1.0f64..1.0, 8),
        k in prop::collection::vec(-1.0f64..1.0, 8),
        a in 0usize..500,
        b in 0usize..500,
        shift in 0usize..500,
    ) {
        let score = |i: usize, j: usize| {
            let qr = rope_partial(&q, i, 8, 10_000.0).unwrap();
            let kr = rope_partial(&k, j, 8, 10_000.0).unwrap();
            qr.iter().zip(&kr).map(|(x, y)| x * y).sum::<f64>()
        };
        prop_assert!((score(a, b) - score(a + shift, b + shift)).abs() < 1e-9);
    }

    #[test]
    fn naive_attention_is_convex_combination(seed in any::<u64>(), len in 1usize..40) {
        let mut s = Stream::new(seed);
        let keys: Vec<Vec<f64>> = (0..len).map(|_| s.signed_vec(4, 2.0)).collect();
        let values: Vec<Vec<f64>> = (0..len).map(|_| s.signed_vec(4, 2.0)).collect();
        let q = s.signed_vec(4, 2.0);
        let out = attend_naive(&q, KvHead { keys: &keys, values: &values }, 0.5).unwrap();
        for c in 0..4 {
            let lo = values.iter().map(|v| v[c]).fold(f64::INFINITY, f64::min);
            let hi = values.iter().map(|v| v[c]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out[c] >= lo - 1e-12 && out[c] <= hi + 1e-12);
        }
    }
}
