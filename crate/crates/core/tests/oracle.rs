use proptest::prelude::*;
use vtprune_core::oracle::*;
use vtprune_core::{stats, Tensor};

/// Loop average of layers `skip..L`, entry by entry.
fn aggregate_loop(trace: &AttentionTrace, skip: usize) -> Vec<Vec<f64>> {
    let t = trace.partition.total();
    let l = trace.layers.len();
    let mut out = vec![vec![0.0; t]; t];
    for r in 0..t {
        for c in 0..t {
            let mut acc = 0.0;
            for layer in &trace.layers[skip..l] {
                acc += layer.get(r, c);
            }
            out[r][c] = acc / (l - skip) as f64;
        }
    }
    out
}

/// Column means of a row range, restricted to the visual columns.
fn block_mean(a: &[Vec<f64>], rows: std::ops::Range<usize>, n: usize) -> Vec<f64> {
    let count = rows.len() as f64;
    let mut out = vec![0.0; n];
    for c in 0..n {
        let mut acc = 0.0;
        for r in rows.clone() {
            acc += a[r][c];
        }
        out[c] = acc / count;
    }
    out
}

fn check_against_loops(trace: &AttentionTrace, skip: usize) -> f64 {
    let p = &trace.partition;
    let n = p.n_visual;
    let want = aggregate_loop(trace, skip);
    let got = aggregate_attention(trace, skip).unwrap();
    let mut worst: f64 = 0.0;
    for (r, row) in want.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            worst = worst.max((got.get(r, c) - v).abs());
        }
    }
    let target = extract_target(&got, p, skip).unwrap();
    let a_self = block_mean(&want, 0..n, n);
    let a_prompt = block_mean(&want, n..n + p.n_prompt, n);
    let a_text = block_mean(&want, n + p.n_prompt..p.total(), n);
    for i in 0..n {
        let a = a_self[i] + a_prompt[i] + a_text[i];
        for (x, y) in [
            (target.a_self[i], a_self[i]),
            (target.a_prompt[i], a_prompt[i]),
            (target.a_text[i], a_text[i]),
            (target.a[i], a),
        ] {
            worst = worst.max((x - y).abs());
        }
        assert_eq!(
            target.a[i],
            target.a_self[i] + target.a_prompt[i] + target.a_text[i]
        );
    }
    worst
}

#[test]
fn aggregation_matches_loops_on_random_traces() {
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let n = 1 + (seed % 7) as usize;
        let mp = 1 + (seed % 3) as usize;
        let mc = 1 + (seed % 2) as usize;
        let l = 3 + (seed % 6) as usize;
        let p = TokenPartition::new(n, mp, mc).unwrap();
        assert!(p.total() <= 12 && l <= 8);
        let trace = generate_trace(p, l, 0.5, 0.3, seed).unwrap();
        for skip in 0..l {
            worst = worst.max(check_against_loops(&trace, skip));
        }
    }
    assert!(worst < 1e-12, "{worst}");
}

#[test]
fn five_token_trace_components_match_loops() {
    let p = TokenPartition::new(3, 1, 1).unwrap();
    let trace = generate_trace(p, 4, 0.8, 0.1, 3).unwrap();
    assert!(check_against_loops(&trace, 2) < 1e-12);
}

#[test]
fn last_layer_only_is_that_layer() {
    let p = TokenPartition::new(4, 2, 1).unwrap();
    let trace = generate_trace(p, 5, 0.8, 0.1, 3).unwrap();
    assert_eq!(aggregate_attention(&trace, 4).unwrap(), trace.layers[4]);
}

#[test]
fn extract_target_is_linear() {
    let p = TokenPartition::new(4, 2, 2).unwrap();
    let a1 = generate_trace(p, 3, 0.3, 0.2, 1).unwrap().layers[0].clone();
    let a2 = generate_trace(p, 3, 0.3, 0.2, 2).unwrap().layers[2].clone();
    let alpha = 0.3;
    let mix: Vec<f64> = a1
        .data()
        .iter()
        .zip(a2.data())
        .map(|(x, y)| alpha * x + (1.0 - alpha) * y)
        .collect();
    let mix = Tensor::new(a1.shape().to_vec(), mix).unwrap();
    let t1 = extract_target(&a1, &p, 0).unwrap();
    let t2 = extract_target(&a2, &p, 0).unwrap();
    let tm = extract_target(&mix, &p, 0).unwrap();
    for i in 0..4 {
        assert!((tm.a[i] - (alpha * t1.a[i] + (1.0 - alpha) * t2.a[i])).abs() < 1e-14);
        assert!(
            (tm.a_prompt[i] - (alpha * t1.a_prompt[i] + (1.0 - alpha) * t2.a_prompt[i])).abs()
                < 1e-14
        );
    }
}

#[test]
fn seeds_give_distinct_traces() {
    let p = TokenPartition::new(6, 2, 2).unwrap();
    let a = generate_trace(p, 4, 0.8, 0.1, 7).unwrap();
    let b = generate_trace(p, 4, 0.8, 0.1, 7).unwrap();
    let c = generate_trace(p, 4, 0.8, 0.1, 8).unwrap();
    assert_eq!(a.content_hash(), b.content_hash());
    assert_ne!(a.content_hash(), c.content_hash());
}

#[test]
fn noiseless_bias_never_helps_shallow_layers() {
    // With ε = 0, dropping the two biased layers can only improve the
    // target's ranking.
    let p = TokenPartition::new(30, 4, 6).unwrap();
    let mut with_skip = Vec::new();
    let mut without = Vec::new();
    for seed in 0..50 {
        let trace = generate_trace(p, 6, 0.6, 0.0, seed).unwrap();
        let k2 = debiased_target(&trace, 2).unwrap();
        let k0 = debiased_target(&trace, 0).unwrap();
        with_skip.push(stats::spearman(&k2.a, &trace.planted_importance));
        without.push(stats::spearman(&k0.a, &trace.planted_importance));
    }
    assert!(stats::mean(&with_skip) >= stats::mean(&without));
    assert!(with_skip.iter().all(|&r| (r - 1.0).abs() < 1e-12));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregated_rows_stay_stochastic(
        n in 1usize..8, mp in 1usize..3, mc in 1usize..3,
        l in 3usize..7, beta in 0.0f64..=1.0, noise in 0.0f64..1.0,
        seed in any::<u64>(), skip_frac in 0.0f64..1.0,
    ) {
        let p = TokenPartition::new(n, mp, mc).unwrap();
        let trace = generate_trace(p, l, beta, noise, seed).unwrap();
        prop_assert!((trace.planted_importance.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let skip = ((l as f64) * skip_frac) as usize;
        let agg = aggregate_attention(&trace, skip.min(l - 1)).unwrap();
        for r in 0..p.total() {
            let s: f64 = agg.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(agg.row(r).iter().all(|&v| v >= 0.0));
        }
        let t = extract_target(&agg, &p, skip).unwrap();
        prop_assert!(t.a.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn trace_json_roundtrip_is_exact(seed in any::<u64>(), beta in 0.0f64..=1.0) {
        let p = TokenPartition::new(3, 1, 2).unwrap();
        let trace = generate_trace(p, 3, beta, 0.4, seed).unwrap();
        let back = AttentionTrace::from_json(&trace.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, trace);
    }
}
