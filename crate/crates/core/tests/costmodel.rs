//! Cost-model properties, preset anchors and calibration.

use approx::assert_relative_eq;
use batchsim::costmodel::{
    calibrate, decode_entry, prefill_entry, uniform_decode_batch, Anchor, AnchorSet, PrefillSpec,
};
use batchsim::{metrics, presets, Batch, Params, ParamsF32};
use proptest::prelude::*;

fn prefill(n: u64) -> Batch {
    Batch::new(vec![prefill_entry(0, n, 0)])
}

fn all_presets() -> Vec<Params> {
    presets::preset_names().map(|n| presets::preset(n).unwrap().params).collect()
}

#[test]
fn falcon_anchor_timings() {
    let p = presets::falcon180b().params;
    let full = p.iteration_time(&prefill(4096), p.tp_degree);
    let dec = p.iteration_time(&uniform_decode_batch(32, 4096), p.tp_degree);
    assert!((1035.0..=1265.0).contains(&full), "prefill {full}");
    assert!((180.0..=220.0).contains(&dec), "decode {dec}");
}

#[test]
fn slo_table() {
    let table = [("mistral7b", 100.0, 500.0), ("yi34b", 200.0, 1000.0), ("llama2_70b", 1000.0, 5000.0), ("falcon180b", 1000.0, 5000.0)];
    for (name, strict, relaxed) in table {
        let (s, r) = metrics::slo_thresholds(&presets::preset(name).unwrap().params);
        assert_relative_eq!(s, strict, max_relative = 0.1);
        assert_relative_eq!(r, relaxed, max_relative = 0.1);
    }
}

#[test]
fn chunking_overhead_on_yi() {
    let p = presets::yi34b().params;
    let whole = p.chunked_prefill_time(4096, 4096, p.tp_degree);
    assert!(p.chunked_prefill_time(4096, 512, p.tp_degree) <= 1.25 * whole);
    assert!(p.chunked_prefill_time(4096, 2048, p.tp_degree) <= 1.05 * whole);
}

#[test]
fn naive_hybrid_blows_up_decode_latency() {
    for name in ["mistral7b", "yi34b"] {
        let p = presets::preset(name).unwrap().params;
        let decodes = uniform_decode_batch(32, 1024);
        let base = p.iteration_time(&decodes, p.tp_degree);
        let mut with_prompt = decodes.clone();
        with_prompt.push(prefill_entry(100, 4096, 0));
        let ratio = p.iteration_time(&with_prompt, p.tp_degree) / base;
        assert!((8.0..=40.0).contains(&ratio), "{name}: {ratio:.1}x");

        // a 256-token chunk keeps the iteration inside the strict SLO
        let mut with_chunk = decodes.clone();
        with_chunk.push(prefill_entry(100, 256, 0));
        let (strict, _) = metrics::slo_thresholds(&p);
        assert!(p.iteration_time(&with_chunk, p.tp_degree) <= strict, "{name}");
    }
}

#[test]
fn chunk_below_saturation_only_adds_attention() {
    // Falcon-class saturates at 512 tokens, so 32 decodes + 224 stay flat
    let p = presets::falcon180b().params;
    let decodes = uniform_decode_batch(32, 4096);
    let mut with_chunk = decodes.clone();
    with_chunk.push(prefill_entry(100, 224, 0));
    assert!(with_chunk.total_tokens <= p.saturation_tokens);
    let extra = p.iteration_time(&with_chunk, p.tp_degree) - p.iteration_time(&decodes, p.tp_degree);
    assert_relative_eq!(extra, p.attn_prefill_chunk_time(224, 0), max_relative = 1e-9);
}

// Σ attn(c_i, Σ_{j<i} c_j) − attn(P, 0) = (k − 2q) Σ_{i<j} c_i c_j
fn split_identity_holds(p: &Params, chunks: &[u64]) {
    let total: u64 = chunks.iter().sum();
    let mut prefix = 0;
    let mut summed = 0.0;
    for &c in chunks {
        summed += p.attn_prefill_chunk_time(c, prefix);
        prefix += c;
    }
    let mut cross = 0.0;
    for i in 0..chunks.len() {
        for j in i + 1..chunks.len() {
            cross += (chunks[i] * chunks[j]) as f64;
        }
    }
    let closed = (p.attn_kv_read_ms - 2.0 * p.attn_prefill_quad_ms) * cross;
    assert_relative_eq!(summed - p.attn_prefill_chunk_time(total, 0), closed, epsilon = 1e-9, max_relative = 1e-9);
}

#[test]
fn chunk_split_closed_form_over_all_small_splits() {
    let p = presets::yi34b().params;
    let step = 64;
    let n = 1024 / step;
    // compositions of 1024 into 2, 3 and 4 parts on a 64-token grid
    for a in 1..n {
        split_identity_holds(&p, &[a * step, (n - a) * step]);
        for b in 1..n - a {
            split_identity_holds(&p, &[a * step, b * step, (n - a - b) * step]);
            for c in 1..n - a - b {
                split_identity_holds(&p, &[a * step, b * step, c * step, (n - a - b - c) * step]);
            }
        }
    }
}

fn attn_over_chunks(p: &Params, prompt: u64, chunk: u64) -> f64 {
    (0..prompt).step_by(chunk as usize).map(|done| p.attn_prefill_chunk_time(chunk.min(prompt - done), done)).sum()
}

#[test]
fn chunking_overhead_shrinks_with_chunk_size() {
    for p in all_presets() {
        for prompt in (256..=4096).step_by(256) {
            let whole = p.chunked_prefill_time(prompt, prompt, p.tp_degree);
            let mut last_attn = f64::INFINITY;
            let mut last_even = f64::INFINITY;
            for chunk in (256..=prompt).step_by(256) {
                let t = p.chunked_prefill_time(prompt, chunk, p.tp_degree);
                assert!(t >= whole - 1e-9, "{} {prompt}/{chunk}", p.name);
                // re-reads fall strictly as chunks grow
                let attn = attn_over_chunks(&p, prompt, chunk);
                assert!(chunk == 256 || attn < last_attn, "{} {prompt}/{chunk}", p.name);
                last_attn = attn;
                // a short tail chunk can fall under the memory floor, so total
                // time is only monotone across even splits
                if prompt % chunk == 0 {
                    assert!(t <= last_even + 1e-9, "{} {prompt}/{chunk}: {t} > {last_even}", p.name);
                    last_even = t;
                }
            }
        }
    }
}

fn preset() -> impl Strategy<Value = Params> {
    prop::sample::select(all_presets())
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn iteration_time_grows_with_tokens(
        p in preset(),
        decodes in 0u64..64,
        kv in 1u64..8192,
        chunk in 1u64..4096,
        prefix in 0u64..4096,
        more in 1u64..512,
    ) {
        let batch = |c: u64| {
            let mut b = uniform_decode_batch(decodes, kv);
            b.push(prefill_entry(999, c, prefix));
            b
        };
        let t0 = p.iteration_time(&batch(chunk), p.tp_degree);
        let t1 = p.iteration_time(&batch(chunk + more), p.tp_degree);
        prop_assert!(t1 >= t0, "{} -> {}", t0, t1);
    }

    #[test]
    fn linear_time_is_flat_below_saturation(
        rate in 0.001f64..2.0,
        tiles in 1u64..8,
        a in 1u64..8,
        b in 1u64..8,
    ) {
        let p = Params::from_rates("flat", rate, tiles * 256, 1e-6, 2e-6, 1e-4, 1.0);
        let (n1, n2) = (a.min(tiles) * 256, b.min(tiles) * 256);
        prop_assert_eq!(p.linear_time(n1), p.linear_time(n2));
        prop_assert_eq!(p.sharded_linear_time(n1, 1), p.mem_floor_ms);
    }

    #[test]
    fn decode_attention_is_additive(p in preset(), kvs in prop::collection::vec(1u64..10_000, 0..40)) {
        let each: f64 = kvs.iter().map(|&k| p.attn_decode_time(&[k])).sum();
        assert_relative_eq!(p.attn_decode_time(&kvs), each, epsilon = 1e-12, max_relative = 1e-12);
    }
}

#[test]
fn linear_time_is_continuous_at_saturation() {
    for p in all_presets() {
        let s = p.saturation_tokens;
        let below = p.linear_time(s - 1);
        let at = p.linear_time(s);
        let above = p.linear_time(s + 1);
        assert_relative_eq!(at, p.mem_floor_ms, max_relative = 1e-9);
        assert!(below <= at && at <= above);
        assert!(above - below <= 2.0 * p.per_token_linear_ms + 1e-12);
    }
}

#[test]
fn single_precision_matches_double() {
    let p = presets::llama2_70b().params;
    let p32: ParamsF32 = p.cast();
    let mut b = uniform_decode_batch(16, 3000);
    b.push(prefill_entry(99, 700, 1200));
    let t64 = p.iteration_time(&b, 4);
    let t32 = p32.iteration_time(&b, 4) as f64;
    assert_relative_eq!(t32, t64, max_relative = 1e-5);
}

fn anchors_from(p: &Params) -> AnchorSet<f64> {
    let mut anchors = Vec::new();
    let mut push = |label: &str, decode_count: u64, decode_kv: u64, prefills: Vec<PrefillSpec>| {
        let mut batch: Batch = uniform_decode_batch(decode_count, decode_kv);
        for (i, s) in prefills.iter().enumerate() {
            batch.push(prefill_entry(1000 + i as u64, s.chunk, s.prefix));
        }
        anchors.push(Anchor {
            label: Some(label.to_string()),
            decode_count,
            decode_kv,
            prefills,
            observed_ms: p.iteration_time(&batch, p.tp_degree),
        });
    };
    let pf = |chunk, prefix| PrefillSpec { chunk, prefix };
    push("decode 1@512", 1, 512, vec![]);
    push("decode 8@2048", 8, 2048, vec![]);
    push("decode 32@4096", 32, 4096, vec![]);
    push("decode 64@1024", 64, 1024, vec![]);
    push("prefill 1024", 0, 0, vec![pf(1024, 0)]);
    push("prefill 2048", 0, 0, vec![pf(2048, 0)]);
    push("prefill 4096", 0, 0, vec![pf(4096, 0)]);
    push("prefill 3072", 0, 0, vec![pf(3072, 0)]);
    push("chunk 1024 after 3072", 0, 0, vec![pf(1024, 3072)]);
    push("chunk 512 after 6144", 0, 0, vec![pf(512, 6144)]);
    AnchorSet {
        name: p.name.clone(),
        tp_degree: p.tp_degree,
        pp_degree: p.pp_degree,
        tile_size: p.tile_size,
        tile_penalty_frac: p.tile_penalty_frac,
        tp_comm_ms: p.tp_comm_ms,
        pp_send_ms: p.pp_send_ms,
        anchors,
    }
}

#[test]
fn calibration_recovers_generating_parameters() {
    for p in all_presets() {
        let fit = calibrate(&anchors_from(&p)).unwrap().params;
        let close = |a: f64, b: f64, what: &str| {
            assert!((a - b).abs() <= 0.01 * b.abs().max(1e-12), "{} {what}: fitted {a} vs true {b}", p.name);
        };
        close(fit.per_token_linear_ms, p.per_token_linear_ms, "per_token_linear_ms");
        close(fit.mem_floor_ms, p.mem_floor_ms, "mem_floor_ms");
        close(fit.saturation_tokens as f64, p.saturation_tokens as f64, "saturation_tokens");
        close(fit.attn_prefill_quad_ms, p.attn_prefill_quad_ms, "attn_prefill_quad_ms");
        close(fit.attn_kv_read_ms, p.attn_kv_read_ms, "attn_kv_read_ms");
        close(fit.attn_decode_per_kv_ms, p.attn_decode_per_kv_ms, "attn_decode_per_kv_ms");
        close(fit.fixed_overhead_ms, p.fixed_overhead_ms, "fixed_overhead_ms");
    }
}

fn falcon_anchor_set() -> AnchorSet<f64> {
    let text = include_str!("../../cli/examples/falcon180b_anchors.json");
    serde_json::from_str(text).unwrap()
}

#[test]
fn calibration_reproduces_falcon_anchors() {
    let cal = calibrate(&falcon_anchor_set()).unwrap();
    for r in &cal.residuals[..2] {
        assert!(r.rel_error <= 0.10, "{}: {:.3}", r.label, r.rel_error);
    }
    assert!(cal.params.validate().is_ok());
}

#[test]
fn calibration_needs_four_anchors() {
    let mut set = falcon_anchor_set();
    set.anchors.truncate(3);
    assert!(matches!(calibrate(&set), Err(batchsim::Error::Calibration { .. })));
}

#[test]
fn calibration_names_unconstrained_parameters() {
    // decode batches alone say nothing about prefill attention
    let p = presets::yi34b().params;
    let mut set = anchors_from(&p);
    set.anchors.retain(|a| a.prefills.is_empty());
    match calibrate(&set) {
        Err(batchsim::Error::Calibration { unconstrained, .. }) => {
            assert!(unconstrained.iter().any(|n| n == "attn_prefill_quad_ms"), "{unconstrained:?}");
        }
        other => panic!("expected a calibration error, got {other:?}"),
    }
}

#[test]
fn decode_entries_attend_their_context() {
    let p = presets::mistral7b().params;
    let b = Batch::new(vec![decode_entry(0, 1000), decode_entry(1, 3000)]);
    assert_relative_eq!(p.attn_decode_time(&[1000, 3000]), p.attn_decode_per_kv_ms * 4000.0);
    assert_eq!(b.decode_kv_tokens(), 4000);
}
