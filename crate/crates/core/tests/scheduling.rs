//! Policy invariants over randomized traces, checked on the event log.

use batchsim::engine::{audit, simulate, stall_free_tbt_bound, SimOptions, SimReport};
use batchsim::presets;
use batchsim::sched::{compute_token_budget, BudgetSearch};
use batchsim::{costmodel, metrics, Params, ReplicaConfig, Request, SchedulerKind};
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Case {
    trace: Vec<(u64, u64, u64)>,
    tau: u64,
    pipelined: bool,
}

fn case() -> impl Strategy<Value = Case> {
    let req = (0u64..2_000, 1u64..3_000, 1u64..40);
    (
        prop::collection::vec(req, 1..30),
        prop::sample::select(vec![256u64, 512, 768, 1024, 2048]),
        any::<bool>(),
    )
        .prop_map(|(mut trace, tau, pipelined)| {
            let mut t = 0;
            for r in &mut trace {
                // turn offsets into cumulative arrival times (ms)
                t += r.0;
                r.0 = t;
            }
            Case { trace, tau, pipelined }
        })
}

fn params(c: &Case) -> Params {
    if c.pipelined {
        presets::llama2_70b().params
    } else {
        presets::yi34b().params
    }
}

fn cfg(kind: SchedulerKind, c: &Case, p: &Params) -> ReplicaConfig {
    let mut cfg = ReplicaConfig::new(kind).with_budget(c.tau).with_parallelism(p.tp_degree, p.pp_degree);
    cfg.max_num_batched_tokens = 4096;
    cfg
}

fn run(kind: SchedulerKind, c: &Case) -> (ReplicaConfig, SimReport) {
    let p = params(c);
    let cfg = cfg(kind, c, &p);
    let trace: Vec<_> = c
        .trace
        .iter()
        .map(|&(a, pr, o)| Request::new(0, a * 1000, pr, o).unwrap())
        .collect();
    let rep = simulate(&cfg, &p, &trace, SimOptions::default()).unwrap();
    (cfg, rep)
}

proptest! {
    #![proptest_config(ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::with_cases(1000)
    })]

    #[test]
    fn stall_free_batches_keep_decodes_budget_and_cover(c in case()) {
        let (cfg, rep) = run(SchedulerKind::StallFree, &c);
        let bad = audit(&rep, &cfg);
        prop_assert!(bad.is_empty(), "{:#?}", &bad[..bad.len().min(5)]);

        let max_prompt = c.trace.iter().map(|r| r.1).max().unwrap();
        let max_ctx = c.trace.iter().map(|r| r.1 + r.2).max().unwrap();
        let bound = stall_free_tbt_bound(&params(&c), &cfg, c.trace.len() as u64, max_prompt, max_ctx);
        let worst = rep.requests.iter().flat_map(|r| r.tbt_samples()).max().unwrap_or(0);
        prop_assert!(worst <= bound, "tbt {} us > bound {} us", worst, bound);
    }
}

proptest! {
    #![proptest_config(ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::with_cases(150)
    })]

    #[test]
    fn other_policies_keep_their_invariants(c in case(), kind in prop::sample::select(vec![
        SchedulerKind::RequestLevel, SchedulerKind::Vllm, SchedulerKind::Orca, SchedulerKind::ChunkedOnly,
    ])) {
        let (cfg, rep) = run(kind, &c);
        let bad = audit(&rep, &cfg);
        prop_assert!(bad.is_empty(), "{:?}: {:#?}", kind, &bad[..bad.len().min(5)]);
    }

    #[test]
    fn runs_are_deterministic(c in case()) {
        let (_, a) = run(SchedulerKind::StallFree, &c);
        let (_, b) = run(SchedulerKind::StallFree, &c);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn stage_time_is_conserved(c in case(), kind in prop::sample::select(SchedulerKind::ALL.to_vec())) {
        let (_, rep) = run(kind, &c);
        let first_arrival = c.trace[0].0 * 1000;
        for (s, &busy) in rep.stage_busy.iter().enumerate() {
            prop_assert!(busy <= rep.makespan - first_arrival, "stage {} busy {} > span", s, busy);
        }
        for b in &rep.bubbles {
            prop_assert!(b.stage >= 1 && b.end > b.start);
        }
        let idle_downstream: u64 = rep.stage_busy.iter().skip(1).map(|&b| rep.makespan - first_arrival - b).sum();
        prop_assert!(rep.bubble_time() <= idle_downstream);
    }
}

#[test]
fn vllm_exhibits_generation_stalls() {
    // the prefill of an admitted prompt lands between two decode tokens
    let p = presets::yi34b().params;
    let ds = batchsim::workload::Dataset::preset("openchat").unwrap();
    let mut found = 0;
    for seed in 0..20 {
        let trace = batchsim::workload::to_requests(&batchsim::workload::generate_trace(&ds, 0.5, 64, seed).unwrap()).unwrap();
        let cfg = ReplicaConfig::new(SchedulerKind::Vllm).with_parallelism(p.tp_degree, 1);
        let rep = simulate(&cfg, &p, &trace, SimOptions { record_events: false }).unwrap();
        let shortest_prefill = rep
            .requests
            .iter()
            .map(|r| p.iteration_time(&batchsim::Batch::new(vec![costmodel::prefill_entry(0, r.prompt_tokens, 0)]), p.tp_degree))
            .fold(f64::INFINITY, f64::min);
        let worst = rep.requests.iter().flat_map(|r| r.tbt_samples()).max().unwrap() as f64 / 1000.0;
        if worst >= shortest_prefill {
            found += 1;
        }
    }
    assert!(found > 0);
}

#[test]
fn stall_free_bubbles_stay_below_vllm_with_pipelining() {
    let p = presets::llama2_70b().params;
    let ds = batchsim::workload::Dataset::preset("arxiv").unwrap();
    for seed in 0..3 {
        let trace = batchsim::workload::to_requests(&batchsim::workload::generate_trace(&ds, 0.15, 128, seed).unwrap()).unwrap();
        let frac = |kind| {
            let cfg = ReplicaConfig::new(kind).with_budget(1536).with_parallelism(p.tp_degree, p.pp_degree);
            let mut cfg = cfg;
            cfg.max_num_batched_tokens = ds.max_total;
            simulate(&cfg, &p, &trace, SimOptions { record_events: false }).unwrap().bubble_fraction()
        };
        let (sf, vl) = (frac(SchedulerKind::StallFree), frac(SchedulerKind::Vllm));
        assert!(sf < vl, "seed {seed}: stall_free {sf:.4} vs vllm {vl:.4}");
    }
}

fn budget(p: &Params, slo: metrics::SloMode, pp: u64) -> u64 {
    let decodes = costmodel::reference_decode_batch();
    compute_token_budget(slo.resolve(p), p, p.tp_degree, pp, &decodes, BudgetSearch::default()).unwrap()
}

#[test]
fn budget_examples() {
    let yi = presets::yi34b().params;
    let strict = budget(&yi, metrics::SloMode::Strict, 1);
    let relaxed = budget(&yi, metrics::SloMode::Relaxed, 1);
    assert!((384..=640).contains(&strict), "strict {strict}");
    assert!(relaxed >= 1536, "relaxed {relaxed}");

    let llama = presets::llama2_70b().params;
    let pp1 = budget(&llama, metrics::SloMode::Relaxed, 1);
    let pp2 = budget(&llama, metrics::SloMode::Relaxed, 2);
    assert!(pp2 < pp1, "pp2 {pp2} vs pp1 {pp1}");
}

#[test]
fn budget_is_monotone_in_slo() {
    let yi = presets::yi34b().params;
    let decodes = costmodel::reference_decode_batch();
    let mut last = 0;
    for t in (200..=2000).step_by(50) {
        let tau = compute_token_budget(t as f64, &yi, yi.tp_degree, 1, &decodes, BudgetSearch::default()).unwrap();
        assert!(tau >= last, "budget fell from {last} to {tau} at {t} ms");
        last = tau;
    }
    let too_tight = compute_token_budget(10.0, &yi, yi.tp_degree, 1, &decodes, BudgetSearch::default());
    assert!(matches!(too_tight, Err(batchsim::Error::InfeasibleSlo(_))));
}

#[test]
fn audit_catches_policy_violations() {
    let c = Case { trace: vec![(0, 200, 30), (0, 200, 30), (50, 3000, 3)], tau: 512, pipelined: false };
    let (vllm_cfg, rep) = run(SchedulerKind::Vllm, &c);
    assert!(audit(&rep, &vllm_cfg).is_empty());
    let as_stall_free = ReplicaConfig { scheduler: SchedulerKind::StallFree, ..vllm_cfg };
    let bad = audit(&rep, &as_stall_free);
    assert!(bad.iter().any(|m| m.contains("skips the decode")), "{bad:?}");
    assert!(bad.iter().any(|m| m.contains("> budget")), "{bad:?}");
}

proptest! {
    #![proptest_config(ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::with_cases(200)
    })]

    // Reserving the full output at admission never runs out of blocks, even
    // when the cache only holds a few requests at once.
    #[test]
    fn output_reservation_never_exhausts_kv(c in case(), kind in prop::sample::select(SchedulerKind::ALL.to_vec())) {
        let p = params(&c);
        let mut cfg = cfg(kind, &c, &p);
        cfg.kv_blocks = 600;
        let trace: Vec<_> = c.trace.iter().map(|&(a, pr, o)| Request::new(0, a * 1000, pr, o).unwrap()).collect();
        let rep = simulate(&cfg, &p, &trace, SimOptions { record_events: false });
        prop_assert!(rep.is_ok(), "{:?}", rep.err());
    }
}
