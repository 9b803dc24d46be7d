//! Straight-line reference simulator.
//!
//! Re-derives the engine's behaviour without an event queue or the pipeline
//! helper: at every step it scans for the earliest pending instant, and stage
//! timing and bubbles are recomputed from per-stage lists. It shares only the
//! scheduler, cost model, KV cache and request lifecycle with the engine, and
//! is meant for cross-checking small traces.

use crate::costmodel::CostModelParams;
use crate::engine::{canonicalize, EventKind, LoggedEntry, SimEvent, SimReport, TimeMs, BubbleClass, BubbleRecord};
use crate::error::{Error, Result};
use crate::kvcache::KvCache;
use crate::num::{ms_to_micros, Scalar};
use crate::replica::ReplicaConfig;
use crate::request::{Batch, EntryKind, Micros, Request, RequestState};
use crate::sched::{Pool, Scheduler};

struct Flight {
    batch: Batch,
    done_at: Micros,
}

fn class_of(prev: &Batch, next: &Batch) -> BubbleClass {
    if prev.has_prefill() != next.has_prefill() {
        BubbleClass::PB2
    } else if prev.has_prefill() {
        BubbleClass::PB1
    } else {
        BubbleClass::PB3
    }
}

pub fn simulate_reference<S: Scalar>(cfg: &ReplicaConfig, params: &CostModelParams<S>, trace: &[Request]) -> Result<SimReport> {
    cfg.validate()?;
    let pp = cfg.pp_degree as usize;
    let send = ms_to_micros(params.pp_send_ms);
    let mut requests: Vec<Request> = trace
        .iter()
        .enumerate()
        .map(|(i, r)| Request::new(i as u64, r.arrival, r.prompt_tokens, r.output_tokens))
        .collect::<Result<_>>()?;
    let mut kv = KvCache::new(cfg.kv_blocks, cfg.kv_block_size).with_watermark(cfg.kv_watermark_frac);
    let mut sched = Scheduler::new(cfg);
    let mut in_flight = vec![false; requests.len()];
    let mut flights: Vec<Flight> = Vec::new();
    // per stage: end of the last micro-batch and that micro-batch
    let mut stage_last: Vec<Option<(Micros, Batch)>> = vec![None; pp];
    let mut busy = vec![0; pp];
    let mut events = Vec::new();
    let mut bubbles = Vec::new();
    let mut kv_series = Vec::new();
    let mut arrived = 0;
    let mut mb_count = 0u64;
    let mut makespan = 0;
    let mut now: Option<Micros> = None;

    loop {
        let stage0_free = stage_last[0].as_ref().map_or(0, |l| l.0);
        let mut candidates: Vec<Micros> = flights.iter().map(|f| f.done_at).collect();
        if arrived < requests.len() {
            candidates.push(requests[arrived].arrival);
        }
        if now.is_some_and(|n| stage0_free > n) {
            candidates.push(stage0_free);
        }
        let Some(t) = candidates.into_iter().min() else { break };
        now = Some(t);

        // a micro-batch that left the last stage
        if let Some(i) = flights.iter().position(|f| f.done_at == t) {
            let f = flights.remove(i);
            makespan = t;
            for e in &f.batch.entries {
                let id = e.request_id as usize;
                let before = requests[id].token_emit_times.len();
                requests[id].apply(e, t)?;
                in_flight[id] = false;
                if requests[id].token_emit_times.len() > before {
                    events.push(SimEvent::new(t, EventKind::TokenEmit { request: id as u64, index: before as u64 }));
                }
                match requests[id].state {
                    RequestState::Finished => {
                        kv.release(id as u64)?;
                        events.push(SimEvent::new(t, EventKind::RequestFinish { request: id as u64 }));
                    }
                    RequestState::Decoding => {
                        let need = requests[id].prompt_tokens + requests[id].decodes_done;
                        kv.grow(id as u64, need)?;
                    }
                    _ => {}
                }
            }
        }
        while arrived < requests.len() && requests[arrived].arrival == t {
            let r = &requests[arrived];
            events.push(SimEvent::new(
                t,
                EventKind::Arrival { request: r.id, prompt_tokens: r.prompt_tokens, output_tokens: r.output_tokens },
            ));
            sched.enqueue(r.id);
            arrived += 1;
        }

        if flights.len() >= pp || stage0_free > t || !sched.has_pending_work() {
            continue;
        }
        let batch = sched.next_batch(Pool { requests: &requests, in_flight: &in_flight }, &mut kv)?;
        if batch.is_empty() {
            continue;
        }
        if mb_count >= cfg.max_iterations {
            return Err(Error::Aborted { iterations: mb_count });
        }
        let per_stage = ms_to_micros(params.iteration_time(&batch, cfg.tp_degree) / S::count(pp as u64)).max(1);
        events.push(SimEvent::new(
            t,
            EventKind::BatchStart {
                micro_batch: mb_count,
                total_tokens: batch.total_tokens,
                entries: batch
                    .entries
                    .iter()
                    .map(|e| LoggedEntry { request: e.request_id, kind: e.kind, tokens: e.chunk_tokens, prefix: e.prefix_tokens })
                    .collect(),
            },
        ));
        let mut arrive_at = t;
        for s in 0..pp {
            let free = stage_last[s].as_ref().map_or(0, |l| l.0);
            let start = arrive_at.max(free);
            if s > 0 {
                if let Some((prev_end, prev)) = &stage_last[s] {
                    let upstream_since = (*prev_end).max(t);
                    if start > upstream_since {
                        let class = class_of(prev, &batch);
                        bubbles.push(BubbleRecord { stage: s as u64, start: upstream_since, end: start, class });
                        events.push(SimEvent::new(upstream_since, EventKind::Bubble { stage: s as u64, end_ms: TimeMs(start), class }));
                    }
                }
            }
            let end = start + per_stage;
            events.push(SimEvent::new(start, EventKind::StageStart { micro_batch: mb_count, stage: s as u64 }));
            events.push(SimEvent::new(end, EventKind::StageEnd { micro_batch: mb_count, stage: s as u64 }));
            busy[s] += per_stage;
            stage_last[s] = Some((end, batch.clone()));
            arrive_at = end + send;
        }
        for e in &batch.entries {
            in_flight[e.request_id as usize] = true;
            let r = &mut requests[e.request_id as usize];
            if e.kind == EntryKind::PrefillChunk && r.scheduled_time.is_none() {
                r.scheduled_time = Some(t);
            }
        }
        kv_series.push((t, kv.utilization()));
        let done_at = stage_last[pp - 1].as_ref().unwrap().0;
        flights.push(Flight { batch, done_at });
        mb_count += 1;
    }

    if let Some(r) = requests.iter().find(|r| !r.is_finished()) {
        return Err(Error::Contract(format!("reference run stalled with request {} unfinished", r.id)));
    }
    canonicalize(&mut events);
    Ok(SimReport {
        requests,
        events,
        bubbles,
        kv_utilization: kv_series,
        stage_busy: busy,
        makespan,
        iterations: mb_count,
        pp_degree: pp as u64,
    })
}
