//! Discrete-event loop for one replica.
//!
//! The loop advances between three kinds of instants: request arrivals, the
//! first pipeline stage freeing up, and micro-batches leaving the last stage.
//! All events at one instant are drained (completions, then arrivals) before
//! the scheduler is asked for a new micro-batch, so an arrival at the same
//! instant as batch formation is visible to it. At most `pp` micro-batches
//! are in flight, and a request never has two entries in flight at once.

mod audit;
mod events;
mod pipeline;

pub use audit::{audit, stall_free_tbt_bound};
pub use events::{canonicalize, write_jsonl, EventKind, LoggedEntry, SimEvent, TimeMs};
pub use pipeline::{classify_bubble, BubbleClass, BubbleRecord, MicroBatchShape, Pipeline, StageSpans};

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::costmodel::CostModelParams;
use crate::error::{Error, Result};
use crate::kvcache::{at_time, blocks_needed, KvCache};
use crate::num::{ms_to_micros, Scalar};
use crate::replica::{KvReserve, ReplicaConfig};
use crate::request::{Batch, EntryKind, Micros, Request};
use crate::sched::{Pool, Scheduler};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimOptions {
    /// Keep the full event log. Capacity probes turn this off.
    pub record_events: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { record_events: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    /// Final request records, indexed by trace position.
    pub requests: Vec<Request>,
    /// Canonically ordered event log (empty unless recorded).
    pub events: Vec<SimEvent>,
    pub bubbles: Vec<BubbleRecord>,
    /// `(time, used / total blocks)` sampled at every batch start.
    pub kv_utilization: Vec<(Micros, f64)>,
    pub stage_busy: Vec<Micros>,
    pub makespan: Micros,
    pub iterations: u64,
    pub pp_degree: u64,
}

impl SimReport {
    pub fn bubble_time(&self) -> Micros {
        self.bubbles.iter().map(|b| b.duration()).sum()
    }

    /// Bubble time over total stage time.
    pub fn bubble_fraction(&self) -> f64 {
        if self.makespan == 0 {
            return 0.0;
        }
        self.bubble_time() as f64 / (self.pp_degree * self.makespan) as f64
    }

    pub fn output_tokens(&self) -> u64 {
        self.requests.iter().map(|r| r.decodes_done).sum()
    }

    /// Generated tokens per second of simulated time.
    pub fn throughput(&self) -> f64 {
        if self.makespan == 0 {
            return 0.0;
        }
        self.output_tokens() as f64 * 1e6 / self.makespan as f64
    }
}

/// Copies `trace` into fresh request records whose ids are trace positions.
fn fresh_requests(trace: &[Request]) -> Result<Vec<Request>> {
    let mut out = Vec::with_capacity(trace.len());
    let mut last = 0;
    for (i, r) in trace.iter().enumerate() {
        if r.arrival < last {
            return Err(Error::InvalidConfig(format!("trace is not sorted by arrival at position {i}")));
        }
        last = r.arrival;
        out.push(Request::new(i as u64, r.arrival, r.prompt_tokens, r.output_tokens)?);
    }
    Ok(out)
}

/// Rejects requests that could never be admitted on an empty replica.
fn check_admissible(cfg: &ReplicaConfig, kv: &KvCache, requests: &[Request]) -> Result<()> {
    for r in requests {
        let reserve = match cfg.kv_reserve {
            KvReserve::Output => r.output_tokens,
            KvReserve::Tokens(n) => n,
        };
        if !kv.can_allocate_request(r.prompt_tokens, reserve) {
            return Err(Error::InvalidConfig(format!(
                "request {} ({} + {} tokens, {} blocks) can never fit the KV cache ({} blocks, watermark included)",
                r.id,
                r.prompt_tokens,
                reserve,
                blocks_needed(r.prompt_tokens + reserve, kv.block_size()),
                kv.total_blocks()
            )));
        }
    }
    Ok(())
}

pub(crate) fn logged(batch: &Batch) -> Vec<crate::engine::LoggedEntry> {
    batch
        .entries
        .iter()
        .map(|e| LoggedEntry { request: e.request_id, kind: e.kind, tokens: e.chunk_tokens, prefix: e.prefix_tokens })
        .collect()
}

/// Per-stage time of `batch` in whole microseconds, at least one.
pub fn stage_micros<S: Scalar>(params: &CostModelParams<S>, batch: &Batch, cfg: &ReplicaConfig) -> Micros {
    ms_to_micros(params.stage_time(batch, cfg.tp_degree, cfg.pp_degree)).max(1)
}

pub fn kv_cache_for(cfg: &ReplicaConfig) -> KvCache {
    KvCache::new(cfg.kv_blocks, cfg.kv_block_size).with_watermark(cfg.kv_watermark_frac)
}

/// Applies a finished micro-batch to its requests, logging tokens and
/// releasing or growing KV holdings.
pub(crate) fn complete_batch(
    batch: &Batch,
    t: Micros,
    requests: &mut [Request],
    in_flight: &mut [bool],
    kv: &mut KvCache,
    log: Option<&mut Vec<SimEvent>>,
) -> Result<()> {
    let mut sink = Vec::new();
    for e in &batch.entries {
        let id = e.request_id;
        let r = &mut requests[id as usize];
        let before = r.token_emit_times.len();
        r.apply(e, t)?;
        in_flight[id as usize] = false;
        if r.token_emit_times.len() > before {
            sink.push(SimEvent::new(t, EventKind::TokenEmit { request: id, index: before as u64 }));
        }
        if r.is_finished() {
            kv.release(id)?;
            sink.push(SimEvent::new(t, EventKind::RequestFinish { request: id }));
        } else if r.state == crate::request::RequestState::Decoding {
            kv.grow(id, r.tokens_in_cache() + 1).map_err(|err| at_time(err, t))?;
        }
    }
    if let Some(log) = log {
        log.extend(sink);
    }
    Ok(())
}

pub(crate) fn mark_started(batch: &Batch, t: Micros, requests: &mut [Request], in_flight: &mut [bool]) {
    for e in &batch.entries {
        in_flight[e.request_id as usize] = true;
        let r = &mut requests[e.request_id as usize];
        if e.kind == EntryKind::PrefillChunk && r.scheduled_time.is_none() {
            r.scheduled_time = Some(t);
        }
    }
}

pub(crate) fn stage_events(mb: u64, spans: &StageSpans, bubbles: &[BubbleRecord], log: &mut Vec<SimEvent>) {
    for (s, &(start, end)) in spans.spans.iter().enumerate() {
        log.push(SimEvent::new(start, EventKind::StageStart { micro_batch: mb, stage: s as u64 }));
        log.push(SimEvent::new(end, EventKind::StageEnd { micro_batch: mb, stage: s as u64 }));
    }
    for b in bubbles {
        log.push(SimEvent::new(b.start, EventKind::Bubble { stage: b.stage, end_ms: TimeMs(b.end), class: b.class }));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Wake {
    /// A micro-batch left the last stage.
    Done(usize),
    /// The first stage freed up.
    StageFree,
}

/// Runs `trace` (sorted by arrival; ids are reassigned to trace positions)
/// to completion on one replica.
pub fn simulate<S: Scalar>(
    cfg: &ReplicaConfig,
    params: &CostModelParams<S>,
    trace: &[Request],
    opts: SimOptions,
) -> Result<SimReport> {
    cfg.validate()?;
    params.validate()?;
    let mut requests = fresh_requests(trace)?;
    let n = requests.len();
    let mut kv = kv_cache_for(cfg);
    check_admissible(cfg, &kv, &requests)?;

    let pp = cfg.pp_degree;
    let mut pipeline = Pipeline::new(pp, ms_to_micros(params.pp_send_ms));
    let mut sched = Scheduler::new(cfg);
    let mut in_flight = vec![false; n];
    let mut batches: Vec<Option<Batch>> = Vec::new();
    let mut wake: BinaryHeap<Reverse<(Micros, Wake)>> = BinaryHeap::new();
    let mut log = Vec::new();
    let mut bubbles = Vec::new();
    let mut kv_series = Vec::new();
    let mut next_arrival = 0;
    let mut mbs_in_flight = 0u64;
    let mut makespan = 0;

    loop {
        let ta = requests.get(next_arrival).map(|r| r.arrival);
        let tw = wake.peek().map(|w| w.0 .0);
        let t = match (ta, tw) {
            (Some(a), Some(w)) => a.min(w),
            (Some(a), None) => a,
            (None, Some(w)) => w,
            (None, None) => break,
        };

        while let Some(&Reverse((tw, w))) = wake.peek() {
            if tw != t {
                break;
            }
            wake.pop();
            if let Wake::Done(mb) = w {
                let batch = batches[mb].take().expect("micro-batch completed twice");
                let sink = opts.record_events.then_some(&mut log);
                complete_batch(&batch, t, &mut requests, &mut in_flight, &mut kv, sink)?;
                mbs_in_flight -= 1;
                makespan = t;
            }
        }
        while next_arrival < n && requests[next_arrival].arrival == t {
            let r = &requests[next_arrival];
            if opts.record_events {
                log.push(SimEvent::new(
                    t,
                    EventKind::Arrival { request: r.id, prompt_tokens: r.prompt_tokens, output_tokens: r.output_tokens },
                ));
            }
            sched.enqueue(r.id);
            next_arrival += 1;
        }

        if mbs_in_flight < pp && pipeline.stage_free(0) <= t && sched.has_pending_work() {
            let pool = Pool { requests: &requests, in_flight: &in_flight };
            let batch = sched.next_batch(pool, &mut kv)?;
            if !batch.is_empty() {
                let mb = batches.len();
                if mb as u64 >= cfg.max_iterations {
                    return Err(Error::Aborted { iterations: mb as u64 });
                }
                let (spans, closed) = pipeline.advance(t, stage_micros(params, &batch, cfg), MicroBatchShape::of(&batch));
                mark_started(&batch, t, &mut requests, &mut in_flight);
                if opts.record_events {
                    log.push(SimEvent::new(
                        t,
                        EventKind::BatchStart { micro_batch: mb as u64, total_tokens: batch.total_tokens, entries: logged(&batch) },
                    ));
                    stage_events(mb as u64, &spans, &closed, &mut log);
                }
                bubbles.extend(closed);
                kv_series.push((t, kv.utilization()));
                if spans.first_stage_end() < spans.final_end() {
                    wake.push(Reverse((spans.first_stage_end(), Wake::StageFree)));
                }
                wake.push(Reverse((spans.final_end(), Wake::Done(mb))));
                batches.push(Some(batch));
                mbs_in_flight += 1;
            }
        }
    }

    if let Some(r) = requests.iter().find(|r| !r.is_finished()) {
        return Err(Error::contract(format!("simulation stalled with request {} unfinished", r.id)));
    }
    canonicalize(&mut log);
    Ok(SimReport {
        requests,
        events: log,
        bubbles,
        kv_utilization: kv_series,
        stage_busy: pipeline.busy().to_vec(),
        makespan,
        iterations: batches.len() as u64,
        pp_degree: pp,
    })
}
