//! Replays an event log and checks the batching-policy invariants.

use std::collections::HashMap;

use super::{EventKind, SimReport};
use crate::costmodel::{decode_entry, prefill_entry, CostModelParams};
use crate::num::{ms_to_micros, Scalar};
use crate::replica::{ReplicaConfig, SchedulerKind};
use crate::request::{Batch, EntryKind, Micros};
use crate::sched::pipeline_tbt_factor;

#[derive(Debug, Clone, Copy, Default)]
struct Progress {
    prompt: u64,
    output: u64,
    prefilled: u64,
    emitted: u64,
    in_flight: bool,
}

impl Progress {
    fn decoding(&self) -> bool {
        self.prefilled == self.prompt && self.emitted < self.output
    }
}

/// Checks the event log of `report` against the invariants of the policy
/// in `cfg` and returns one message per violation.
///
/// Every policy: chunks of a request are contiguous and cover its prompt,
/// prefills begin in arrival order, and tokens are emitted in order after
/// arrival. Per policy:
/// - `stall_free`: every idle decoding request is in every batch, and
///   batches stay within the token budget;
/// - `vllm`: no batch mixes prefills and decodes;
/// - `request_level`: no prefill while any request is decoding;
/// - `vllm`, `orca`, `request_level`: prompts are never chunked.
pub fn audit(report: &SimReport, cfg: &ReplicaConfig) -> Vec<String> {
    let mut bad = Vec::new();
    if report.events.is_empty() && !report.requests.is_empty() {
        bad.push("no event log recorded".to_string());
        return bad;
    }
    let last_stage = report.pp_degree.max(1) - 1;
    let mut progress: HashMap<u64, Progress> = HashMap::new();
    let mut arrived: HashMap<u64, Micros> = HashMap::new();
    let mut flights: HashMap<u64, Vec<u64>> = HashMap::new();
    let mut next_prefill_start = 0u64;
    let kind = cfg.scheduler;

    for ev in &report.events {
        let t = ev.micros();
        match &ev.kind {
            EventKind::Arrival { request, prompt_tokens, output_tokens } => {
                arrived.insert(*request, t);
                progress.insert(
                    *request,
                    Progress { prompt: *prompt_tokens, output: *output_tokens, ..Default::default() },
                );
            }
            EventKind::StageEnd { micro_batch, stage } if *stage == last_stage => {
                for id in flights.remove(micro_batch).unwrap_or_default() {
                    if let Some(p) = progress.get_mut(&id) {
                        p.in_flight = false;
                    }
                }
            }
            EventKind::TokenEmit { request, index } => {
                let Some(p) = progress.get_mut(request) else {
                    bad.push(format!("t={t}: token for unknown request {request}"));
                    continue;
                };
                if *index != p.emitted {
                    bad.push(format!("t={t}: request {request} emitted token {index}, expected {}", p.emitted));
                }
                p.emitted += 1;
            }
            EventKind::BatchStart { micro_batch, total_tokens, entries } => {
                let sum: u64 = entries.iter().map(|e| e.tokens).sum();
                if sum != *total_tokens {
                    bad.push(format!("t={t}: batch {micro_batch} total {total_tokens} != sum of entries {sum}"));
                }
                let has_prefill = entries.iter().any(|e| e.kind == EntryKind::PrefillChunk);
                let has_decode = entries.iter().any(|e| e.kind == EntryKind::Decode);
                if kind == SchedulerKind::StallFree {
                    if *total_tokens > cfg.token_budget {
                        bad.push(format!("t={t}: batch {micro_batch} has {total_tokens} tokens > budget {}", cfg.token_budget));
                    }
                    let mut idle: Vec<u64> = progress
                        .iter()
                        .filter(|(_, p)| p.decoding() && !p.in_flight)
                        .map(|(&id, _)| id)
                        .collect();
                    idle.sort_unstable();
                    for id in idle {
                        if !entries.iter().any(|e| e.request == id && e.kind == EntryKind::Decode) {
                            bad.push(format!("t={t}: batch {micro_batch} skips the decode of request {id}"));
                        }
                    }
                }
                if kind == SchedulerKind::Vllm && has_prefill && has_decode {
                    bad.push(format!("t={t}: batch {micro_batch} mixes prefills and decodes"));
                }
                if kind == SchedulerKind::RequestLevel && has_prefill && progress.values().any(Progress::decoding) {
                    bad.push(format!("t={t}: batch {micro_batch} prefills while a request is decoding"));
                }
                for e in entries {
                    let Some(p) = progress.get_mut(&e.request) else {
                        bad.push(format!("t={t}: batch {micro_batch} schedules unknown request {}", e.request));
                        continue;
                    };
                    if p.in_flight {
                        bad.push(format!("t={t}: request {} scheduled while in flight", e.request));
                    }
                    p.in_flight = true;
                    if e.kind == EntryKind::Decode {
                        if !p.decoding() {
                            bad.push(format!("t={t}: decode of request {} before its prefill finished", e.request));
                        }
                        continue;
                    }
                    if p.prefilled == 0 {
                        if e.request != next_prefill_start {
                            bad.push(format!(
                                "t={t}: request {} starts prefill before request {next_prefill_start}",
                                e.request
                            ));
                        }
                        next_prefill_start = next_prefill_start.max(e.request + 1);
                    }
                    if e.prefix != p.prefilled {
                        bad.push(format!("t={t}: chunk of request {} at prefix {} but {} done", e.request, e.prefix, p.prefilled));
                    }
                    if kind != SchedulerKind::StallFree && kind != SchedulerKind::ChunkedOnly && e.tokens != p.prompt {
                        bad.push(format!("t={t}: prompt of request {} chunked ({} of {})", e.request, e.tokens, p.prompt));
                    }
                    p.prefilled += e.tokens;
                    if p.prefilled > p.prompt {
                        bad.push(format!("t={t}: request {} prefilled past its prompt", e.request));
                    }
                }
                flights.insert(*micro_batch, entries.iter().map(|e| e.request).collect());
            }
            _ => {}
        }
    }

    for r in &report.requests {
        let Some(p) = progress.get(&r.id) else {
            bad.push(format!("request {} never arrived", r.id));
            continue;
        };
        if p.prefilled != r.prompt_tokens {
            bad.push(format!("request {} prefilled {} of {} tokens", r.id, p.prefilled, r.prompt_tokens));
        }
        if p.emitted != r.output_tokens || r.token_emit_times.len() as u64 != r.output_tokens {
            bad.push(format!("request {} emitted {} of {} tokens", r.id, p.emitted, r.output_tokens));
        }
        if r.token_emit_times.windows(2).any(|w| w[0] >= w[1]) {
            bad.push(format!("request {} has non-increasing emit times", r.id));
        }
        if let (Some(&first), Some(&arr)) = (r.token_emit_times.first(), arrived.get(&r.id)) {
            if first < arr {
                bad.push(format!("request {} emitted a token before arriving", r.id));
            }
        }
    }
    bad
}

/// Upper bound on any stall-free TBT sample: `pipeline_tbt_factor(pp)`
/// full iterations of a worst-case batch at the token budget, plus one
/// send hop per stage.
///
/// The worst-case batch holds `max_decodes` decodes at `max_context` tokens
/// of context and fills the rest of the budget with one chunk after
/// `max_prompt` tokens of prefix.
pub fn stall_free_tbt_bound<S: Scalar>(
    params: &CostModelParams<S>,
    cfg: &ReplicaConfig,
    max_decodes: u64,
    max_prompt: u64,
    max_context: u64,
) -> Micros {
    let decodes = max_decodes.min(cfg.token_budget);
    let mut batch = Batch::new((0..decodes).map(|i| decode_entry(i, max_context)).collect());
    if cfg.token_budget > decodes {
        batch.push(prefill_entry(decodes, cfg.token_budget - decodes, max_prompt));
    }
    let pp = cfg.pp_degree.max(1);
    // stage times are rounded to whole microseconds, one per stage
    let stage = ms_to_micros(params.stage_time(&batch, cfg.tp_degree, pp)) + 1;
    let send = ms_to_micros(params.pp_send_ms) + 1;
    pipeline_tbt_factor(pp) * pp * stage + pp * send
}
