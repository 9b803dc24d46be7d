//! Batch formation policies.
//!
//! Every policy answers the same question each time the replica (or the first
//! pipeline stage) frees up: which entries make up the next iteration. A
//! request whose previous entry is still in flight is never re-batched.

mod budget;

pub use budget::{compute_token_budget, pipeline_tbt_factor, BudgetSearch};

use std::collections::VecDeque;

use crate::error::Result;
use crate::kvcache::KvCache;
use crate::replica::{KvReserve, ReplicaConfig, SchedulerKind};
use crate::request::{Batch, Request, RequestId, RequestState};

/// Size of the next prefill chunk given the budget `tau` and the `n_t` tokens
/// already packed. A final chunk passes through unaligned; otherwise the
/// chunk is the largest multiple of `chunk_align` that fits.
pub fn get_next_chunk_size(remaining: u64, tau: u64, n_t: u64, chunk_align: u64) -> u64 {
    let room = tau.saturating_sub(n_t);
    if remaining <= room {
        return remaining;
    }
    (room / chunk_align) * chunk_align
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SchedulerState {
    /// Arrived, not yet admitted; FCFS.
    pub wait_queue: VecDeque<RequestId>,
    /// Admitted and unfinished, in admission order.
    pub running: Vec<RequestId>,
}

#[derive(Debug, Clone)]
pub struct Scheduler {
    kind: SchedulerKind,
    tau: u64,
    max_batch_size: u64,
    max_num_batched_tokens: u64,
    orca_cap: u64,
    chunk_align: u64,
    reserve: KvReserve,
    state: SchedulerState,
    last_was_prefill: bool,
}

/// Read-only view of the requests a scheduler works on. Request ids index
/// `requests` and `in_flight` directly.
#[derive(Clone, Copy)]
pub struct Pool<'a> {
    pub requests: &'a [Request],
    pub in_flight: &'a [bool],
}

impl Pool<'_> {
    fn get(&self, id: RequestId) -> &Request {
        &self.requests[id as usize]
    }

    fn idle(&self, id: RequestId) -> bool {
        !self.in_flight[id as usize]
    }
}

impl Scheduler {
    pub fn new(cfg: &ReplicaConfig) -> Self {
        Self {
            kind: cfg.scheduler,
            tau: cfg.token_budget,
            max_batch_size: cfg.max_batch_size,
            max_num_batched_tokens: cfg.max_num_batched_tokens,
            orca_cap: cfg.orca_cap(),
            chunk_align: cfg.chunk_align,
            reserve: cfg.kv_reserve,
            state: SchedulerState::default(),
            last_was_prefill: false,
        }
    }

    pub fn kind(&self) -> SchedulerKind {
        self.kind
    }

    pub fn state(&self) -> &SchedulerState {
        &self.state
    }

    pub fn token_budget(&self) -> u64 {
        self.tau
    }

    pub fn enqueue(&mut self, id: RequestId) {
        self.state.wait_queue.push_back(id);
    }

    pub fn has_pending_work(&self) -> bool {
        !self.state.wait_queue.is_empty() || !self.state.running.is_empty()
    }

    /// Forms the next batch. Admitted requests get their KV blocks here.
    pub fn next_batch(&mut self, pool: Pool<'_>, kv: &mut KvCache) -> Result<Batch> {
        self.state.running.retain(|&id| !pool.get(id).is_finished());
        match self.kind {
            SchedulerKind::RequestLevel => self.request_level(pool, kv),
            SchedulerKind::Vllm => self.vllm(pool, kv),
            SchedulerKind::Orca => self.orca(pool, kv),
            SchedulerKind::StallFree => self.stall_free(pool, kv),
            SchedulerKind::ChunkedOnly => self.chunked_only(pool, kv),
        }
    }

    fn reserve_for(&self, r: &Request) -> u64 {
        match self.reserve {
            KvReserve::Output => r.output_tokens,
            KvReserve::Tokens(n) => n,
        }
    }

    fn fits(&self, r: &Request, kv: &KvCache) -> bool {
        kv.can_allocate_request(r.prompt_tokens, self.reserve_for(r))
    }

    fn admit_front(&mut self, pool: Pool<'_>, kv: &mut KvCache) -> Result<RequestId> {
        let id = self.state.wait_queue.pop_front().expect("admit from empty queue");
        let r = pool.get(id);
        kv.allocate(id, r.prompt_tokens + self.reserve_for(r))?;
        self.state.running.push(id);
        Ok(id)
    }

    fn decodes(&self, pool: Pool<'_>, batch: &mut Batch) {
        for &id in &self.state.running {
            let r = pool.get(id);
            if r.state == RequestState::Decoding && pool.idle(id) {
                batch.push(r.decode_entry());
            }
        }
    }

    /// Whole prompts, FCFS, no new admissions while anything is running.
    fn request_level(&mut self, pool: Pool<'_>, kv: &mut KvCache) -> Result<Batch> {
        let mut batch = Batch::default();
        if self.state.running.is_empty() {
            while let Some(&id) = self.state.wait_queue.front() {
                let r = pool.get(id);
                if self.state.running.len() as u64 >= self.max_batch_size || !self.fits(r, kv) {
                    break;
                }
                self.admit_front(pool, kv)?;
                batch.push(r.chunk_entry(r.prompt_tokens));
            }
        } else {
            self.decodes(pool, &mut batch);
        }
        Ok(batch)
    }

    /// Eager prefills of whole prompts under the batched-token cap; otherwise
    /// a decode-only batch.
    fn vllm(&mut self, pool: Pool<'_>, kv: &mut KvCache) -> Result<Batch> {
        let mut batch = Batch::default();
        let any_decoding = self
            .state
            .running
            .iter()
            .any(|&id| pool.get(id).state == RequestState::Decoding);
        while let Some(&id) = self.state.wait_queue.front() {
            let r = pool.get(id);
            if self.state.running.len() as u64 >= self.max_batch_size || !self.fits(r, kv) {
                break;
            }
            if batch.total_tokens + r.prompt_tokens > self.max_num_batched_tokens {
                // an oversized prompt runs alone once nothing is decoding
                let alone = batch.is_empty() && !any_decoding && r.prompt_tokens > self.max_num_batched_tokens;
                if !alone {
                    break;
                }
                self.admit_front(pool, kv)?;
                batch.push(r.chunk_entry(r.prompt_tokens));
                break;
            }
            self.admit_front(pool, kv)?;
            batch.push(r.chunk_entry(r.prompt_tokens));
        }
        if batch.is_empty() {
            self.decodes(pool, &mut batch);
        }
        Ok(batch)
    }

    /// All running decodes plus newly admitted whole prompts in one batch.
    fn orca(&mut self, pool: Pool<'_>, kv: &mut KvCache) -> Result<Batch> {
        let mut batch = Batch::default();
        self.decodes(pool, &mut batch);
        while let Some(&id) = self.state.wait_queue.front() {
            let r = pool.get(id);
            if self.state.running.len() as u64 >= self.orca_cap || !self.fits(r, kv) {
                break;
            }
            self.admit_front(pool, kv)?;
            batch.push(r.chunk_entry(r.prompt_tokens));
        }
        Ok(batch)
    }

    /// Prefill chunks for admitted requests, then for new admissions, packed
    /// on top of `n_t` tokens already in the batch.
    fn pack_chunks(&mut self, pool: Pool<'_>, kv: &mut KvCache, batch: &mut Batch) -> Result<()> {
        let mut n_t = batch.total_tokens;
        for &id in &self.state.running {
            let r = pool.get(id);
            if r.remaining_prompt() == 0 || !pool.idle(id) {
                continue;
            }
            let c = get_next_chunk_size(r.remaining_prompt(), self.tau, n_t, self.chunk_align);
            if c > 0 {
                batch.push(r.chunk_entry(c));
                n_t += c;
            }
        }
        while n_t < self.tau {
            let Some(&id) = self.state.wait_queue.front() else { break };
            let r = pool.get(id);
            if self.state.running.len() as u64 >= self.max_batch_size || !self.fits(r, kv) {
                break;
            }
            let c = get_next_chunk_size(r.prompt_tokens, self.tau, n_t, self.chunk_align);
            if c == 0 {
                break;
            }
            self.admit_front(pool, kv)?;
            batch.push(r.chunk_entry(c));
            n_t += c;
        }
        Ok(())
    }

    /// Decodes first, then partial prefills, then new requests, all within
    /// the token budget.
    fn stall_free(&mut self, pool: Pool<'_>, kv: &mut KvCache) -> Result<Batch> {
        let mut batch = Batch::default();
        self.decodes(pool, &mut batch);
        self.pack_chunks(pool, kv, &mut batch)?;
        Ok(batch)
    }

    /// Chunked prefills without hybrid batching: prefill-chunk batches and
    /// decode batches alternate while both kinds of work exist.
    fn chunked_only(&mut self, pool: Pool<'_>, kv: &mut KvCache) -> Result<Batch> {
        let mut decodes = Batch::default();
        self.decodes(pool, &mut decodes);
        if decodes.is_empty() || !self.last_was_prefill {
            let mut prefill = Batch::default();
            self.pack_chunks(pool, kv, &mut prefill)?;
            if !prefill.is_empty() {
                self.last_was_prefill = true;
                return Ok(prefill);
            }
        }
        self.last_was_prefill = false;
        Ok(decodes)
    }
}
