//! Request lifecycle and batch composition types shared by the scheduler and
//! the event loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Simulation time in integer microseconds.
pub type Micros = u64;

pub type RequestId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestState {
    Queued,
    Prefilling,
    Decoding,
    Finished,
}

/// One inference job. Only token counts and timing are tracked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub id: RequestId,
    pub arrival: Micros,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
    pub prefill_done: u64,
    pub decodes_done: u64,
    pub first_token_time: Option<Micros>,
    pub token_emit_times: Vec<Micros>,
    /// Start of the first batch that carried a chunk of this request's prompt.
    pub scheduled_time: Option<Micros>,
    pub state: RequestState,
}

impl Request {
    pub fn new(id: RequestId, arrival: Micros, prompt_tokens: u64, output_tokens: u64) -> Result<Self> {
        if prompt_tokens == 0 || output_tokens == 0 {
            return Err(Error::contract(format!(
                "request {id}: prompt and output lengths must be >= 1 (got {prompt_tokens}, {output_tokens})"
            )));
        }
        Ok(Self {
            id,
            arrival,
            prompt_tokens,
            output_tokens,
            prefill_done: 0,
            decodes_done: 0,
            first_token_time: None,
            token_emit_times: Vec::with_capacity(output_tokens.min(4096) as usize),
            scheduled_time: None,
            state: RequestState::Queued,
        })
    }

    pub fn remaining_prompt(&self) -> u64 {
        self.prompt_tokens - self.prefill_done
    }

    pub fn is_finished(&self) -> bool {
        self.state == RequestState::Finished
    }

    /// Tokens whose KV entries exist before the next iteration runs.
    pub fn tokens_in_cache(&self) -> u64 {
        match self.state {
            RequestState::Queued | RequestState::Prefilling => self.prefill_done,
            // the most recent output token has not been fed back yet
            RequestState::Decoding | RequestState::Finished => {
                self.prompt_tokens + self.decodes_done.saturating_sub(1)
            }
        }
    }

    pub fn ttft(&self) -> Option<Micros> {
        self.first_token_time.map(|t| t - self.arrival)
    }

    /// Gaps between consecutive output tokens, from the second token on.
    pub fn tbt_samples(&self) -> impl Iterator<Item = Micros> + '_ {
        self.token_emit_times.windows(2).map(|w| w[1] - w[0])
    }

    /// The next entry this request would contribute to a batch, if any.
    pub fn decode_entry(&self) -> BatchEntry {
        BatchEntry {
            request_id: self.id,
            kind: EntryKind::Decode,
            chunk_tokens: 1,
            prefix_tokens: self.tokens_in_cache(),
        }
    }

    pub fn chunk_entry(&self, chunk_tokens: u64) -> BatchEntry {
        BatchEntry {
            request_id: self.id,
            kind: EntryKind::PrefillChunk,
            chunk_tokens,
            prefix_tokens: self.prefill_done,
        }
    }

    /// Applies the outcome of one iteration that carried `entry` and finished
    /// at `completion`.
    pub fn apply(&mut self, entry: &BatchEntry, completion: Micros) -> Result<()> {
        if entry.request_id != self.id {
            return Err(Error::contract(format!(
                "entry for request {} applied to request {}",
                entry.request_id, self.id
            )));
        }
        match entry.kind {
            EntryKind::PrefillChunk => {
                if !matches!(self.state, RequestState::Queued | RequestState::Prefilling) {
                    return Err(Error::contract(format!(
                        "request {}: prefill chunk while {:?}",
                        self.id, self.state
                    )));
                }
                if entry.chunk_tokens == 0 || entry.chunk_tokens > self.remaining_prompt() {
                    return Err(Error::contract(format!(
                        "request {}: chunk of {} with {} prompt tokens remaining",
                        self.id,
                        entry.chunk_tokens,
                        self.remaining_prompt()
                    )));
                }
                self.prefill_done += entry.chunk_tokens;
                self.state = RequestState::Prefilling;
                if self.prefill_done == self.prompt_tokens {
                    self.emit(completion)?;
                    self.first_token_time = Some(completion);
                }
            }
            EntryKind::Decode => {
                if self.state != RequestState::Decoding {
                    return Err(Error::contract(format!(
                        "request {}: decode entry while {:?}",
                        self.id, self.state
                    )));
                }
                if entry.chunk_tokens != 1 {
                    return Err(Error::contract(format!(
                        "request {}: decode entry with {} tokens",
                        self.id, entry.chunk_tokens
                    )));
                }
                self.emit(completion)?;
            }
        }
        Ok(())
    }

    fn emit(&mut self, t: Micros) -> Result<()> {
        if let Some(&last) = self.token_emit_times.last() {
            if t <= last {
                return Err(Error::contract(format!(
                    "request {}: token emitted at {t} us, not after previous token at {last} us",
                    self.id
                )));
            }
        }
        self.token_emit_times.push(t);
        self.decodes_done += 1;
        self.state = if self.decodes_done == self.output_tokens {
            RequestState::Finished
        } else {
            RequestState::Decoding
        };
        Ok(())
    }
}

/// Value-style wrapper over [`Request::apply`].
pub fn apply_iteration_result(mut request: Request, entry: &BatchEntry, completion: Micros) -> Result<Request> {
    request.apply(entry, completion)?;
    Ok(request)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Decode,
    PrefillChunk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub request_id: RequestId,
    pub kind: EntryKind,
    pub chunk_tokens: u64,
    pub prefix_tokens: u64,
}

impl BatchEntry {
    pub fn is_decode(&self) -> bool {
        self.kind == EntryKind::Decode
    }
}

/// Composition of one iteration (one micro-batch under pipeline parallelism).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub entries: Vec<BatchEntry>,
    pub total_tokens: u64,
}

impl Batch {
    pub fn new(entries: Vec<BatchEntry>) -> Self {
        let total_tokens = entries.iter().map(|e| e.chunk_tokens).sum();
        Self { entries, total_tokens }
    }

    pub fn push(&mut self, entry: BatchEntry) {
        self.total_tokens += entry.chunk_tokens;
        self.entries.push(entry);
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_decodes(&self) -> usize {
        self.entries.iter().filter(|e| e.is_decode()).count()
    }

    pub fn prefill_tokens(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| !e.is_decode())
            .map(|e| e.chunk_tokens)
            .sum()
    }

    pub fn has_prefill(&self) -> bool {
        self.entries.iter().any(|e| !e.is_decode())
    }

    /// Sum of the KV lengths attended by the decode entries.
    pub fn decode_kv_tokens(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.is_decode())
            .map(|e| e.prefix_tokens + 1)
            .sum()
    }

    /// Checks the structural invariants: the token total matches the entries
    /// and no request appears twice.
    pub fn check_well_formed(&self) -> Result<()> {
        let total: u64 = self.entries.iter().map(|e| e.chunk_tokens).sum();
        if total != self.total_tokens {
            return Err(Error::contract(format!(
                "batch total_tokens {} != sum of entries {total}",
                self.total_tokens
            )));
        }
        let mut ids: Vec<RequestId> = self.entries.iter().map(|e| e.request_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::contract("request appears twice in one batch"));
        }
        for e in &self.entries {
            match e.kind {
                EntryKind::Decode if e.chunk_tokens != 1 => {
                    return Err(Error::contract("decode entry must carry exactly one token"))
                }
                EntryKind::PrefillChunk if e.chunk_tokens == 0 => {
                    return Err(Error::contract("empty prefill chunk"))
                }
                _ => {}
            }
        }
        Ok(())
    }
}
