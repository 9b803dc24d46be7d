//! Analytical iteration-time model.
//!
//! An iteration's cost is split into a roofline linear-layer term (flat while
//! memory-bound, then linear in the token count), attention for prefill chunks
//! (quadratic within a chunk plus re-reads of the prompt prefix already in the
//! KV cache), attention for decodes (linear in the attended context), and flat
//! per-iteration overheads. All constants are full-iteration milliseconds, i.e.
//! summed over pipeline stages; a pipeline stage runs `1 / pp` of the layers.

mod calibrate;

pub use calibrate::{calibrate, Anchor, AnchorSet, Calibration, PrefillSpec, Residual};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::request::{Batch, BatchEntry, EntryKind};

/// Decode batch size and context length of the reference decode iteration
/// used to derive latency SLOs.
pub const REFERENCE_DECODE_BATCH: u64 = 32;
pub const REFERENCE_DECODE_KV: u64 = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar", deny_unknown_fields)]
pub struct CostModelParams<S> {
    pub name: String,
    /// Model hidden size.
    #[serde(default)]
    pub hidden_size: u64,
    /// FFN intermediate size.
    #[serde(default)]
    pub ffn_size: u64,
    /// Tensor/pipeline degrees of the deployment these constants describe.
    #[serde(default = "one")]
    pub tp_degree: u64,
    #[serde(default = "one")]
    pub pp_degree: u64,
    /// Memory-bound floor of the linear layers at `tp = 1`. Always equal to
    /// `per_token_linear_ms * saturation_tokens`.
    pub mem_floor_ms: S,
    /// Compute-bound cost per token of the linear layers at `tp = 1`.
    pub per_token_linear_ms: S,
    pub saturation_tokens: u64,
    pub attn_prefill_quad_ms: S,
    pub attn_kv_read_ms: S,
    pub attn_decode_per_kv_ms: S,
    pub fixed_overhead_ms: S,
    /// Added once per iteration when `tp > 1`.
    pub tp_comm_ms: S,
    /// Activation transfer between consecutive pipeline stages.
    pub pp_send_ms: S,
    #[serde(default = "tile")]
    pub tile_size: u64,
    pub tile_penalty_frac: S,
}

fn one() -> u64 {
    1
}

fn tile() -> u64 {
    256
}

/// Per-component breakdown of one iteration, full-iteration milliseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationCost<S> {
    pub linear: S,
    pub attn_prefill: S,
    pub attn_decode: S,
    pub overhead: S,
}

impl<S: Scalar> IterationCost<S> {
    pub fn total(&self) -> S {
        self.linear + self.attn_prefill + self.attn_decode + self.overhead
    }
}

impl<S: Scalar> CostModelParams<S> {
    /// Builds a parameter set from its rate constants, deriving the floor.
    #[allow(clippy::too_many_arguments)]
    pub fn from_rates(
        name: impl Into<String>,
        per_token_linear_ms: S,
        saturation_tokens: u64,
        attn_prefill_quad_ms: S,
        attn_kv_read_ms: S,
        attn_decode_per_kv_ms: S,
        fixed_overhead_ms: S,
    ) -> Self {
        Self {
            name: name.into(),
            hidden_size: 0,
            ffn_size: 0,
            tp_degree: 1,
            pp_degree: 1,
            mem_floor_ms: per_token_linear_ms * S::count(saturation_tokens),
            per_token_linear_ms,
            saturation_tokens,
            attn_prefill_quad_ms,
            attn_kv_read_ms,
            attn_decode_per_kv_ms,
            fixed_overhead_ms,
            tp_comm_ms: S::zero(),
            pp_send_ms: S::zero(),
            tile_size: 256,
            tile_penalty_frac: S::zero(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("params {}: {m}", self.name)));
        let consts = [
            ("mem_floor_ms", self.mem_floor_ms),
            ("per_token_linear_ms", self.per_token_linear_ms),
            ("attn_prefill_quad_ms", self.attn_prefill_quad_ms),
            ("attn_kv_read_ms", self.attn_kv_read_ms),
            ("attn_decode_per_kv_ms", self.attn_decode_per_kv_ms),
            ("fixed_overhead_ms", self.fixed_overhead_ms),
            ("tp_comm_ms", self.tp_comm_ms),
            ("pp_send_ms", self.pp_send_ms),
            ("tile_penalty_frac", self.tile_penalty_frac),
        ];
        for (field, v) in consts {
            if !v.is_finite() || v < S::zero() {
                return bad(format!("{field} must be finite and >= 0"));
            }
        }
        if self.saturation_tokens == 0 {
            return bad("saturation_tokens must be >= 1".into());
        }
        if self.tile_size == 0 || self.tp_degree == 0 || self.pp_degree == 0 {
            return bad("tile_size, tp_degree and pp_degree must be >= 1".into());
        }
        let expect = self.per_token_linear_ms * S::count(self.saturation_tokens);
        let scale = expect.abs().max(S::one());
        if (expect - self.mem_floor_ms).abs() > scale * S::of(1e-4) {
            return bad(format!(
                "mem_floor_ms {} != per_token_linear_ms * saturation_tokens ({})",
                self.mem_floor_ms, expect
            ));
        }
        Ok(())
    }

    /// Linear-layer time on one device: `max(T_mem, T_math)`.
    pub fn linear_time(&self, tokens: u64) -> S {
        if tokens == 0 {
            return S::zero();
        }
        self.mem_floor_ms.max(self.per_token_linear_ms * S::count(tokens))
    }

    /// Multiplier on compute-bound linear time for token counts that do not
    /// fill whole tiles. Never exceeds the cost of padding up to the next tile
    /// multiple, which keeps iteration time monotone in the token count.
    pub fn tile_penalty(&self, tokens: u64) -> S {
        if tokens == 0 || tokens % self.tile_size == 0 {
            return S::one();
        }
        let padded = tokens.div_ceil(self.tile_size) * self.tile_size;
        let pad_ratio = S::count(padded) / S::count(tokens);
        (S::one() + self.tile_penalty_frac).min(pad_ratio)
    }

    /// Linear-layer time with tile quantization and tensor-parallel sharding.
    pub fn sharded_linear_time(&self, tokens: u64, tp_degree: u64) -> S {
        if tokens == 0 {
            return S::zero();
        }
        let math = self.per_token_linear_ms * S::count(tokens) * self.tile_penalty(tokens);
        self.mem_floor_ms.max(math) / S::count(tp_degree.max(1))
    }

    /// Attention for one prefill chunk: causal attention inside the chunk plus
    /// reading the `prefix` tokens of the same prompt already in the KV cache.
    pub fn attn_prefill_chunk_time(&self, chunk: u64, prefix: u64) -> S {
        let c = S::count(chunk);
        self.attn_prefill_quad_ms * c * c + self.attn_kv_read_ms * c * S::count(prefix)
    }

    pub fn attn_decode_time(&self, kv_lengths: &[u64]) -> S {
        let total: u64 = kv_lengths.iter().sum();
        self.attn_decode_per_kv_ms * S::count(total)
    }

    pub fn iteration_cost(&self, batch: &Batch, tp_degree: u64) -> IterationCost<S> {
        if batch.is_empty() {
            return IterationCost {
                linear: S::zero(),
                attn_prefill: S::zero(),
                attn_decode: S::zero(),
                overhead: S::zero(),
            };
        }
        let attn_prefill = batch
            .entries
            .iter()
            .filter(|e| e.kind == EntryKind::PrefillChunk)
            .map(|e| self.attn_prefill_chunk_time(e.chunk_tokens, e.prefix_tokens))
            .sum();
        let attn_decode = self.attn_decode_per_kv_ms * S::count(batch.decode_kv_tokens());
        let comm = if tp_degree > 1 { self.tp_comm_ms } else { S::zero() };
        IterationCost {
            linear: self.sharded_linear_time(batch.total_tokens, tp_degree),
            attn_prefill,
            attn_decode,
            overhead: self.fixed_overhead_ms + comm,
        }
    }

    /// Full-iteration time of `batch`, summed over all pipeline stages.
    pub fn iteration_time(&self, batch: &Batch, tp_degree: u64) -> S {
        self.iteration_cost(batch, tp_degree).total()
    }

    /// Time one pipeline stage spends on `batch` (uniform layer split).
    pub fn stage_time(&self, batch: &Batch, tp_degree: u64, pp_degree: u64) -> S {
        self.iteration_time(batch, tp_degree) / S::count(pp_degree.max(1))
    }

    /// Decode-only iteration of 32 requests at 4k context each, on the
    /// deployment the parameters describe.
    pub fn decode_reference_time(&self) -> S {
        self.iteration_time(&reference_decode_batch(), self.tp_degree)
    }

    /// Sum of the iteration times needed to prefill a `prompt`-token request
    /// alone in chunks of at most `chunk` tokens.
    pub fn chunked_prefill_time(&self, prompt: u64, chunk: u64, tp_degree: u64) -> S {
        let chunk = chunk.max(1);
        let mut done = 0;
        let mut total = S::zero();
        while done < prompt {
            let c = chunk.min(prompt - done);
            total = total + self.iteration_time(&Batch::new(vec![prefill_entry(0, c, done)]), tp_degree);
            done += c;
        }
        total
    }

    /// KV-cache elements one layer holds for `tokens` tokens (keys and values).
    pub fn kv_elements_per_layer(&self, tokens: u64) -> u64 {
        2 * self.hidden_size * tokens
    }

    /// Converts every constant to another scalar type.
    pub fn cast<T: Scalar>(&self) -> CostModelParams<T> {
        let c = |v: S| T::of(v.as_f64());
        CostModelParams {
            name: self.name.clone(),
            hidden_size: self.hidden_size,
            ffn_size: self.ffn_size,
            tp_degree: self.tp_degree,
            pp_degree: self.pp_degree,
            mem_floor_ms: c(self.mem_floor_ms),
            per_token_linear_ms: c(self.per_token_linear_ms),
            saturation_tokens: self.saturation_tokens,
            attn_prefill_quad_ms: c(self.attn_prefill_quad_ms),
            attn_kv_read_ms: c(self.attn_kv_read_ms),
            attn_decode_per_kv_ms: c(self.attn_decode_per_kv_ms),
            fixed_overhead_ms: c(self.fixed_overhead_ms),
            tp_comm_ms: c(self.tp_comm_ms),
            pp_send_ms: c(self.pp_send_ms),
            tile_size: self.tile_size,
            tile_penalty_frac: c(self.tile_penalty_frac),
        }
    }
}

pub fn decode_entry(request_id: u64, kv_len: u64) -> BatchEntry {
    BatchEntry {
        request_id,
        kind: EntryKind::Decode,
        chunk_tokens: 1,
        prefix_tokens: kv_len.saturating_sub(1),
    }
}

pub fn prefill_entry(request_id: u64, chunk: u64, prefix: u64) -> BatchEntry {
    BatchEntry {
        request_id,
        kind: EntryKind::PrefillChunk,
        chunk_tokens: chunk,
        prefix_tokens: prefix,
    }
}

/// `count` decodes each attending `kv_len` tokens, with ids `0..count`.
pub fn uniform_decode_batch(count: u64, kv_len: u64) -> Batch {
    Batch::new((0..count).map(|i| decode_entry(i, kv_len)).collect())
}

pub fn reference_decode_batch() -> Batch {
    uniform_decode_batch(REFERENCE_DECODE_BATCH, REFERENCE_DECODE_KV)
}
