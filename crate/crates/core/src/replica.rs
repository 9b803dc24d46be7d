use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Batching policy run by a replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    /// Admit a batch, run it until every request in it finishes.
    RequestLevel,
    /// Iteration-level, prefill-prioritizing, never mixes prefills and decodes.
    Vllm,
    /// Iteration-level hybrid batches of decodes plus whole prompts.
    Orca,
    /// Decodes first, then prefill chunks within the token budget.
    StallFree,
    /// Chunked prefills in their own batches, alternating with decode batches.
    ChunkedOnly,
}

impl SchedulerKind {
    pub const ALL: [SchedulerKind; 5] = [
        SchedulerKind::RequestLevel,
        SchedulerKind::Vllm,
        SchedulerKind::Orca,
        SchedulerKind::StallFree,
        SchedulerKind::ChunkedOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchedulerKind::RequestLevel => "request_level",
            SchedulerKind::Vllm => "vllm",
            SchedulerKind::Orca => "orca",
            SchedulerKind::StallFree => "stall_free",
            SchedulerKind::ChunkedOnly => "chunked_only",
        }
    }

    /// Policies that bound every batch by the token budget.
    pub fn uses_token_budget(self) -> bool {
        matches!(self, SchedulerKind::StallFree | SchedulerKind::ChunkedOnly)
    }
}

impl std::fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How many decode tokens to reserve in the KV cache when admitting a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvReserve {
    /// Reserve the request's full output length (known to the simulator).
    Output,
    /// Reserve a fixed number of tokens.
    Tokens(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicaConfig {
    pub scheduler: SchedulerKind,
    #[serde(default = "defaults::token_budget")]
    pub token_budget: u64,
    #[serde(default = "defaults::max_batch_size")]
    pub max_batch_size: u64,
    #[serde(default = "defaults::max_num_batched_tokens")]
    pub max_num_batched_tokens: u64,
    /// Orca batch-size cap; `max_batch_size / 4` when absent.
    #[serde(default)]
    pub orca_batch_size: Option<u64>,
    #[serde(default = "defaults::one")]
    pub tp_degree: u64,
    #[serde(default = "defaults::one")]
    pub pp_degree: u64,
    #[serde(default = "defaults::kv_blocks")]
    pub kv_blocks: u64,
    #[serde(default = "defaults::kv_block_size")]
    pub kv_block_size: u64,
    #[serde(default = "defaults::tile_size")]
    pub tile_size: u64,
    #[serde(default = "defaults::chunk_align")]
    pub chunk_align: u64,
    /// Fraction of KV blocks held back from admission.
    #[serde(default = "defaults::watermark")]
    pub kv_watermark_frac: f64,
    #[serde(default = "defaults::kv_reserve")]
    pub kv_reserve: KvReserve,
    /// Iteration cap after which a run is aborted.
    #[serde(default = "defaults::max_iterations")]
    pub max_iterations: u64,
}

mod defaults {
    use super::KvReserve;

    pub fn token_budget() -> u64 {
        512
    }
    pub fn max_batch_size() -> u64 {
        128
    }
    pub fn max_num_batched_tokens() -> u64 {
        4096
    }
    pub fn one() -> u64 {
        1
    }
    pub fn kv_blocks() -> u64 {
        16384
    }
    pub fn kv_block_size() -> u64 {
        16
    }
    pub fn tile_size() -> u64 {
        256
    }
    pub fn chunk_align() -> u64 {
        32
    }
    pub fn watermark() -> f64 {
        0.1
    }
    pub fn kv_reserve() -> KvReserve {
        KvReserve::Output
    }
    pub fn max_iterations() -> u64 {
        50_000_000
    }
}

impl ReplicaConfig {
    pub fn new(scheduler: SchedulerKind) -> Self {
        Self {
            scheduler,
            token_budget: defaults::token_budget(),
            max_batch_size: defaults::max_batch_size(),
            max_num_batched_tokens: defaults::max_num_batched_tokens(),
            orca_batch_size: None,
            tp_degree: 1,
            pp_degree: 1,
            kv_blocks: defaults::kv_blocks(),
            kv_block_size: defaults::kv_block_size(),
            tile_size: defaults::tile_size(),
            chunk_align: defaults::chunk_align(),
            kv_watermark_frac: defaults::watermark(),
            kv_reserve: defaults::kv_reserve(),
            max_iterations: defaults::max_iterations(),
        }
    }

    pub fn with_budget(mut self, tau: u64) -> Self {
        self.token_budget = tau;
        self
    }

    pub fn with_parallelism(mut self, tp: u64, pp: u64) -> Self {
        self.tp_degree = tp;
        self.pp_degree = pp;
        self
    }

    pub fn orca_cap(&self) -> u64 {
        self.orca_batch_size.unwrap_or((self.max_batch_size / 4).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.tp_degree == 0 || self.pp_degree == 0 {
            return bad("tp_degree and pp_degree must be >= 1".into());
        }
        if self.kv_block_size == 0 {
            return bad("kv_block_size must be >= 1".into());
        }
        if self.max_batch_size == 0 {
            return bad("max_batch_size must be >= 1".into());
        }
        if self.chunk_align == 0 || self.tile_size == 0 {
            return bad("chunk_align and tile_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.kv_watermark_frac) {
            return bad(format!("kv_watermark_frac {} outside [0, 1)", self.kv_watermark_frac));
        }
        if self.scheduler.uses_token_budget() {
            if self.token_budget < self.tile_size {
                return bad(format!(
                    "token_budget {} below tile_size {}",
                    self.token_budget, self.tile_size
                ));
            }
            if self.max_batch_size >= self.token_budget {
                return bad(format!(
                    "max_batch_size {} must be below token_budget {} so decodes always fit",
                    self.max_batch_size, self.token_budget
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for kind in SchedulerKind::ALL {
            ReplicaConfig::new(kind).validate().unwrap();
        }
    }

    #[test]
    fn budget_below_tile_rejected() {
        let cfg = ReplicaConfig::new(SchedulerKind::StallFree).with_budget(128);
        assert!(cfg.validate().is_err());
        // other policies ignore the budget
        let cfg = ReplicaConfig::new(SchedulerKind::Vllm).with_budget(128);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn orca_cap_defaults_to_quarter() {
        let cfg = ReplicaConfig::new(SchedulerKind::Orca);
        assert_eq!(cfg.orca_cap(), 32);
    }

    #[test]
    fn unknown_scheduler_lists_variants() {
        let err = serde_json::from_str::<ReplicaConfig>(r#"{"scheduler":"fifo"}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("stall_free") && msg.contains("vllm"), "{msg}");
    }
}
