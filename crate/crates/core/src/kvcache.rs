//! Paged KV-cache accounting: fixed-size blocks, allocated at admission,
//! grown during decode, returned at release.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::request::{Micros, RequestId};

pub fn blocks_needed(tokens: u64, block_size: u64) -> u64 {
    tokens.div_ceil(block_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Holding {
    tokens: u64,
    blocks: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvCache {
    total_blocks: u64,
    block_size: u64,
    /// Blocks held back from admission (never from growth).
    watermark_blocks: u64,
    free_blocks: u64,
    allocated: BTreeMap<RequestId, Holding>,
}

impl KvCache {
    pub fn new(total_blocks: u64, block_size: u64) -> Self {
        assert!(block_size >= 1, "block_size must be >= 1");
        Self {
            total_blocks,
            block_size,
            watermark_blocks: 0,
            free_blocks: total_blocks,
            allocated: BTreeMap::new(),
        }
    }

    pub fn with_watermark(mut self, frac: f64) -> Self {
        self.watermark_blocks = (self.total_blocks as f64 * frac).floor() as u64;
        self
    }

    pub fn total_blocks(&self) -> u64 {
        self.total_blocks
    }

    pub fn block_size(&self) -> u64 {
        self.block_size
    }

    pub fn free_blocks(&self) -> u64 {
        self.free_blocks
    }

    pub fn used_blocks(&self) -> u64 {
        self.total_blocks - self.free_blocks
    }

    pub fn utilization(&self) -> f64 {
        if self.total_blocks == 0 {
            0.0
        } else {
            self.used_blocks() as f64 / self.total_blocks as f64
        }
    }

    pub fn allocated(&self, id: RequestId) -> Option<u64> {
        self.allocated.get(&id).map(|h| h.blocks)
    }

    pub fn tokens(&self, id: RequestId) -> Option<u64> {
        self.allocated.get(&id).map(|h| h.tokens)
    }

    pub fn live_requests(&self) -> usize {
        self.allocated.len()
    }

    /// Whether `tokens` more tokens could be admitted without dipping into
    /// the watermark. Does not mutate state.
    pub fn can_allocate(&self, tokens: u64) -> bool {
        let need = blocks_needed(tokens, self.block_size);
        self.free_blocks >= need + self.watermark_blocks
    }

    /// Admission check for a request that will hold its prompt plus
    /// `reserve_decode_tokens` decode tokens.
    pub fn can_allocate_request(&self, prompt_tokens: u64, reserve_decode_tokens: u64) -> bool {
        self.can_allocate(prompt_tokens + reserve_decode_tokens)
    }

    /// Reserves blocks for a newly admitted request.
    pub fn allocate(&mut self, id: RequestId, tokens: u64) -> Result<()> {
        if self.allocated.contains_key(&id) {
            return Err(Error::contract(format!("request {id} already holds KV blocks")));
        }
        let blocks = blocks_needed(tokens, self.block_size);
        if blocks > self.free_blocks {
            return Err(Error::OutOfKvBlocks {
                request: id,
                needed: blocks - self.free_blocks,
                free: self.free_blocks,
                time_ms: f64::NAN,
            });
        }
        self.free_blocks -= blocks;
        self.allocated.insert(id, Holding { tokens, blocks });
        Ok(())
    }

    /// Grows a live request to cover `new_total_tokens`. Block counts never
    /// shrink; growth inside an existing reservation is free.
    pub fn grow(&mut self, id: RequestId, new_total_tokens: u64) -> Result<()> {
        let free = self.free_blocks;
        let block_size = self.block_size;
        let h = self
            .allocated
            .get_mut(&id)
            .ok_or_else(|| Error::contract(format!("grow of unknown request {id}")))?;
        let want = blocks_needed(new_total_tokens, block_size).max(h.blocks);
        let extra = want - h.blocks;
        if extra > free {
            return Err(Error::OutOfKvBlocks {
                request: id,
                needed: extra - free,
                free,
                time_ms: f64::NAN,
            });
        }
        h.blocks = want;
        h.tokens = h.tokens.max(new_total_tokens);
        self.free_blocks -= extra;
        Ok(())
    }

    pub fn release(&mut self, id: RequestId) -> Result<u64> {
        let h = self
            .allocated
            .remove(&id)
            .ok_or_else(|| Error::contract(format!("release of unknown request {id}")))?;
        self.free_blocks += h.blocks;
        Ok(h.blocks)
    }

    /// `free + sum(allocated) == total` and every holding matches its tokens.
    pub fn check_invariants(&self) -> bool {
        let held: u64 = self.allocated.values().map(|h| h.blocks).sum();
        held + self.free_blocks == self.total_blocks
            && self
                .allocated
                .values()
                .all(|h| h.blocks == blocks_needed(h.tokens, self.block_size))
    }
}

/// Attaches the simulation time to an out-of-blocks error.
pub(crate) fn at_time(err: Error, t: Micros) -> Error {
    match err {
        Error::OutOfKvBlocks { request, needed, free, .. } => Error::OutOfKvBlocks {
            request,
            needed,
            free,
            time_ms: t as f64 / 1000.0,
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn block_arithmetic() {
        assert_eq!(blocks_needed(0, 16), 0);
        assert_eq!(blocks_needed(100, 16), 7);
        assert_eq!(blocks_needed(128, 16), 8);
    }

    #[test]
    fn admission_checks() {
        let kv = KvCache::new(10, 16);
        assert!(kv.can_allocate_request(100, 0));
        let kv = KvCache::new(6, 16);
        assert!(!kv.can_allocate_request(100, 0));
        let kv = KvCache::new(7, 16);
        assert!(!kv.can_allocate_request(100, 16));
        assert!(kv.can_allocate_request(100, 0));
    }

    #[test]
    fn watermark_holds_back_admission_only() {
        let mut kv = KvCache::new(10, 16).with_watermark(0.2);
        assert!(!kv.can_allocate(16 * 9));
        assert!(kv.can_allocate(16 * 8));
        kv.allocate(1, 16 * 8).unwrap();
        // growth may use the held-back blocks
        kv.grow(1, 16 * 10).unwrap();
        assert_eq!(kv.free_blocks(), 0);
    }

    #[test]
    fn grow_within_and_across_blocks() {
        let mut kv = KvCache::new(20, 16);
        kv.allocate(1, 100).unwrap();
        assert_eq!(kv.allocated(1), Some(7));
        let free = kv.free_blocks();
        kv.grow(1, 112).unwrap();
        assert_eq!(kv.allocated(1), Some(7));
        assert_eq!(kv.free_blocks(), free);
        kv.grow(1, 113).unwrap();
        assert_eq!(kv.allocated(1), Some(8));
        assert_eq!(kv.free_blocks(), free - 1);
    }

    #[test]
    fn grow_without_free_block_fails() {
        let mut kv = KvCache::new(7, 16);
        kv.allocate(1, 112).unwrap();
        assert_eq!(kv.free_blocks(), 0);
        assert!(matches!(kv.grow(1, 113), Err(Error::OutOfKvBlocks { .. })));
        assert!(kv.check_invariants());
    }

    #[test]
    fn release_returns_blocks() {
        let mut kv = KvCache::new(20, 16);
        kv.allocate(3, 128).unwrap();
        assert_eq!(kv.release(3).unwrap(), 8);
        assert_eq!(kv.free_blocks(), 20);
        assert_eq!(kv.allocated(3), None);
        assert!(matches!(kv.release(3), Err(Error::Contract(_))));
    }

    #[derive(Debug, Clone)]
    enum Op {
        Alloc(u64, u64),
        Grow(u64, u64),
        Release(u64),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u64..8, 0u64..400).prop_map(|(r, t)| Op::Alloc(r, t)),
            (0u64..8, 0u64..600).prop_map(|(r, t)| Op::Grow(r, t)),
            (0u64..8).prop_map(Op::Release),
        ]
    }

    proptest! {
        // Replays random operation sequences against a naive token ledger.
        #[test]
        fn conservation_matches_naive_ledger(ops in proptest::collection::vec(op(), 1..200)) {
            let mut kv = KvCache::new(120, 16);
            let mut ledger: BTreeMap<u64, u64> = BTreeMap::new();
            for op in ops {
                let before: BTreeMap<u64, u64> =
                    ledger.keys().map(|&r| (r, kv.allocated(r).unwrap())).collect();
                match op {
                    Op::Alloc(r, t) => {
                        if kv.allocate(r, t).is_ok() {
                            prop_assert!(!ledger.contains_key(&r));
                            ledger.insert(r, t);
                        }
                    }
                    Op::Grow(r, t) => {
                        if kv.grow(r, t).is_ok() {
                            let e = ledger.get_mut(&r).unwrap();
                            *e = (*e).max(t);
                        }
                    }
                    Op::Release(r) => {
                        if kv.release(r).is_ok() {
                            ledger.remove(&r).unwrap();
                        }
                    }
                }
                prop_assert!(kv.check_invariants());
                let naive: u64 = ledger.values().map(|&t| blocks_needed(t, 16)).sum();
                prop_assert_eq!(kv.free_blocks() + naive, 120);
                for (r, b) in before {
                    if let Some(now) = kv.allocated(r) {
                        prop_assert!(now >= b, "blocks of {} shrank", r);
                    }
                }
            }
        }
    }
}
