//! In-order pipeline timing and bubble accounting.
//!
//! A micro-batch occupies each stage for the same per-stage time, hopping to
//! the next stage after `send` microseconds. A stage starts its next
//! micro-batch once it is free and the micro-batch has arrived from upstream.
//! Idle time on stage `s` while the next micro-batch is still upstream of `s`
//! is a bubble; the initial fill of a stage is not.

use serde::{Deserialize, Serialize};

use crate::request::{Batch, Micros};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BubbleClass {
    /// Consecutive micro-batches with different prefill token counts.
    PB1,
    /// A prefill micro-batch next to a decode-only one.
    PB2,
    /// Decode-only micro-batches with different attention cost.
    PB3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BubbleRecord {
    pub stage: u64,
    pub start: Micros,
    pub end: Micros,
    pub class: BubbleClass,
}

impl BubbleRecord {
    pub fn duration(&self) -> Micros {
        self.end - self.start
    }

    /// Bubble length expressed as full-iteration time, i.e. scaled back up
    /// over all `pp` stages.
    pub fn full_iteration_ms(&self, pp_degree: u64) -> f64 {
        (self.duration() * pp_degree) as f64 / 1000.0
    }
}

/// What bubble classification needs to know about a micro-batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MicroBatchShape {
    pub prefill_tokens: u64,
    pub decodes: u64,
    pub decode_kv: u64,
}

impl MicroBatchShape {
    pub fn of(batch: &Batch) -> Self {
        Self {
            prefill_tokens: batch.prefill_tokens(),
            decodes: batch.num_decodes() as u64,
            decode_kv: batch.decode_kv_tokens(),
        }
    }

    pub fn has_prefill(&self) -> bool {
        self.prefill_tokens > 0
    }
}

/// Classifies the idle interval between `prev` and `next` on one stage.
pub fn classify_bubble(prev: &MicroBatchShape, next: &MicroBatchShape) -> BubbleClass {
    match (prev.has_prefill(), next.has_prefill()) {
        (true, false) | (false, true) => BubbleClass::PB2,
        (true, true) => BubbleClass::PB1,
        (false, false) => BubbleClass::PB3,
    }
}

/// Stage occupancy of one micro-batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSpans {
    pub submit: Micros,
    /// `(start, end)` per stage.
    pub spans: Vec<(Micros, Micros)>,
}

impl StageSpans {
    pub fn final_end(&self) -> Micros {
        self.spans.last().map_or(self.submit, |s| s.1)
    }

    pub fn first_stage_end(&self) -> Micros {
        self.spans[0].1
    }
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    send: Micros,
    stage_free: Vec<Micros>,
    last: Vec<Option<MicroBatchShape>>,
    busy: Vec<Micros>,
}

impl Pipeline {
    pub fn new(pp_degree: u64, send: Micros) -> Self {
        let pp = pp_degree.max(1) as usize;
        Self {
            send,
            stage_free: vec![0; pp],
            last: vec![None; pp],
            busy: vec![0; pp],
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_free.len()
    }

    pub fn stage_free(&self, stage: usize) -> Micros {
        self.stage_free[stage]
    }

    /// Busy time accumulated per stage.
    pub fn busy(&self) -> &[Micros] {
        &self.busy
    }

    /// Places a micro-batch submitted at `submit` on every stage, returning
    /// its spans and any bubbles it closes.
    pub fn advance(&mut self, submit: Micros, stage_time: Micros, shape: MicroBatchShape) -> (StageSpans, Vec<BubbleRecord>) {
        let mut spans = Vec::with_capacity(self.stages());
        let mut bubbles = Vec::new();
        let mut ready = submit;
        for s in 0..self.stages() {
            if s > 0 {
                ready += self.send;
            }
            let start = ready.max(self.stage_free[s]);
            let end = start + stage_time;
            if let Some(prev) = &self.last[s] {
                // idle time on this stage while the micro-batch was upstream
                let idle_from = self.stage_free[s].max(submit);
                if s > 0 && start > idle_from {
                    bubbles.push(BubbleRecord {
                        stage: s as u64,
                        start: idle_from,
                        end: start,
                        class: classify_bubble(prev, &shape),
                    });
                }
            }
            self.stage_free[s] = end;
            self.last[s] = Some(shape);
            self.busy[s] += stage_time;
            spans.push((start, end));
            ready = end;
        }
        (StageSpans { submit, spans }, bubbles)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prefill(n: u64) -> MicroBatchShape {
        MicroBatchShape { prefill_tokens: n, decodes: 0, decode_kv: 0 }
    }

    fn decode(n: u64, kv: u64) -> MicroBatchShape {
        MicroBatchShape { prefill_tokens: 0, decodes: n, decode_kv: kv }
    }

    #[test]
    fn classification() {
        assert_eq!(classify_bubble(&prefill(4096), &decode(32, 4096 * 32)), BubbleClass::PB2);
        assert_eq!(classify_bubble(&prefill(4096), &prefill(1024)), BubbleClass::PB1);
        assert_eq!(classify_bubble(&decode(16, 64_000), &decode(16, 8_000)), BubbleClass::PB3);
    }

    #[test]
    fn single_stage_is_sequential_without_bubbles() {
        let mut p = Pipeline::new(1, 0);
        let (a, b1) = p.advance(0, 100, prefill(10));
        let (b, b2) = p.advance(100, 50, decode(1, 10));
        assert_eq!(a.spans, vec![(0, 100)]);
        assert_eq!(b.spans, vec![(100, 150)]);
        assert!(b1.is_empty() && b2.is_empty());
    }

    #[test]
    fn uniform_pipeline_only_fills() {
        let mut p = Pipeline::new(2, 0);
        let t = 100;
        let (a, _) = p.advance(0, t, decode(4, 100));
        let (b, _) = p.advance(a.first_stage_end(), t, decode(4, 100));
        assert_eq!(a.spans, vec![(0, 100), (100, 200)]);
        assert_eq!(b.spans, vec![(100, 200), (200, 300)]);
        // next iteration of a's requests once a leaves the last stage
        let (_, bub) = p.advance(a.final_end(), t, decode(4, 100));
        assert!(bub.is_empty());
    }

    #[test]
    fn prefill_then_decode_leaves_a_decode_sized_hole() {
        let mut p = Pipeline::new(2, 0);
        let (a, _) = p.advance(0, 575_000, prefill(4096));
        let (b, _) = p.advance(a.first_stage_end(), 100_000, decode(32, 32 * 4096));
        assert_eq!(b.spans[1], (1_150_000, 1_250_000));
        let (_, bub) = p.advance(a.final_end(), 575_000, prefill(4096));
        assert_eq!(bub.len(), 1);
        assert_eq!(bub[0].stage, 1);
        assert_eq!(bub[0].class, BubbleClass::PB2);
        assert_eq!(bub[0].duration(), 475_000);
        assert!((bub[0].full_iteration_ms(2) - 950.0).abs() < 1e-9);
    }

    #[test]
    fn send_hop_delays_downstream() {
        let mut p = Pipeline::new(3, 5);
        let (a, _) = p.advance(10, 20, decode(1, 1));
        assert_eq!(a.spans, vec![(10, 30), (35, 55), (60, 80)]);
        assert_eq!(p.busy(), &[20, 20, 20]);
    }
}
