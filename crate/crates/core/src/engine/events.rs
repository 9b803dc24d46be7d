use std::io::Write;

use serde::{Deserialize, Serialize};

use super::pipeline::BubbleClass;
use crate::error::Result;
use crate::request::{EntryKind, Micros, RequestId};

/// Compact batch entry as it appears in the log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LoggedEntry {
    pub request: RequestId,
    pub kind: EntryKind,
    pub tokens: u64,
    pub prefix: u64,
}

/// Variants are declared in the order events at the same instant are listed.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    StageEnd { micro_batch: u64, stage: u64 },
    TokenEmit { request: RequestId, index: u64 },
    RequestFinish { request: RequestId },
    Bubble { stage: u64, end_ms: TimeMs, class: BubbleClass },
    Arrival { request: RequestId, prompt_tokens: u64, output_tokens: u64 },
    BatchStart { micro_batch: u64, total_tokens: u64, entries: Vec<LoggedEntry> },
    StageStart { micro_batch: u64, stage: u64 },
}

/// A time carried as integer microseconds so events stay totally
/// ordered; serialized as a float.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TimeMs(pub Micros);

impl Serialize for TimeMs {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.0 as f64 / 1000.0)
    }
}

impl<'de> Deserialize<'de> for TimeMs {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let ms = f64::deserialize(d)?;
        Ok(TimeMs((ms * 1000.0).round() as Micros))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SimEvent {
    #[serde(rename = "time_ms")]
    pub time: TimeMs,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl SimEvent {
    pub fn new(time: Micros, kind: EventKind) -> Self {
        Self { time: TimeMs(time), kind }
    }

    pub fn micros(&self) -> Micros {
        self.time.0
    }
}

/// Puts events into their canonical order: by time, then kind, then payload.
pub fn canonicalize(events: &mut [SimEvent]) {
    events.sort();
}

/// Writes one JSON object per line.
pub fn write_jsonl<W: Write>(events: &[SimEvent], mut out: W) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_instant_order_follows_kind() {
        let mut ev = vec![
            SimEvent::new(5, EventKind::Arrival { request: 1, prompt_tokens: 3, output_tokens: 1 }),
            SimEvent::new(5, EventKind::StageEnd { micro_batch: 0, stage: 0 }),
            SimEvent::new(1, EventKind::RequestFinish { request: 0 }),
        ];
        canonicalize(&mut ev);
        assert_eq!(ev[0].micros(), 1);
        assert!(matches!(ev[1].kind, EventKind::StageEnd { .. }));
    }

    #[test]
    fn jsonl_round_trip() {
        let ev = vec![
            SimEvent::new(1500, EventKind::TokenEmit { request: 2, index: 0 }),
            SimEvent::new(
                2000,
                EventKind::BatchStart {
                    micro_batch: 1,
                    total_tokens: 1,
                    entries: vec![LoggedEntry { request: 2, kind: EntryKind::Decode, tokens: 1, prefix: 10 }],
                },
            ),
        ];
        let mut buf = Vec::new();
        write_jsonl(&ev, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("{\"time_ms\":1.5,\"kind\":\"token_emit\""));
        let back: Vec<SimEvent> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(back, ev);
    }
}
