//! Discrete-event simulator for LLM inference serving.
//!
//! The crate models iteration-level batching policies (request-level, eager
//! prefill, hybrid, and stall-free chunked prefill) over a calibrated roofline
//! cost model, a paged KV cache and a pipeline-parallel replica, and provides
//! latency statistics and SLO capacity search on top.
//!
//! The cost model and statistics are generic over [`Scalar`] (`f32` or `f64`);
//! the event loop runs on integer microseconds.

pub mod costmodel;
pub mod error;
pub mod kvcache;
pub mod metrics;
pub mod num;
pub mod engine;
pub mod presets;
pub mod reference;
pub mod replica;
pub mod request;
pub mod sched;
pub mod workload;

pub use costmodel::CostModelParams;
pub use error::{Error, Result};
pub use kvcache::KvCache;
pub use num::Scalar;
pub use replica::{KvReserve, ReplicaConfig, SchedulerKind};
pub use request::{Batch, BatchEntry, EntryKind, Micros, Request, RequestId, RequestState};
pub use sched::{Pool, Scheduler};

/// Double-precision cost model parameters.
pub type Params = CostModelParams<f64>;
/// Single-precision cost model parameters.
pub type ParamsF32 = CostModelParams<f32>;
