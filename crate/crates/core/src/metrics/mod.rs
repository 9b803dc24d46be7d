//! Latency statistics, SLO derivation and capacity search.

mod capacity;

pub use capacity::{capacity_search, CapacityResult, CapacitySearch, Probe};

use serde::{Deserialize, Serialize};

use crate::costmodel::CostModelParams;
use crate::engine::SimReport;
use crate::error::{Error, Result};
use crate::num::{micros_to_ms, Scalar};

/// Median scheduling delay above which a load is considered unsustainable.
pub const SCHED_DELAY_LIMIT_MS: f64 = 2000.0;
/// Share of the earliest requests left out of latency statistics.
pub const DEFAULT_WARMUP_FRAC: f64 = 0.05;

pub const STRICT_SLO_FACTOR: f64 = 5.0;
pub const RELAXED_SLO_FACTOR: f64 = 25.0;

/// Nearest-rank percentile: the element at index `ceil(p/100 * n) - 1` of
/// the sorted series.
pub fn percentile<T: Copy + PartialOrd>(series: &[T], p: f64) -> Result<T> {
    if series.is_empty() {
        return Err(Error::EmptySeries);
    }
    let mut v = series.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("percentile of unordered values"));
    Ok(v[rank_index(v.len(), p)])
}

fn rank_index(n: usize, p: f64) -> usize {
    let k = (p.clamp(0.0, 100.0) / 100.0 * n as f64).ceil() as usize;
    k.clamp(1, n) - 1
}

/// Percentile of an already sorted series.
fn sorted_percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        0.0
    } else {
        sorted[rank_index(sorted.len(), p)]
    }
}

/// `(strict, relaxed)` P99 TBT targets: 5x and 25x the reference decode
/// iteration.
pub fn slo_thresholds<S: Scalar>(params: &CostModelParams<S>) -> (S, S) {
    let t = params.decode_reference_time();
    (t * S::of(STRICT_SLO_FACTOR), t * S::of(RELAXED_SLO_FACTOR))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SloMode {
    Strict,
    Relaxed,
    /// Explicit target in milliseconds.
    Ms(f64),
}

impl SloMode {
    pub fn resolve<S: Scalar>(&self, params: &CostModelParams<S>) -> f64 {
        let (strict, relaxed) = slo_thresholds(params);
        match *self {
            SloMode::Strict => strict.as_f64(),
            SloMode::Relaxed => relaxed.as_f64(),
            SloMode::Ms(ms) => ms,
        }
    }

    pub fn label(&self) -> String {
        match self {
            SloMode::Strict => "strict".into(),
            SloMode::Relaxed => "relaxed".into(),
            SloMode::Ms(ms) => format!("{ms}ms"),
        }
    }
}

/// Summary statistics of one run. Latency fields are milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub requests: usize,
    pub measured_requests: usize,
    pub ttft_median: f64,
    pub ttft_p99: f64,
    pub tbt_median: f64,
    pub tbt_p99: f64,
    pub tbt_max: f64,
    #[serde(skip)]
    pub tbt_series: Vec<f64>,
    pub sched_delay_median: f64,
    /// Output tokens per second.
    pub throughput: f64,
    pub bubble_fraction: f64,
    pub makespan: f64,
}

impl LatencyReport {
    /// Statistics over all but the first `warmup_frac` of requests (by
    /// arrival order); throughput and bubbles cover the whole run.
    pub fn from_sim(report: &SimReport, warmup_frac: f64) -> Self {
        let n = report.requests.len();
        let skip = ((n as f64) * warmup_frac.clamp(0.0, 1.0)).ceil() as usize;
        let skip = if skip >= n { 0 } else { skip };
        let measured = &report.requests[skip..];

        let mut ttft: Vec<f64> = measured.iter().filter_map(|r| r.ttft()).map(micros_to_ms).collect();
        let mut tbt: Vec<f64> = measured.iter().flat_map(|r| r.tbt_samples()).map(micros_to_ms).collect();
        let mut delay: Vec<f64> = measured
            .iter()
            .filter_map(|r| r.scheduled_time.map(|s| micros_to_ms(s - r.arrival)))
            .collect();
        for v in [&mut ttft, &mut tbt, &mut delay] {
            v.sort_by(f64::total_cmp);
        }
        Self {
            requests: n,
            measured_requests: measured.len(),
            ttft_median: sorted_percentile(&ttft, 50.0),
            ttft_p99: sorted_percentile(&ttft, 99.0),
            tbt_median: sorted_percentile(&tbt, 50.0),
            tbt_p99: sorted_percentile(&tbt, 99.0),
            tbt_max: tbt.last().copied().unwrap_or(0.0),
            tbt_series: tbt,
            sched_delay_median: sorted_percentile(&delay, 50.0),
            throughput: report.throughput(),
            bubble_fraction: report.bubble_fraction(),
            makespan: micros_to_ms(report.makespan),
        }
    }
}

/// P99 TBT within `slo_ms` and median scheduling delay within the
/// sustainability limit.
pub fn meets_slo(report: &LatencyReport, slo_ms: f64) -> bool {
    report.tbt_p99 <= slo_ms && report.sched_delay_median <= SCHED_DELAY_LIMIT_MS
}
