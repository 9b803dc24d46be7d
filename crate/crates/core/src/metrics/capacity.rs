use serde::{Deserialize, Serialize};

use super::{meets_slo, LatencyReport, DEFAULT_WARMUP_FRAC};
use crate::costmodel::CostModelParams;
use crate::engine::{simulate, SimOptions};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::replica::ReplicaConfig;
use crate::workload::{scale_arrivals, to_requests, unit_rate_trace, Dataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapacitySearch {
    /// Load assumed to pass; the search fails if it does not.
    pub qps_low: f64,
    /// Ratio between neighbouring probe loads; the result is within this
    /// factor of the true threshold.
    pub growth: f64,
    pub n_requests: usize,
    pub seed: u64,
    pub warmup_frac: f64,
    /// Cap on doubling steps over the probe grid.
    pub max_doublings: u32,
}

impl Default for CapacitySearch {
    fn default() -> Self {
        Self {
            qps_low: 0.01,
            growth: 1.05,
            n_requests: 2048,
            seed: 0,
            warmup_frac: DEFAULT_WARMUP_FRAC,
            max_doublings: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub qps: f64,
    pub tbt_p99: f64,
    pub ttft_median: f64,
    pub sched_delay_median: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityResult {
    /// Highest passing probe load.
    pub qps: f64,
    /// Probes in the order they ran.
    pub probes: Vec<Probe>,
    pub warnings: Vec<String>,
}

/// Highest load (queries per second) on the geometric grid
/// `qps_low * growth^k` at which the replica meets `slo_ms`.
///
/// The grid index is doubled until a probe fails, then bisected. Every probe
/// replays the same requests with arrival gaps scaled to its load, so probes
/// differ only in load.
pub fn capacity_search<S: Scalar>(
    cfg: &ReplicaConfig,
    params: &CostModelParams<S>,
    dataset: &Dataset,
    slo_ms: f64,
    search: &CapacitySearch,
) -> Result<CapacityResult> {
    if !(search.qps_low > 0.0 && search.growth > 1.0) {
        return Err(Error::InvalidConfig("capacity search needs qps_low > 0 and growth > 1".into()));
    }
    let base = unit_rate_trace(dataset, search.n_requests, search.seed)?;
    let mut probes = Vec::new();
    let mut run = |k: u64| -> Result<bool> {
        let qps = search.qps_low * search.growth.powi(k as i32);
        let trace = to_requests(&scale_arrivals(&base, qps))?;
        let rep = simulate(cfg, params, &trace, SimOptions { record_events: false })?;
        let lat = LatencyReport::from_sim(&rep, search.warmup_frac);
        let pass = meets_slo(&lat, slo_ms);
        probes.push(Probe {
            qps,
            tbt_p99: lat.tbt_p99,
            ttft_median: lat.ttft_median,
            sched_delay_median: lat.sched_delay_median,
            pass,
        });
        Ok(pass)
    };

    if !run(0)? {
        return Err(Error::InfeasibleSlo(format!(
            "{} fails the {slo_ms} ms target already at {} qps",
            cfg.scheduler, search.qps_low
        )));
    }
    let (mut lo, mut hi) = (0u64, None);
    let mut step = 1u64;
    for _ in 0..search.max_doublings {
        if run(step)? {
            lo = step;
            step *= 2;
        } else {
            hi = Some(step);
            break;
        }
    }
    let mut warnings = Vec::new();
    match hi {
        Some(mut hi) => {
            while hi - lo > 1 {
                let mid = lo + (hi - lo) / 2;
                if run(mid)? {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        }
        None => warnings.push(format!("no failing load found up to {} qps", search.qps_low * search.growth.powi(lo as i32))),
    }
    let best = search.qps_low * search.growth.powi(lo as i32);
    if probes.iter().any(|p| !p.pass && p.qps < best) {
        warnings.push("non-monotone probes: a lower load failed".into());
    }
    Ok(CapacityResult { qps: best, probes, warnings })
}
