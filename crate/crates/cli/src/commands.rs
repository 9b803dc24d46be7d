//! The four experiment commands. Each is a pure function of its config file
//! and seed; results go to the output directory.

use std::path::{Path, PathBuf};

use batchsim::costmodel::{calibrate, AnchorSet};
use batchsim::engine::{simulate, write_jsonl, SimOptions, SimReport};
use batchsim::metrics::{capacity_search, meets_slo, LatencyReport, SloMode, DEFAULT_WARMUP_FRAC};
use batchsim::presets::ModelPreset;
use batchsim::replica::{ReplicaConfig, SchedulerKind};
use batchsim::workload::to_requests;
use batchsim::{Error, Params};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Knob, Resolved, SweepMode, TokenBudget};
use crate::output::{write_atomic, write_csv, write_json};
use crate::CliError;

/// Command-line overrides shared by all commands.
#[derive(Debug, Clone, Default)]
pub struct CommandOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
}

fn load(path: &Path, opts: &CommandOptions) -> Result<(Resolved, PathBuf), CliError> {
    let (mut cfg, base) = ExperimentConfig::load(path)?;
    if let Some(seed) = opts.seed {
        cfg.workload.seed = seed;
    }
    let out = match (&opts.out, &cfg.output.dir) {
        (Some(o), _) => o.clone(),
        (None, Some(d)) => base.join(d),
        (None, None) => PathBuf::from("out"),
    };
    Ok((Resolved::new(cfg, &base)?, out))
}

/// Runs `f` over `items` on `jobs` threads, keeping input order.
fn par_map<T: Sync, R: Send>(jobs: Option<usize>, items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Result<Vec<R>, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {jobs:?} worker threads: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(f).collect()))
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateSummary {
    pub model: String,
    pub scheduler: SchedulerKind,
    pub replica: ReplicaConfig,
    pub slo: String,
    pub slo_ms: f64,
    pub meets_slo: bool,
    pub iterations: u64,
    pub bubble_time_ms: f64,
    pub latency: LatencyReport,
}

#[derive(Debug, Serialize)]
struct RequestRow {
    id: u64,
    arrival_ms: f64,
    prompt_tokens: u64,
    output_tokens: u64,
    sched_delay_ms: f64,
    ttft_ms: f64,
    finish_ms: f64,
    max_tbt_ms: f64,
}

fn request_rows(rep: &SimReport) -> Vec<RequestRow> {
    let ms = |us: u64| us as f64 / 1000.0;
    rep.requests
        .iter()
        .map(|r| RequestRow {
            id: r.id,
            arrival_ms: ms(r.arrival),
            prompt_tokens: r.prompt_tokens,
            output_tokens: r.output_tokens,
            sched_delay_ms: r.scheduled_time.map_or(0.0, |s| ms(s - r.arrival)),
            ttft_ms: r.ttft().map_or(0.0, ms),
            finish_ms: r.token_emit_times.last().map_or(0.0, |&t| ms(t)),
            max_tbt_ms: r.tbt_samples().max().map_or(0.0, ms),
        })
        .collect()
}

/// Simulates the configured workload; writes `report.json`, `events.jsonl`
/// and `requests.csv`.
pub fn cmd_simulate(config: &Path, opts: &CommandOptions) -> Result<SimulateSummary, CliError> {
    let (r, out) = load(config, opts)?;
    let slo = r.config.slo;
    let cfg = r.replica(r.config.replica.scheduler, None, slo)?;
    let trace = to_requests(&r.trace()?)?;
    let rep = simulate(&cfg, r.params(), &trace, SimOptions::default())?;
    let latency = LatencyReport::from_sim(&rep, DEFAULT_WARMUP_FRAC);
    let slo_ms = r.slo_ms(slo);
    let summary = SimulateSummary {
        model: r.params().name.clone(),
        scheduler: cfg.scheduler,
        replica: cfg,
        slo: slo.label(),
        slo_ms,
        meets_slo: meets_slo(&latency, slo_ms),
        iterations: rep.iterations,
        bubble_time_ms: rep.bubble_time() as f64 / 1000.0,
        latency,
    };
    write_json(&out.join("report.json"), &summary)?;
    let mut events = Vec::new();
    write_jsonl(&rep.events, &mut events)?;
    write_atomic(&out.join("events.jsonl"), &events)?;
    write_csv(&out.join("requests.csv"), &request_rows(&rep))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityRow {
    pub scheduler: SchedulerKind,
    pub slo: String,
    pub qps: f64,
    pub infeasible: bool,
}

#[derive(Debug, Clone, Serialize)]
struct ProbeRow {
    scheduler: SchedulerKind,
    slo: String,
    token_budget: u64,
    qps: f64,
    tbt_p99: f64,
    ttft_median: f64,
    sched_delay_median: f64,
    pass: bool,
}

fn budget_for(r: &Resolved, slo: SloMode) -> Option<TokenBudget> {
    r.config.capacity.as_ref().and_then(|c| c.token_budgets.get(&slo.label()).copied())
}

/// Capacity of every configured (scheduler, SLO) pair; writes
/// `capacity.csv` and `capacity_probes.csv`.
pub fn cmd_capacity(config: &Path, opts: &CommandOptions) -> Result<Vec<CapacityRow>, CliError> {
    let (r, out) = load(config, opts)?;
    let section = r.config.capacity.clone().unwrap_or_else(|| {
        serde_json::from_str("{}").expect("empty capacity section parses")
    });
    let search = r.capacity_search();
    let cases: Vec<(SchedulerKind, SloMode)> = section
        .schedulers
        .iter()
        .flat_map(|&k| section.slos.iter().map(move |&s| (k, s)))
        .collect();
    let results = par_map(opts.jobs, &cases, |&(kind, slo)| -> Result<_, CliError> {
        let cfg = match r.replica(kind, budget_for(&r, slo), slo) {
            Err(CliError::Sim(Error::InfeasibleSlo(_))) => return Ok((None, 0)),
            other => other?,
        };
        match capacity_search(&cfg, r.params(), &r.dataset, r.slo_ms(slo), &search) {
            Ok(res) => Ok((Some(res), cfg.token_budget)),
            Err(Error::InfeasibleSlo(_)) => Ok((None, cfg.token_budget)),
            Err(e) => Err(e.into()),
        }
    })?;
    let mut rows = Vec::new();
    let mut probes = Vec::new();
    for (&(kind, slo), res) in cases.iter().zip(results) {
        let (res, tau) = res?;
        rows.push(CapacityRow {
            scheduler: kind,
            slo: slo.label(),
            qps: res.as_ref().map_or(0.0, |c| c.qps),
            infeasible: res.is_none(),
        });
        for p in res.iter().flat_map(|c| &c.probes) {
            probes.push(ProbeRow {
                scheduler: kind,
                slo: slo.label(),
                token_budget: tau,
                qps: p.qps,
                tbt_p99: p.tbt_p99,
                ttft_median: p.ttft_median,
                sched_delay_median: p.sched_delay_median,
                pass: p.pass,
            });
        }
    }
    write_csv(&out.join("capacity.csv"), &rows)?;
    write_csv(&out.join("capacity_probes.csv"), &probes)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub knob: Knob,
    pub value: f64,
    pub scheduler: SchedulerKind,
    /// Offered load, or the capacity in capacity mode.
    pub qps: f64,
    pub tbt_p99: f64,
    pub ttft_median: f64,
    pub sched_delay_median: f64,
    pub throughput: f64,
    pub bubble_fraction: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRow {
    pub chunk: u64,
    pub prompt_tokens: u64,
    pub chunked_ms: f64,
    pub unchunked_ms: f64,
    pub overhead: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepResult {
    Runs(Vec<SweepRow>),
    Chunks(Vec<ChunkRow>),
}

fn as_count(knob: Knob, v: f64) -> Result<u64, CliError> {
    if v >= 1.0 && v.fract() == 0.0 {
        Ok(v as u64)
    } else {
        Err(CliError::Config(format!("{knob:?} values must be positive integers (got {v})")))
    }
}

/// Sweeps one knob; writes `sweep.csv` (or `chunk_overhead.csv`).
pub fn cmd_sweep(config: &Path, opts: &CommandOptions) -> Result<SweepResult, CliError> {
    let (r, out) = load(config, opts)?;
    let sweep = r
        .config
        .sweep
        .clone()
        .ok_or_else(|| CliError::Config("sweep command needs a `sweep` section".into()))?;
    if sweep.knob == Knob::ChunkSize {
        let rows = chunk_rows(r.params(), &sweep.values, sweep.prompt_tokens, r.config.replica.tp_degree.unwrap_or(r.params().tp_degree))?;
        write_csv(&out.join("chunk_overhead.csv"), &rows)?;
        return Ok(SweepResult::Chunks(rows));
    }
    if sweep.mode == SweepMode::Capacity && sweep.knob == Knob::Qps {
        return Err(CliError::Config("a capacity sweep cannot vary qps".into()));
    }
    let kind = r.config.replica.scheduler;
    let rows = par_map(opts.jobs, &sweep.values, |&v| sweep_point(&r, kind, sweep.knob, sweep.mode, v))?
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    write_csv(&out.join("sweep.csv"), &rows)?;
    Ok(SweepResult::Runs(rows))
}

fn sweep_point(r: &Resolved, kind: SchedulerKind, knob: Knob, mode: SweepMode, v: f64) -> Result<SweepRow, CliError> {
    let mut slo = r.config.slo;
    let mut budget = None;
    let mut qps = r.config.workload.qps;
    let mut cfg_override: Option<u64> = None;
    match knob {
        Knob::TokenBudget => budget = Some(TokenBudget::Fixed(as_count(knob, v)?)),
        Knob::Qps => qps = Some(v),
        Knob::MaxBatchSize => cfg_override = Some(as_count(knob, v)?),
        Knob::Slo => slo = SloMode::Ms(v),
        Knob::ChunkSize => unreachable!("handled by the chunk sweep"),
    }
    let mut cfg = r.replica(kind, budget, slo)?;
    if let Some(bs) = cfg_override {
        cfg.max_batch_size = bs;
        cfg.validate()?;
    }
    let slo_ms = r.slo_ms(slo);
    let row = |qps: f64, lat: &LatencyReport, pass: bool| SweepRow {
        knob,
        value: v,
        scheduler: kind,
        qps,
        tbt_p99: lat.tbt_p99,
        ttft_median: lat.ttft_median,
        sched_delay_median: lat.sched_delay_median,
        throughput: lat.throughput,
        bubble_fraction: lat.bubble_fraction,
        pass,
    };
    match mode {
        SweepMode::Simulate => {
            let qps = qps.ok_or_else(|| CliError::Config("a simulate sweep needs workload.qps".into()))?;
            let trace = if knob == Knob::Qps || r.config.workload.trace.is_none() {
                batchsim::workload::generate_trace(&r.dataset, qps, r.config.workload.n_requests, r.config.workload.seed)?
            } else {
                r.trace()?
            };
            let rep = simulate(&cfg, r.params(), &to_requests(&trace)?, SimOptions { record_events: false })?;
            let lat = LatencyReport::from_sim(&rep, DEFAULT_WARMUP_FRAC);
            let pass = meets_slo(&lat, slo_ms);
            Ok(row(qps, &lat, pass))
        }
        SweepMode::Capacity => {
            let search = r.capacity_search();
            match capacity_search(&cfg, r.params(), &r.dataset, slo_ms, &search) {
                Ok(res) => {
                    let best = res.probes.iter().filter(|p| p.pass && p.qps == res.qps).last().expect("best probe recorded");
                    let lat = LatencyReport {
                        tbt_p99: best.tbt_p99,
                        ttft_median: best.ttft_median,
                        sched_delay_median: best.sched_delay_median,
                        ..empty_latency()
                    };
                    Ok(row(res.qps, &lat, true))
                }
                Err(Error::InfeasibleSlo(_)) => Ok(row(0.0, &empty_latency(), false)),
                Err(e) => Err(e.into()),
            }
        }
    }
}

fn empty_latency() -> LatencyReport {
    LatencyReport {
        requests: 0,
        measured_requests: 0,
        ttft_median: 0.0,
        ttft_p99: 0.0,
        tbt_median: 0.0,
        tbt_p99: 0.0,
        tbt_max: 0.0,
        tbt_series: Vec::new(),
        sched_delay_median: 0.0,
        throughput: 0.0,
        bubble_fraction: 0.0,
        makespan: 0.0,
    }
}

fn chunk_rows(params: &Params, values: &[f64], prompt: u64, tp: u64) -> Result<Vec<ChunkRow>, CliError> {
    let unchunked = params.chunked_prefill_time(prompt, prompt, tp);
    values
        .iter()
        .map(|&v| {
            let chunk = as_count(Knob::ChunkSize, v)?;
            let chunked = params.chunked_prefill_time(prompt, chunk, tp);
            Ok(ChunkRow { chunk, prompt_tokens: prompt, chunked_ms: chunked, unchunked_ms: unchunked, overhead: chunked / unchunked - 1.0 })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrateOutcome {
    pub preset: ModelPreset,
    pub max_rel_error: f64,
    pub residuals: Vec<batchsim::costmodel::Residual<f64>>,
    pub notes: Vec<String>,
}

/// Fits parameters to an anchor file; writes `params.json` (a model preset
/// usable as `"model"` in other configs) and `residuals.json`.
pub fn cmd_calibrate(anchors: &Path, opts: &CommandOptions) -> Result<CalibrateOutcome, CliError> {
    let text = std::fs::read_to_string(anchors)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", anchors.display())))?;
    let set: AnchorSet<f64> = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: line {}, column {}: {e}", anchors.display(), e.line(), e.column())))?;
    let out = opts.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let cal = calibrate(&set)?;
    let outcome = CalibrateOutcome {
        preset: ModelPreset {
            description: format!("calibrated from {}", anchors.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned())),
            kv_blocks: ReplicaConfig::new(SchedulerKind::Vllm).kv_blocks,
            params: cal.params.clone(),
        },
        max_rel_error: cal.max_rel_error(),
        residuals: cal.residuals.clone(),
        notes: cal.notes.clone(),
    };
    write_json(&out.join("params.json"), &outcome.preset)?;
    write_json(&out.join("residuals.json"), &outcome)?;
    Ok(outcome)
}
