//! Experiment configuration files.

use std::path::{Path, PathBuf};

use batchsim::costmodel::reference_decode_batch;
use batchsim::metrics::{CapacitySearch, SloMode};
use batchsim::presets::{self, ModelPreset};
use batchsim::replica::{KvReserve, ReplicaConfig, SchedulerKind};
use batchsim::sched::{compute_token_budget, BudgetSearch};
use batchsim::workload::{self, Dataset, TraceRecord};
use batchsim::Params;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelRef,
    pub replica: ReplicaSection,
    pub workload: WorkloadSection,
    #[serde(default = "default_slo")]
    pub slo: SloMode,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub capacity: Option<CapacitySection>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

fn default_slo() -> SloMode {
    SloMode::Strict
}

/// A bundled preset name, a path to a preset/params JSON file (relative to
/// the config file), or an inline preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Named(String),
    Inline(ModelPreset),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TokenBudget {
    Fixed(u64),
    /// `"auto"`: derived from the SLO by the budget search.
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoTag {
    Auto,
}

/// Replica settings; anything left out comes from the model's deployment or
/// the simulator defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicaSection {
    pub scheduler: SchedulerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_budget: Option<TokenBudget>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_batch_size: Option<u64>,
    /// Defaults to the workload's total-length cap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_num_batched_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orca_batch_size: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tp_degree: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pp_degree: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kv_blocks: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kv_block_size: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk_align: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kv_watermark_frac: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kv_reserve: Option<KvReserve>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<u64>,
}

impl ReplicaSection {
    pub fn new(scheduler: SchedulerKind) -> Self {
        Self {
            scheduler,
            token_budget: None,
            max_batch_size: None,
            max_num_batched_tokens: None,
            orca_batch_size: None,
            tp_degree: None,
            pp_degree: None,
            kv_blocks: None,
            kv_block_size: None,
            chunk_align: None,
            kv_watermark_frac: None,
            kv_reserve: None,
            max_iterations: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetRef {
    Named(String),
    Custom(Dataset),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qps: Option<f64>,
    /// CSV trace, relative to the config file. Replaces dataset and qps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    #[serde(default = "default_requests")]
    pub n_requests: usize,
    pub seed: u64,
}

fn default_requests() -> usize {
    1024
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacitySection {
    #[serde(default = "all_four")]
    pub schedulers: Vec<SchedulerKind>,
    #[serde(default = "both_slos")]
    pub slos: Vec<SloMode>,
    /// Budget per SLO label (`"strict"`, `"relaxed"`, `"<ms>ms"`); falls back
    /// to the replica section.
    #[serde(default)]
    pub token_budgets: std::collections::BTreeMap<String, TokenBudget>,
    #[serde(default)]
    pub search: CapacitySearchSection,
}

fn all_four() -> Vec<SchedulerKind> {
    vec![SchedulerKind::RequestLevel, SchedulerKind::Vllm, SchedulerKind::Orca, SchedulerKind::StallFree]
}

fn both_slos() -> Vec<SloMode> {
    vec![SloMode::Strict, SloMode::Relaxed]
}

/// Capacity-search knobs; the seed and request count come from the workload
/// section unless given here.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacitySearchSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qps_low: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub growth: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_requests: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_frac: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_doublings: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Knob {
    TokenBudget,
    Qps,
    MaxBatchSize,
    Slo,
    ChunkSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// One simulation per value at the workload's load.
    #[default]
    Simulate,
    /// One capacity search per value.
    Capacity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub knob: Knob,
    pub values: Vec<f64>,
    #[serde(default)]
    pub mode: SweepMode,
    /// Prompt length for the chunk-size sweep.
    #[serde(default = "default_prompt")]
    pub prompt_tokens: u64,
}

fn default_prompt() -> u64 {
    4096
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("line {}, column {}: {e}", e.line(), e.column())))
    }

    pub fn load(path: &Path) -> Result<(Self, PathBuf), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg = Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// A config with its file references resolved.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub model: ModelPreset,
    pub dataset: Dataset,
    base: PathBuf,
}

impl Resolved {
    pub fn new(config: ExperimentConfig, base: &Path) -> Result<Self, CliError> {
        let model = resolve_model(&config.model, base)?;
        model.params.validate()?;
        let dataset = match &config.workload.dataset {
            None => Dataset::openchat(),
            Some(DatasetRef::Named(n)) => Dataset::preset(n)
                .ok_or_else(|| CliError::Config(format!("unknown dataset `{n}`, expected one of `openchat`, `arxiv`")))?,
            Some(DatasetRef::Custom(d)) => d.clone(),
        };
        dataset.validate()?;
        if config.workload.trace.is_none() && config.workload.qps.is_none() && config.sweep.is_none() && config.capacity.is_none() {
            return Err(CliError::Config("workload needs either `qps` or `trace`".into()));
        }
        Ok(Self { config, model, dataset, base: base.to_path_buf() })
    }

    pub fn params(&self) -> &Params {
        &self.model.params
    }

    pub fn slo_ms(&self, slo: SloMode) -> f64 {
        slo.resolve(self.params())
    }

    /// Replica settings for `scheduler` under `slo` with `budget`.
    pub fn replica(&self, scheduler: SchedulerKind, budget: Option<TokenBudget>, slo: SloMode) -> Result<ReplicaConfig, CliError> {
        let s = &self.config.replica;
        let mut cfg = self.model.replica(scheduler);
        if let Some(v) = s.tp_degree {
            cfg.tp_degree = v;
        }
        if let Some(v) = s.pp_degree {
            cfg.pp_degree = v;
        }
        if let Some(v) = s.max_batch_size {
            cfg.max_batch_size = v;
        }
        cfg.max_num_batched_tokens = s.max_num_batched_tokens.unwrap_or(self.dataset.max_total);
        cfg.orca_batch_size = s.orca_batch_size;
        if let Some(v) = s.kv_blocks {
            cfg.kv_blocks = v;
        }
        if let Some(v) = s.kv_block_size {
            cfg.kv_block_size = v;
        }
        if let Some(v) = s.chunk_align {
            cfg.chunk_align = v;
        }
        if let Some(v) = s.kv_watermark_frac {
            cfg.kv_watermark_frac = v;
        }
        if let Some(v) = s.kv_reserve {
            cfg.kv_reserve = v;
        }
        if let Some(v) = s.max_iterations {
            cfg.max_iterations = v;
        }
        if scheduler.uses_token_budget() {
            cfg.token_budget = match budget.or(s.token_budget) {
                Some(TokenBudget::Fixed(t)) => t,
                None | Some(TokenBudget::Auto(_)) => compute_token_budget(
                    self.slo_ms(slo),
                    self.params(),
                    cfg.tp_degree,
                    cfg.pp_degree,
                    &reference_decode_batch(),
                    BudgetSearch { chunk_align: cfg.chunk_align, ..Default::default() },
                )?,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The configured trace, or one synthesized at the workload's load.
    pub fn trace(&self) -> Result<Vec<TraceRecord>, CliError> {
        let w = &self.config.workload;
        match (&w.trace, w.qps) {
            (Some(path), _) => Ok(workload::load_trace(&self.base.join(path))?),
            (None, Some(qps)) => Ok(workload::generate_trace(&self.dataset, qps, w.n_requests, w.seed)?),
            (None, None) => Err(CliError::Config("workload needs either `qps` or `trace`".into())),
        }
    }

    pub fn capacity_search(&self) -> CapacitySearch {
        let d = CapacitySearch::default();
        let s = self.config.capacity.as_ref().map(|c| c.search.clone()).unwrap_or_default();
        CapacitySearch {
            qps_low: s.qps_low.unwrap_or(d.qps_low),
            growth: s.growth.unwrap_or(d.growth),
            n_requests: s.n_requests.unwrap_or(d.n_requests),
            seed: self.config.workload.seed,
            warmup_frac: s.warmup_frac.unwrap_or(d.warmup_frac),
            max_doublings: s.max_doublings.unwrap_or(d.max_doublings),
        }
    }
}

fn resolve_model(model: &ModelRef, base: &Path) -> Result<ModelPreset, CliError> {
    match model {
        ModelRef::Inline(p) => Ok(p.clone()),
        ModelRef::Named(name) if name.ends_with(".json") => {
            let path = base.join(name);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::Config(format!("cannot read model file {}: {e}", path.display())))?;
            serde_json::from_str::<ModelPreset>(&text)
                .map_err(|e| CliError::Config(format!("{}: line {}, column {}: {e}", path.display(), e.line(), e.column())))
        }
        ModelRef::Named(name) => presets::preset(name).ok_or_else(|| {
            let names: Vec<_> = presets::preset_names().map(|n| format!("`{n}`")).collect();
            CliError::Config(format!("unknown model preset `{name}`, expected one of {}", names.join(", ")))
        }),
    }
}
