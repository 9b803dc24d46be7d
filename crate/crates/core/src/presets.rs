//! Bundled model presets.
//!
//! Synthetic parameter sets for four model classes, each describing the
//! tensor/pipeline deployment its constants were fitted for.

use serde::{Deserialize, Serialize};

use crate::costmodel::CostModelParams;
use crate::error::Result;
use crate::replica::{ReplicaConfig, SchedulerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPreset {
    pub description: String,
    /// KV-cache blocks (of 16 tokens) left after weights and activations.
    pub kv_blocks: u64,
    pub params: CostModelParams<f64>,
}

impl ModelPreset {
    /// Replica settings matching the preset's deployment.
    pub fn replica(&self, scheduler: SchedulerKind) -> ReplicaConfig {
        let mut cfg = ReplicaConfig::new(scheduler).with_parallelism(self.params.tp_degree, self.params.pp_degree);
        cfg.kv_blocks = self.kv_blocks;
        cfg.tile_size = self.params.tile_size;
        cfg
    }
}

const SOURCES: [(&str, &str); 4] = [
    ("mistral7b", include_str!("../presets/mistral7b.json")),
    ("yi34b", include_str!("../presets/yi34b.json")),
    ("llama2_70b", include_str!("../presets/llama2_70b.json")),
    ("falcon180b", include_str!("../presets/falcon180b.json")),
];

/// Names accepted by [`preset`].
pub fn preset_names() -> impl Iterator<Item = &'static str> {
    SOURCES.iter().map(|s| s.0)
}

pub fn preset(name: &str) -> Option<ModelPreset> {
    let (_, text) = SOURCES.iter().find(|s| s.0 == name)?;
    Some(parse(text).expect("bundled preset parses"))
}

fn parse(text: &str) -> Result<ModelPreset> {
    let p: ModelPreset = serde_json::from_str(text)?;
    p.params.validate()?;
    Ok(p)
}

pub fn mistral7b() -> ModelPreset {
    preset("mistral7b").unwrap()
}

pub fn yi34b() -> ModelPreset {
    preset("yi34b").unwrap()
}

pub fn llama2_70b() -> ModelPreset {
    preset("llama2_70b").unwrap()
}

pub fn falcon180b() -> ModelPreset {
    preset("falcon180b").unwrap()
}
