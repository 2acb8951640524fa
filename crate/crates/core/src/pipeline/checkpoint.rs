//! Versioned JSON checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::write_atomic;
use crate::error::{Error, Result};
use crate::model::ExpertModel;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    pub classes: Vec<String>,
    pub model: ExpertModel,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

impl Checkpoint {
    pub fn new(config: RunConfig, classes: Vec<String>, model: ExpertModel) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config,
            classes,
            model,
        }
    }

    /// Refuses configurations whose architecture differs from the weights.
    pub fn check_compatible(&self, cfg: &RunConfig) -> Result<()> {
        let mut problems = Vec::new();
        let n = self.model.expert_count();
        if cfg.expert_stages.len() != n {
            problems.push(format!(
                "checkpoint has {n} experts, configuration asks for {}",
                cfg.expert_stages.len()
            ));
        }
        let stages: Vec<usize> = self.model.spans.iter().map(|s| s.terminal_stage + 1).collect();
        if cfg.expert_stages.len() == n && cfg.expert_stages != stages {
            problems.push(format!("expert stages {stages:?} vs {:?}", cfg.expert_stages));
        }
        if cfg.backbone != self.model.backbone.descriptor.name {
            problems.push(format!(
                "backbone `{}` vs `{}`",
                self.model.backbone.descriptor.name, cfg.backbone
            ));
        }
        if cfg.input_size != self.model.input_size().0 {
            problems.push(format!("input size {} vs {}", self.model.input_size().0, cfg.input_size));
        }
        if cfg.descriptor_len != self.config.descriptor_len {
            problems.push(format!(
                "descriptor length {} vs {}",
                self.config.descriptor_len, cfg.descriptor_len
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Incompatible(problems.join("; ")))
        }
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, serde_json::to_string(ck)?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let probe: VersionProbe = serde_json::from_str(&text)
        .map_err(|e| Error::Incompatible(format!("{}: not a checkpoint ({e})", path.display())))?;
    if probe.format_version != FORMAT_VERSION {
        return Err(Error::Incompatible(format!(
            "{} has format version {}, this build reads {FORMAT_VERSION}",
            path.display(),
            probe.format_version
        )));
    }
    Ok(serde_json::from_str(&text)?)
}
