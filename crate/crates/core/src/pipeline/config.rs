//! Flat TOML run configuration. Every key doubles as a CLI flag.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{descriptor_by_name, partition_stages, Preprocessor};
use crate::error::{Error, Result};
use crate::experts::Pooling;
use crate::fairness::StdKind;
use crate::inference::FusionMode;
use crate::model::ModelConfig;
use crate::training::{DrawGranularity, PoolPolicy, Scheme, TrainConfig};

/// Overrides `output_dir` when set.
pub const OUTPUT_ROOT_ENV: &str = "FAIRSIGHT_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: String,
    pub input_size: usize,
    /// Terminal stage of each expert, counted from 1.
    pub expert_stages: Vec<usize>,
    pub descriptor_len: usize,
    pub pooling: Pooling,
    pub threshold: f64,
    pub mean: [f64; 3],
    pub std: [f64; 3],

    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub pool_policy: PoolPolicy,
    pub draw: DrawGranularity,
    pub scheme: Scheme,
    pub fusion: FusionMode,

    /// Manifest column holding the class label.
    pub target: String,
    /// Manifest columns used only for fairness evaluation.
    pub protected: Vec<String>,
    /// Class name treated as positive for TPR, DEO and DEOdds.
    pub positive_label: String,
    pub std_kind: StdKind,
    /// Weight of the colour ramp when blending heatmaps over the image.
    pub heatmap_alpha: f64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            backbone: "resnet50".into(),
            input_size: 448,
            expert_stages: vec![3, 4, 5],
            descriptor_len: 512,
            pooling: Pooling::Max,
            threshold: 0.5,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            patience: t.patience,
            seed: t.seed,
            pool_policy: t.pool_policy,
            draw: t.draw,
            scheme: t.scheme,
            fusion: t.fusion,
            target: "target".into(),
            protected: Vec::new(),
            positive_label: "1".into(),
            std_kind: StdKind::Population,
            heatmap_alpha: 0.5,
            output_dir: "runs".into(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Every configuration key, in file order.
    pub fn keys() -> Vec<String> {
        // The file is flat, so every line of the default rendering is one key.
        Self::default()
            .to_toml()
            .expect("default serialises")
            .lines()
            .filter_map(|l| l.split_once(" = ").map(|(k, _)| k.trim().to_string()))
            .collect()
    }

    /// Applies `key = value` overrides, where values use TOML syntax and
    /// bare words are read as strings.
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let toml::Value::Table(mut table) = toml::Value::try_from(self).map_err(|e| Error::ConfigParse(e.to_string()))?
        else {
            unreachable!("a struct serialises to a table")
        };
        let keys = Self::keys();
        for (key, raw) in overrides {
            if !keys.iter().any(|k| k == key) {
                return Err(Error::ConfigParse(format!("unknown configuration key `{key}`")));
            }
            let mut value = parse_value(raw);
            // `--protected a,b` for list-valued keys
            if matches!(table.get(key), Some(toml::Value::Array(_))) && !value.is_array() {
                value = toml::Value::Array(raw.split(',').map(|v| parse_value(v.trim())).collect());
            }
            table.insert(key.to_string(), value);
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::ConfigParse(e.to_string()))
    }

    /// Replaces `output_dir` from the environment when the variable is set.
    pub fn with_env(mut self) -> Self {
        if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV) {
            self.output_dir = root.into();
        }
        self
    }

    /// Collects every problem rather than stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        match descriptor_by_name(&self.backbone, self.input_size).and_then(|d| partition_stages(&d)) {
            Ok(stages) => {
                let m = stages.stage_count();
                if self.expert_stages.is_empty() {
                    errors.push("expert_stages must name at least one stage".into());
                }
                if self.expert_stages.windows(2).any(|w| w[0] >= w[1]) {
                    errors.push(format!("expert_stages must strictly increase, got {:?}", self.expert_stages));
                }
                if let Some(&s) = self.expert_stages.iter().find(|&&s| s == 0 || s > m) {
                    errors.push(format!("expert stage {s} outside 1..={m} for {}", self.backbone));
                }
                if self.expert_stages.last().is_some_and(|&s| s != m) {
                    errors.push(format!("the deepest expert must end at the final stage {m}"));
                }
            }
            Err(e) => errors.push(format!("backbone: {e}")),
        }
        if self.descriptor_len < 2 || self.descriptor_len % 2 != 0 {
            errors.push(format!("descriptor_len must be even and >= 2, got {}", self.descriptor_len));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            errors.push(format!("threshold must lie in [0, 1], got {}", self.threshold));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            errors.push("std entries must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.heatmap_alpha) {
            errors.push(format!("heatmap_alpha must lie in [0, 1], got {}", self.heatmap_alpha));
        }
        if self.target.is_empty() {
            errors.push("target column name is empty".into());
        }
        if self.protected.contains(&self.target) {
            errors.push(format!("`{}` cannot be both target and protected", self.target));
        }
        if let Err(Error::Validation(more)) = self.train_config().validate() {
            errors.extend(more);
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            patience: self.patience,
            seed: self.seed,
            pool_policy: self.pool_policy,
            draw: self.draw,
            scheme: self.scheme,
            fusion: self.fusion,
        }
    }

    /// The only place 1-based stage numbers become 0-based indices.
    pub fn model_config(&self, classes: usize) -> ModelConfig {
        ModelConfig {
            classes,
            descriptor_len: self.descriptor_len,
            pooling: self.pooling,
            expert_stages: self.expert_stages.iter().map(|s| s.saturating_sub(1)).collect(),
            threshold: self.threshold,
        }
    }

    pub fn preprocessor(&self) -> Preprocessor {
        Preprocessor {
            size: self.input_size,
            mean: self.mean,
            std: self.std,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
