use std::path::{Path, PathBuf};

use irrcnn::data::{AugmentConfig, DatasetId, LabelTask, Magnification, PatchConfig, PatchMode};
use irrcnn::eval::EvalOptions;
use irrcnn::model::ModelConfig;
use irrcnn::train::TrainConfig;
use irrcnn::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Source image directory for `ingest`.
    pub root: Option<PathBuf>,
    pub id: DatasetId,
    /// Keep only this magnification; `null` keeps all.
    pub magnification: Option<Magnification>,
    pub task: LabelTask,
    /// Share of samples assigned to train by `split`.
    pub train_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            root: None,
            id: DatasetId::Breakhis,
            magnification: None,
            task: LabelTask::Class,
            train_fraction: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub mode: PatchMode,
    pub patch_size: u32,
    pub patch_count: usize,
    /// When false, `augment` passes every image through unchanged.
    pub augment: bool,
    pub augmentation: AugmentConfig,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let p = PatchConfig::default();
        Self {
            mode: p.mode,
            patch_size: p.size,
            patch_count: p.count,
            augment: true,
            augmentation: AugmentConfig::default(),
        }
    }
}

impl PipelineSection {
    pub fn patch_config(&self) -> PatchConfig {
        PatchConfig {
            mode: self.mode,
            size: self.patch_size,
            count: self.patch_count,
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        if self.augment {
            self.augmentation.clone()
        } else {
            AugmentConfig {
                outputs_per_input: 1,
                ..self.augmentation.clone()
            }
        }
    }
}

/// The whole run configuration. Every key is optional in the JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub pipeline: PipelineSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSection::default(),
            pipeline: PipelineSection::default(),
            model: ModelConfig::standard(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dataset.train_fraction) {
            return Err(Error::Config(format!(
                "dataset.train_fraction = {} outside [0, 1]",
                self.dataset.train_fraction
            )));
        }
        self.pipeline.augmentation.validate()?;
        self.pipeline.patch_config().validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Every configuration key with its default, one per line.
pub fn keys_help() -> String {
    let mut rows = Vec::new();
    flatten("", &RunConfig::default().to_value(), &mut rows);
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from(
        "Configuration keys (JSON document given by --config; unknown keys are rejected; flags override keys):\n",
    );
    for (k, v) in rows {
        out.push_str(&format!("  {k:width$}  default {v}\n"));
    }
    out.push_str(
        "\nNotes: model.num_classes is replaced by the size of the label vocabulary; \
         model.input must match the image size produced by the patch stage.\n\
         Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.",
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_unknown_keys_fail() {
        let v = RunConfig::default().to_value();
        let back: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, RunConfig::default());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"lr": 0.1}}"#).is_err());
        let partial: RunConfig = serde_json::from_str(r#"{"train": {"initial_lr": 0.1}}"#).unwrap();
        assert_eq!(partial.train.initial_lr, 0.1);
        assert_eq!(partial.train.momentum, 0.9);
    }

    #[test]
    fn help_lists_nested_keys() {
        let h = keys_help();
        for key in ["train.initial_lr", "pipeline.augmentation.rotation_max_deg", "model.block_widths", "eval.level", "seed"] {
            assert!(h.contains(key), "{key} missing");
        }
    }
}
