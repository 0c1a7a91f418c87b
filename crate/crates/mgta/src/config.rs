//! Run configuration: one strict-schema JSON file drives dataset
//! generation, training, evaluation, and inspection. Unknown keys are
//! rejected; every field has a default so partial files stay valid.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::points::{AugmentParams, SceneSpec};
use std::path::Path;

/// Dataset generation settings.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    /// Sequences to generate.
    pub count: usize,
    /// Output directory for the dataset.
    pub out_dir: String,
}

impl Default for GenConfig {
    fn default() -> GenConfig {
        GenConfig {
            count: 4,
            out_dir: "data".to_string(),
        }
    }
}

/// Two-stage training settings.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Directory holding a generated dataset.
    pub data_dir: String,
    /// Output directory for checkpoints and the loss log.
    pub out_dir: String,
    /// Epochs of single-frame pre-training (stage 1).
    pub stage1_epochs: usize,
    /// Epochs of full-pipeline fine-tuning (stage 2).
    pub stage2_epochs: usize,
    /// Peak learning rate of the one-cycle schedule in stage 1; stage 2
    /// peaks at one fifth of it.
    pub lr_max: f64,
    pub seed: u64,
    /// Apply global flip/rotation/scale augmentation.
    pub augment: bool,
    pub augment_params: AugmentParams,
    /// Paste donor objects harvested from other training sequences.
    pub gt_sampling: bool,
    /// Minimum points for a box to enter the donor bank.
    pub gt_sampling_min_points: usize,
    /// Path to an existing single-frame checkpoint; set to skip stage 1.
    pub stage1_init: Option<String>,
    /// Sequences used for the in-training quality probe that tracks the
    /// best checkpoint (0 disables the probe).
    pub probe_sequences: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            data_dir: "data".to_string(),
            out_dir: "runs/default".to_string(),
            stage1_epochs: 8,
            stage2_epochs: 8,
            lr_max: 3e-3,
            seed: 0,
            augment: true,
            augment_params: AugmentParams::default(),
            gt_sampling: false,
            gt_sampling_min_points: 20,
            stage1_init: None,
            probe_sequences: 0,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.lr_max.is_finite() && self.lr_max > 0.0) {
            return Err(Error::config(format!(
                "peak learning rate must be positive, got {}",
                self.lr_max
            )));
        }
        Ok(())
    }
}

/// Evaluation settings.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub data_dir: String,
    pub checkpoint: String,
    pub out_dir: String,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> EvalConfig {
        EvalConfig {
            data_dir: "data".to_string(),
            checkpoint: "runs/default/model.ckpt".to_string(),
            out_dir: "runs/default/eval".to_string(),
            seed: 0,
        }
    }
}

/// Diagnostic dump settings.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InspectConfig {
    pub checkpoint: String,
    /// Path to one sequence directory.
    pub sequence: String,
    /// One of: bev, motion, offsets, attention, heatmap.
    pub selector: String,
    pub out_dir: String,
    pub seed: u64,
}

impl Default for InspectConfig {
    fn default() -> InspectConfig {
        InspectConfig {
            checkpoint: "runs/default/model.ckpt".to_string(),
            sequence: "data/seq_000".to_string(),
            selector: "bev".to_string(),
            out_dir: "runs/default/inspect".to_string(),
            seed: 0,
        }
    }
}

/// Everything one run needs, in one file.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub scene: SceneSpec,
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub inspect: InspectConfig,
    /// Seed for dataset generation.
    pub seed: u64,
}

impl RunConfig {
    pub fn check(&self) -> Result<()> {
        self.model.check()?;
        self.scene.check()?;
        self.train.check()?;
        if self.scene.frames < self.model.frames {
            return Err(Error::config(format!(
                "scenes have {} frames but the model window needs {}",
                self.scene.frames, self.model.frames
            )));
        }
        if self.scene.scans_per_frame != self.model.n_scans {
            return Err(Error::config(format!(
                "scenes carry {} scans per frame but the model expects {}",
                self.scene.scans_per_frame, self.model.n_scans
            )));
        }
        Ok(())
    }
}

/// Parses and validates a config file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("config {}: {e}", path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("config {}: {e}", path.display())))?;
    cfg.check()?;
    Ok(cfg)
}
