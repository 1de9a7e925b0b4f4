//! Training, probing, and ablation over prepared scenes.
//!
//! The pipeline runs in three stages. [`prepare_scene`] turns a stored
//! [`SceneRecord`] into the patch-level inputs the model consumes: FPS
//! centers, k-NN patches, pixel-derived patch semantics, per-point mask
//! assignments, and per-patch majority classes for probing. [`pretrain`]
//! optimizes the masked-autoencoding and distillation objectives with AdamW
//! under a warmup-plus-cosine schedule, logging one JSONL metrics line per
//! optimizer step and writing resumable checkpoints. [`linear_probe`] then
//! measures representation quality by fitting a single affine classifier on
//! frozen features, and [`run_ablation`] repeats pretrain-plus-probe with
//! individual objective components disabled.
//!
//! Every random choice derives from the run seed and a stage-specific
//! domain string, so a run can be reproduced or resumed step for step.

mod ablate;
mod optim;
mod pretrain;
mod probe;
mod schedule;

pub use ablate::{run_ablation, standard_rows, AblationRow, AblationTable, AblationToggles};
pub use optim::{
    clip_grad_norm, flatten_grads, flatten_params, write_params, AdamW, ParamFlat, ADAM_BETA1,
    ADAM_BETA2, ADAM_EPS,
};
pub use pretrain::{
    load_training_checkpoint, pretrain, save_training_checkpoint, MetricsRecord, PretrainOutcome,
};
pub use probe::{featurize, linear_probe, FeatureSource, ProbeConfig, ProbeDataset, ProbeReport};
pub use schedule::learning_rate;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::correspondence::{
    build_point_mask_map, classify_patches, project_points, PatchSemantics,
};
use crate::error::{Error, Result};
use crate::exec::{map_items, ExecMode};
use crate::losses::MaskDescriptor;
use crate::model::ModelConfig;
use crate::pointcloud::{fps, knn_group, PatchSet};
use crate::teacher::{SceneRecord, TeacherBundle};

/// A patch counts as foreground when strictly more than this fraction of
/// its points lie in foreground instance masks.
pub const DEFAULT_FOREGROUND_TAU: f64 = 0.5;

/// Hyperparameters for one pretraining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Epochs of linear learning-rate warmup before the cosine decay.
    pub warmup_epochs: usize,
    /// Overall masking ratio over kept patches.
    pub r_w: f64,
    /// Foreground masking ratio.
    pub r_f: f64,
    /// Background drop ratio.
    pub r_d: f64,
    /// Global gradient-norm clip; `None` leaves gradients unclipped.
    pub grad_clip: Option<f64>,
    /// Extra checkpoint cadence in optimizer steps; the final checkpoint is
    /// always written.
    pub checkpoint_every: Option<usize>,
    /// With this off, masking ignores semantics: r_f falls back to r_w and
    /// no background patch is dropped.
    pub semantic_masking: bool,
    pub scene_distill: bool,
    pub object_distill: bool,
    pub seed: u64,
    pub exec: ExecMode,
}

impl TrainConfig {
    /// Full-size run settings.
    pub fn base() -> Self {
        TrainConfig {
            model: ModelConfig::base(),
            epochs: 300,
            batch_size: 64,
            base_lr: 5e-4,
            weight_decay: 5e-2,
            warmup_epochs: 10,
            r_w: 0.7,
            r_f: 0.8,
            r_d: 0.4,
            grad_clip: None,
            checkpoint_every: None,
            semantic_masking: true,
            scene_distill: true,
            object_distill: true,
            seed: 0,
            exec: ExecMode::Parallel,
        }
    }

    /// Reduced settings that pretrain on a CPU in minutes.
    pub fn desk() -> Self {
        TrainConfig {
            model: ModelConfig::desk(),
            epochs: 50,
            batch_size: 8,
            ..TrainConfig::base()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !self.base_lr.is_finite() || self.base_lr <= 0.0 {
            return Err(Error::Config(format!(
                "base_lr must be positive and finite, got {}",
                self.base_lr
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..=1.0).contains(&self.r_w) {
            return Err(Error::Config(format!("r_w must be in [0,1], got {}", self.r_w)));
        }
        if !(0.0..=1.0).contains(&self.r_f) || self.r_f < self.r_w {
            return Err(Error::Config(format!(
                "r_f must be in [r_w,1], got r_f={} r_w={}",
                self.r_f, self.r_w
            )));
        }
        if !(0.0..1.0).contains(&self.r_d) {
            return Err(Error::Config(format!("r_d must be in [0,1), got {}", self.r_d)));
        }
        if let Some(clip) = self.grad_clip {
            if !clip.is_finite() || clip <= 0.0 {
                return Err(Error::Config(format!("grad_clip must be positive, got {clip}")));
            }
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive when set".into()));
        }
        Ok(())
    }

    /// Masking ratios after the semantic toggle: turning semantics off
    /// masks foreground at the overall rate and drops nothing.
    pub fn effective_ratios(&self) -> (f64, f64, f64) {
        if self.semantic_masking {
            (self.r_w, self.r_f, self.r_d)
        } else {
            (self.r_w, self.r_w, 0.0)
        }
    }

    pub fn steps_per_epoch(&self, n_scenes: usize) -> usize {
        n_scenes.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n_scenes: usize) -> u64 {
        (self.epochs * self.steps_per_epoch(n_scenes)) as u64
    }

    pub fn warmup_steps(&self, n_scenes: usize) -> u64 {
        (self.warmup_epochs * self.steps_per_epoch(n_scenes)) as u64
    }
}

/// One scene converted to model inputs, computed once and reused across
/// epochs. Masking plans and pooling weights still vary per epoch, so they
/// are rebuilt inside the training loop.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub scene_id: String,
    pub patches: PatchSet,
    pub semantics: PatchSemantics,
    /// Instance mask id of each point, -1 where unassigned.
    pub point_mask_ids: Vec<i32>,
    pub masks: Vec<MaskDescriptor>,
    pub teacher: TeacherBundle,
    /// Majority point label of each patch, shifted by one so background
    /// (label -1) is class 0 and label `l` is class `l + 1`.
    pub patch_classes: Vec<usize>,
    /// Label vocabulary size plus one for the background class.
    pub n_classes: usize,
}

/// Builds the patch-level view of a scene: FPS centers, k-NN patches,
/// point-to-mask assignment through the camera, patch semantics at
/// [`DEFAULT_FOREGROUND_TAU`], and per-patch probe classes.
pub fn prepare_scene(
    record: &SceneRecord,
    n_patches: usize,
    patch_size: usize,
) -> Result<PreparedScene> {
    let centers = fps(&record.cloud, n_patches, 0)?;
    let patches = knn_group(&record.cloud, &centers, patch_size)?;
    let projection = project_points(&record.cloud, &record.camera)?;
    let map = build_point_mask_map(&projection, &record.masks)?;
    let semantics = classify_patches(&patches, &map, &record.masks, DEFAULT_FOREGROUND_TAU)?;
    let masks: Vec<MaskDescriptor> = record
        .masks
        .masks
        .iter()
        .map(|m| MaskDescriptor {
            mask_id: m.mask_id,
            label_id: m.label_id,
            is_foreground: m.is_foreground,
        })
        .collect();
    let patch_classes = (0..patches.n_patches())
        .map(|p| patch_majority_class(&patches, &record.cloud.label_id, p))
        .collect();
    Ok(PreparedScene {
        scene_id: record.scene_id.clone(),
        patches,
        semantics,
        point_mask_ids: map.mask_id,
        masks,
        teacher: record.teacher.clone(),
        patch_classes,
        n_classes: record.label_vocab.len() + 1,
    })
}

/// Prepares every scene of a dataset, parallelizing per scene.
pub fn prepare_dataset(
    records: &[SceneRecord],
    n_patches: usize,
    patch_size: usize,
    mode: ExecMode,
) -> Result<Vec<PreparedScene>> {
    map_items(mode, records, |r| prepare_scene(r, n_patches, patch_size))
        .into_iter()
        .collect()
}

/// Most frequent point label in a patch, ties toward the lower label,
/// shifted so background maps to class 0.
fn patch_majority_class(patches: &PatchSet, labels: &[i32], patch: usize) -> usize {
    let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
    for &point in patches.neighbors(patch) {
        *counts.entry(labels[point]).or_insert(0) += 1;
    }
    let mut best_label = -1;
    let mut best_count = 0usize;
    for (&label, &count) in &counts {
        if count > best_count {
            best_count = count;
            best_label = label;
        }
    }
    (best_label + 1) as usize
}


#[cfg(test)]
mod tests {
    use super::fixtures::{tiny_model_config, tiny_scenes, tiny_train_config};
    use super::*;

    #[test]
    fn default_configs_validate() {
        TrainConfig::base().validate().unwrap();
        TrainConfig::desk().validate().unwrap();
        tiny_train_config().validate().unwrap();
    }

    #[test]
    fn validate_rejects_bad_settings() {
        let mut cfg = tiny_train_config();
        cfg.batch_size = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = tiny_train_config();
        cfg.base_lr = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = tiny_train_config();
        cfg.r_f = 0.5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = tiny_train_config();
        cfg.r_d = 1.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = tiny_train_config();
        cfg.grad_clip = Some(0.0);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = tiny_train_config();
        cfg.checkpoint_every = Some(0);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn semantic_toggle_flattens_ratios() {
        let mut cfg = tiny_train_config();
        assert_eq!(cfg.effective_ratios(), (0.7, 0.8, 0.4));
        cfg.semantic_masking = false;
        assert_eq!(cfg.effective_ratios(), (0.7, 0.7, 0.0));
    }

    #[test]
    fn step_counts_cover_partial_batches() {
        let mut cfg = tiny_train_config();
        cfg.batch_size = 2;
        cfg.epochs = 3;
        cfg.warmup_epochs = 1;
        assert_eq!(cfg.steps_per_epoch(5), 3);
        assert_eq!(cfg.total_steps(5), 9);
        assert_eq!(cfg.warmup_steps(5), 3);
    }

    #[test]
    fn prepare_scene_builds_consistent_views() {
        let scenes = tiny_scenes(2);
        let model = tiny_model_config();
        for scene in &scenes {
            assert_eq!(scene.patches.n_patches(), model.n_patches);
            assert_eq!(scene.patches.patch_size, model.patch_size);
            assert_eq!(scene.semantics.is_foreground.len(), model.n_patches);
            assert_eq!(scene.patch_classes.len(), model.n_patches);
            assert_eq!(scene.n_classes, 4);
            assert!(scene.patch_classes.iter().all(|&c| c < scene.n_classes));
            assert!(!scene.masks.is_empty());
            assert_eq!(scene.teacher.d_img, model.d_img);
            assert_eq!(scene.teacher.d_txt, model.d_txt);
        }
        assert_ne!(scenes[0].scene_id, scenes[1].scene_id);
    }

    #[test]
    fn majority_class_prefers_lower_label_on_ties() {
        let scenes = tiny_scenes(1);
        let patches = &scenes[0].patches;
        let mut labels = vec![-1i32; scenes[0].point_mask_ids.len()];
        let neighbors = patches.neighbors(0);
        for (i, &point) in neighbors.iter().enumerate() {
            labels[point] = if i % 2 == 0 { 2 } else { 1 };
        }
        assert_eq!(patch_majority_class(patches, &labels, 0), 2);
    }
}
