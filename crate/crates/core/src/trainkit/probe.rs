//! Frozen-feature linear probing over patch classes.
//!
//! Probing measures representation quality without touching the encoder:
//! every patch of every scene becomes one example (nothing masked, nothing
//! dropped), a single affine classifier is fit on the training scenes with
//! the same AdamW-plus-cosine recipe the pretrainer uses, and accuracy is
//! reported on held-out scenes. The split is by scene, so patches from one
//! scene never appear on both sides. An oracle source that emits one-hot
//! class features bounds the probe from above and doubles as a self-test
//! of the fitting code.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_items, ExecMode};
use crate::model::EncoderStack;
use crate::nn::softmax_rows;
use crate::seeding::rng_for;

use super::optim::AdamW;
use super::schedule::learning_rate;
use super::PreparedScene;

/// Where probe features come from.
pub enum FeatureSource<'a> {
    /// A frozen encoder run over every patch of the scene.
    Encoder(&'a EncoderStack),
    /// One-hot encoding of the true class.
    Oracle,
}

/// Per-patch features, classes, and scene membership, flattened over all
/// scenes in scene order then patch order.
#[derive(Debug, Clone)]
pub struct ProbeDataset {
    pub features: Array2<f64>,
    pub classes: Vec<usize>,
    pub scene_of: Vec<usize>,
    pub n_scenes: usize,
    pub n_classes: usize,
}

impl ProbeDataset {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Fraction of scenes assigned to the training split.
    pub train_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn base() -> Self {
        ProbeConfig {
            train_fraction: 0.8,
            epochs: 200,
            batch_size: 64,
            base_lr: 1e-2,
            weight_decay: 0.0,
            warmup_epochs: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.train_fraction.is_finite()
            || self.train_fraction <= 0.0
            || self.train_fraction >= 1.0
        {
            return Err(Error::Config(format!(
                "train_fraction must be in (0,1), got {}",
                self.train_fraction
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "probe epochs and batch_size must be positive".into(),
            ));
        }
        if !self.base_lr.is_finite() || self.base_lr <= 0.0 {
            return Err(Error::Config(format!(
                "probe base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "probe weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub n_train: usize,
    pub n_eval: usize,
    pub n_classes: usize,
    pub feature_dim: usize,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
}

/// Builds the probe dataset: one example per patch, features from the
/// chosen source, classes from the per-patch majority labels.
pub fn featurize(
    scenes: &[PreparedScene],
    source: FeatureSource,
    mode: ExecMode,
) -> Result<ProbeDataset> {
    if scenes.is_empty() {
        return Err(Error::Precondition("featurizing needs at least one scene".into()));
    }
    let n_classes = scenes[0].n_classes;
    if scenes.iter().any(|s| s.n_classes != n_classes) {
        return Err(Error::Contract(
            "scenes disagree on the class count".into(),
        ));
    }

    let per_scene: Vec<Result<Array2<f64>>> = match source {
        FeatureSource::Encoder(enc) => map_items(mode, scenes, |s| enc.encode_full(&s.patches)),
        FeatureSource::Oracle => scenes
            .iter()
            .map(|s| {
                let mut x = Array2::zeros((s.patch_classes.len(), n_classes));
                for (row, &class) in s.patch_classes.iter().enumerate() {
                    x[[row, class]] = 1.0;
                }
                Ok(x)
            })
            .collect(),
    };

    let mut mats = Vec::with_capacity(scenes.len());
    for m in per_scene {
        mats.push(m?);
    }
    let dim = mats[0].ncols();
    let total: usize = mats.iter().map(|m| m.nrows()).sum();
    let mut features = Array2::zeros((total, dim));
    let mut classes = Vec::with_capacity(total);
    let mut scene_of = Vec::with_capacity(total);
    let mut row = 0usize;
    for (i, (scene, m)) in scenes.iter().zip(&mats).enumerate() {
        if m.ncols() != dim || m.nrows() != scene.patch_classes.len() {
            return Err(Error::Contract(format!(
                "scene {} produced a {}x{} feature block, expected {}x{}",
                scene.scene_id,
                m.nrows(),
                m.ncols(),
                scene.patch_classes.len(),
                dim
            )));
        }
        features
            .slice_mut(ndarray::s![row..row + m.nrows(), ..])
            .assign(m);
        classes.extend_from_slice(&scene.patch_classes);
        scene_of.extend(std::iter::repeat(i).take(m.nrows()));
        row += m.nrows();
    }
    Ok(ProbeDataset {
        features,
        classes,
        scene_of,
        n_scenes: scenes.len(),
        n_classes,
    })
}

fn predict(x: &ArrayView1<f64>, weight: &ArrayView2<f64>, bias: &ArrayView1<f64>) -> usize {
    let mut best = 0usize;
    let mut best_z = f64::NEG_INFINITY;
    for class in 0..weight.nrows() {
        let z = x.dot(&weight.row(class)) + bias[class];
        if z > best_z {
            best_z = z;
            best = class;
        }
    }
    best
}

fn accuracy(
    data: &ProbeDataset,
    rows: &[usize],
    weight: &ArrayView2<f64>,
    bias: &ArrayView1<f64>,
) -> f64 {
    let correct = rows
        .iter()
        .filter(|&&r| predict(&data.features.row(r), weight, bias) == data.classes[r])
        .count();
    correct as f64 / rows.len() as f64
}

/// Fits an affine classifier on the training scenes' frozen features and
/// reports held-out accuracy. Errors with [`Error::Stratification`] when
/// any class present in the dataset has no example in the training split.
pub fn linear_probe(data: &ProbeDataset, cfg: &ProbeConfig) -> Result<ProbeReport> {
    cfg.validate()?;
    if data.n_scenes < 2 {
        return Err(Error::Precondition(
            "probing needs at least two scenes to split".into(),
        ));
    }
    if data.is_empty() {
        return Err(Error::Precondition("probe dataset has no examples".into()));
    }
    if data.n_classes < 2 {
        return Err(Error::Precondition(
            "probing needs at least two classes".into(),
        ));
    }

    let mut scene_ids: Vec<usize> = (0..data.n_scenes).collect();
    let mut rng = rng_for(cfg.seed, "probe.split", &[]);
    scene_ids.shuffle(&mut rng);
    let n_train_scenes = ((cfg.train_fraction * data.n_scenes as f64).round() as usize)
        .clamp(1, data.n_scenes - 1);
    let mut in_train = vec![false; data.n_scenes];
    for &s in &scene_ids[..n_train_scenes] {
        in_train[s] = true;
    }
    let train_rows: Vec<usize> = (0..data.len())
        .filter(|&r| in_train[data.scene_of[r]])
        .collect();
    let eval_rows: Vec<usize> = (0..data.len())
        .filter(|&r| !in_train[data.scene_of[r]])
        .collect();

    let mut seen_in_train = vec![false; data.n_classes];
    for &r in &train_rows {
        seen_in_train[data.classes[r]] = true;
    }
    for r in 0..data.len() {
        let class = data.classes[r];
        if !seen_in_train[class] {
            return Err(Error::Stratification(format!(
                "class {class} has no training examples"
            )));
        }
    }

    let d = data.features.ncols();
    let c = data.n_classes;
    let n_flat = c * d + c;
    let mut params = vec![0.0f64; n_flat];
    let decay: Vec<bool> = (0..n_flat).map(|i| i < c * d).collect();
    let mut opt = AdamW::new(n_flat, cfg.weight_decay);

    let steps_per_epoch = train_rows.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let warmup_steps = (cfg.warmup_epochs * steps_per_epoch) as u64;
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        let mut order = train_rows.clone();
        let mut shuffle_rng = rng_for(cfg.seed, "probe.shuffle", &[epoch as u64]);
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            let lr = learning_rate(cfg.base_lr, step, warmup_steps, total_steps);
            let weight = ArrayView2::from_shape((c, d), &params[..c * d]).expect("weight view");
            let bias = ArrayView1::from_shape(c, &params[c * d..]).expect("bias view");
            let x = data.features.select(Axis(0), batch);
            let mut dz = x.dot(&weight.t()) + &bias;
            softmax_rows(&mut dz);
            for (row, &r) in batch.iter().enumerate() {
                dz[[row, data.classes[r]]] -= 1.0;
            }
            let inv_batch = 1.0 / batch.len() as f64;
            dz.mapv_inplace(|v| v * inv_batch);
            let dw = dz.t().dot(&x);
            let db = dz.sum_axis(Axis(0));
            let grads: Vec<f64> = dw.iter().copied().chain(db.iter().copied()).collect();
            opt.update(lr, &mut params, &grads, &decay)?;
            step += 1;
        }
    }

    let weight = ArrayView2::from_shape((c, d), &params[..c * d]).expect("weight view");
    let bias = ArrayView1::from_shape(c, &params[c * d..]).expect("bias view");
    Ok(ProbeReport {
        n_train: train_rows.len(),
        n_eval: eval_rows.len(),
        n_classes: c,
        feature_dim: d,
        train_accuracy: accuracy(data, &train_rows, &weight, &bias),
        eval_accuracy: accuracy(data, &eval_rows, &weight, &bias),
    })
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::{tiny_model_config, tiny_scenes};
    use super::*;
    use crate::model::PretrainModel;

    #[test]
    fn oracle_features_are_one_hot() {
        let scenes = tiny_scenes(2);
        let data = featurize(&scenes, FeatureSource::Oracle, ExecMode::Sequential).unwrap();
        assert_eq!(data.len(), 2 * scenes[0].patches.n_patches());
        assert_eq!(data.features.ncols(), data.n_classes);
        for r in 0..data.len() {
            let row = data.features.row(r);
            assert_eq!(row.sum(), 1.0);
            assert_eq!(row[data.classes[r]], 1.0);
        }
        assert_eq!(data.scene_of[0], 0);
        assert_eq!(data.scene_of[data.len() - 1], 1);
    }

    #[test]
    fn oracle_probe_reaches_perfect_accuracy() {
        let scenes = tiny_scenes(6);
        let data = featurize(&scenes, FeatureSource::Oracle, ExecMode::Sequential).unwrap();
        let mut cfg = ProbeConfig::base();
        cfg.seed = 3;
        let report = linear_probe(&data, &cfg).unwrap();
        assert_eq!(report.train_accuracy, 1.0);
        assert_eq!(report.eval_accuracy, 1.0);
        assert_eq!(report.n_train + report.n_eval, data.len());
    }

    #[test]
    fn encoder_probe_reports_sane_numbers() {
        let scenes = tiny_scenes(4);
        let model = PretrainModel::new(&tiny_model_config(), 17).unwrap();
        let data = featurize(&scenes, FeatureSource::Encoder(&model.enc), ExecMode::Sequential)
            .unwrap();
        assert_eq!(data.features.ncols(), tiny_model_config().embed_dim);
        let mut cfg = ProbeConfig::base();
        cfg.epochs = 5;
        let report = linear_probe(&data, &cfg).unwrap();
        assert_eq!(report.n_train + report.n_eval, data.len());
        assert!(report.n_eval > 0);
        assert!((0.0..=1.0).contains(&report.train_accuracy));
        assert!((0.0..=1.0).contains(&report.eval_accuracy));
    }

    #[test]
    fn probe_is_deterministic() {
        let scenes = tiny_scenes(4);
        let model = PretrainModel::new(&tiny_model_config(), 17).unwrap();
        let data = featurize(&scenes, FeatureSource::Encoder(&model.enc), ExecMode::Sequential)
            .unwrap();
        let mut cfg = ProbeConfig::base();
        cfg.epochs = 5;
        let first = linear_probe(&data, &cfg).unwrap();
        let second = linear_probe(&data, &cfg).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn stratification_error_when_a_class_never_trains() {
        let features = Array2::zeros((8, 3));
        let data = ProbeDataset {
            features,
            classes: vec![0, 1, 0, 1, 0, 2, 0, 2],
            scene_of: vec![0, 0, 0, 0, 1, 1, 1, 1],
            n_scenes: 2,
            n_classes: 3,
        };
        let mut cfg = ProbeConfig::base();
        cfg.train_fraction = 0.5;
        let result = linear_probe(&data, &cfg);
        assert!(matches!(result, Err(Error::Stratification(_))));
    }

    #[test]
    fn probe_rejects_degenerate_inputs() {
        let scenes = tiny_scenes(1);
        let data = featurize(&scenes, FeatureSource::Oracle, ExecMode::Sequential).unwrap();
        assert!(matches!(
            linear_probe(&data, &ProbeConfig::base()),
            Err(Error::Precondition(_))
        ));

        let mut cfg = ProbeConfig::base();
        cfg.train_fraction = 1.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}

