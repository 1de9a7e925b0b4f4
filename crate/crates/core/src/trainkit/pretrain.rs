//! The pretraining loop: shuffled minibatches, per-scene gradients reduced
//! in input order, AdamW under warmup-plus-cosine, JSONL metrics, and
//! resumable checkpoints.
//!
//! Scene order, masking plans, and stochastic-depth draws all derive from
//! `(seed, epoch, scene index)`, and batch reductions run sequentially in
//! input order, so a run restarted from a step-`s` checkpoint reproduces
//! the uninterrupted run's remaining steps.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::container::{expect_f64, find_entry, read_array, write_array, ArrayData, ArrayEntry};
use crate::error::{Error, Result};
use crate::exec::map_items;
use crate::losses::{pool_student_mask_features, scene_loss, LossReport};
use crate::masking::build_masking_plan;
use crate::model::{PretrainModel, SceneGrad};
use crate::seeding::{derive_seed, rng_for};

use super::optim::{clip_grad_norm, flatten_grads, flatten_params, write_params, AdamW};
use super::schedule::learning_rate;
use super::{PreparedScene, TrainConfig};

/// One optimizer step's log line. Losses are batch means, and the
/// decomposition `l_total = l_mae + l_scene + l_object` holds exactly
/// because the total is accumulated from the logged component means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// 1-based optimizer step.
    pub step: u64,
    /// 0-based epoch the step belongs to.
    pub epoch: usize,
    pub l_mae: f64,
    pub l_scene: f64,
    pub l_object: f64,
    pub l_total: f64,
    pub lr: f64,
    /// Wall-clock seconds since this invocation started.
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Global step counter after this invocation.
    pub final_step: u64,
    pub total_steps: u64,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    /// First and last metrics records written by this invocation; `None`
    /// when no step ran.
    pub first_record: Option<MetricsRecord>,
    pub last_record: Option<MetricsRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainerManifest {
    step: u64,
    arrays: Vec<ArrayEntry>,
}

/// Writes the model checkpoint plus the optimizer moments and step
/// counter, everything a resumed run needs.
pub fn save_training_checkpoint(
    dir: &Path,
    model: &PretrainModel,
    opt: &AdamW,
    step: u64,
) -> Result<()> {
    model.save(dir)?;
    let (m, v) = opt.moments();
    let arrays = vec![
        write_array(dir, "opt.m", &[m.len()], &ArrayData::F64(m.to_vec()))?,
        write_array(dir, "opt.v", &[v.len()], &ArrayData::F64(v.to_vec()))?,
    ];
    let manifest = TrainerManifest { step, arrays };
    fs::write(
        dir.join("trainer.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Loads a training checkpoint back as (model, completed steps, first
/// moment, second moment).
pub fn load_training_checkpoint(dir: &Path) -> Result<(PretrainModel, u64, Vec<f64>, Vec<f64>)> {
    let model = PretrainModel::load(dir)?;
    let path = dir.join("trainer.json");
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let manifest: TrainerManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    let m = expect_f64(
        read_array(dir, find_entry(&manifest.arrays, "opt.m")?)?,
        "opt.m",
    )?;
    let v = expect_f64(
        read_array(dir, find_entry(&manifest.arrays, "opt.v")?)?,
        "opt.v",
    )?;
    Ok((model, manifest.step, m, v))
}

/// Forward and backward over one scene: epoch-seeded masking plan, pooled
/// mask weights, sampled stochastic depth, then the full loss gradient
/// flattened in parameter order.
fn scene_pass(
    model: &PretrainModel,
    scene: &PreparedScene,
    cfg: &TrainConfig,
    epoch: usize,
    scene_idx: usize,
) -> Result<(LossReport, Vec<f64>)> {
    let (r_w, r_f, r_d) = cfg.effective_ratios();
    let mask_seed = derive_seed(cfg.seed, "train.mask", &[epoch as u64, scene_idx as u64]);
    let plan = build_masking_plan(&scene.semantics, r_w, r_f, r_d, mask_seed)?;
    let (pools, _skipped) =
        pool_student_mask_features(&scene.patches, &plan, &scene.point_mask_ids, &scene.masks);
    let mut drop_rng = rng_for(cfg.seed, "train.drops", &[epoch as u64, scene_idx as u64]);
    let drops = model.sample_drops(&mut drop_rng);
    let (fwd, cache) = model.forward_scene(&scene.patches, &plan, &pools, &drops)?;
    let (mut report, mut upstream) =
        scene_loss(&fwd, &scene.patches, &plan, &pools, &scene.teacher)?;
    apply_distill_toggles(cfg, &mut report, &mut upstream);
    let mut grad = model.zeros_like();
    model.backward_scene(&cache, &upstream, &mut grad)?;
    Ok((report, flatten_grads(&mut grad)))
}

/// Disabled distillation terms contribute zero loss and zero gradient; the
/// total is re-accumulated in the standard component order either way.
fn apply_distill_toggles(cfg: &TrainConfig, report: &mut LossReport, upstream: &mut SceneGrad) {
    if !cfg.scene_distill {
        report.l_scene = 0.0;
        report.l_scene_img = 0.0;
        report.l_scene_txt = 0.0;
        upstream.d_scene_img_pred.fill(0.0);
        upstream.d_scene_txt_pred.fill(0.0);
    }
    if !cfg.object_distill {
        report.l_object = 0.0;
        report.l_object_img = 0.0;
        report.l_object_txt = 0.0;
        for g in &mut upstream.d_object_img_preds {
            g.fill(0.0);
        }
        for g in &mut upstream.d_object_txt_preds {
            g.fill(0.0);
        }
    }
    report.l_total = report.l_mae + report.l_scene + report.l_object;
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_for(seed, "train.shuffle", &[epoch as u64]);
    order.shuffle(&mut rng);
    order
}

#[derive(Serialize)]
struct DiagnosticScene {
    scene_id: String,
    l_mae: String,
    l_scene: String,
    l_object: String,
    l_total: String,
}

#[derive(Serialize)]
struct Diagnostic {
    step: u64,
    epoch: usize,
    batch: Vec<DiagnosticScene>,
}

/// Loss values go through `format!` so non-finite values survive JSON.
fn write_diagnostic(
    out_dir: &Path,
    step: u64,
    epoch: usize,
    reports: &[(String, LossReport)],
) -> Result<PathBuf> {
    let batch = reports
        .iter()
        .map(|(id, r)| DiagnosticScene {
            scene_id: id.clone(),
            l_mae: format!("{}", r.l_mae),
            l_scene: format!("{}", r.l_scene),
            l_object: format!("{}", r.l_object),
            l_total: format!("{}", r.l_total),
        })
        .collect();
    let path = out_dir.join(format!("diagnostic-step-{step:06}.json"));
    let diagnostic = Diagnostic { step, epoch, batch };
    fs::write(&path, serde_json::to_string_pretty(&diagnostic)?)?;
    Ok(path)
}

/// Runs (or resumes) a pretraining run over prepared scenes.
///
/// Writes `metrics.jsonl` (one line per optimizer step) and
/// `checkpoint-final/` under `out_dir`, plus `checkpoint-step-NNNNNN/`
/// directories at the configured cadence. With zero epochs the run still
/// writes the freshly initialized checkpoint and an empty metrics file.
///
/// `resume` names a checkpoint directory from an earlier invocation with
/// the same config and scenes; training continues from the step after it.
/// When `out_dir` already holds a metrics file from the interrupted run,
/// lines past the checkpoint are dropped before appending, keeping one
/// line per step.
pub fn pretrain(
    scenes: &[PreparedScene],
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Precondition(
            "pretraining needs at least one scene".into(),
        ));
    }

    fs::create_dir_all(out_dir)?;
    let (mut model, start_step, moments) = match resume {
        Some(dir) => {
            let (model, step, m, v) = load_training_checkpoint(dir)?;
            if model.config != cfg.model {
                return Err(Error::Config(
                    "checkpoint model configuration differs from the run configuration".into(),
                ));
            }
            (model, step, Some((m, v)))
        }
        None => {
            let init_seed = derive_seed(cfg.seed, "train.init", &[]);
            (PretrainModel::new(&cfg.model, init_seed)?, 0, None)
        }
    };

    let steps_per_epoch = cfg.steps_per_epoch(scenes.len());
    let total_steps = cfg.total_steps(scenes.len());
    let warmup_steps = cfg.warmup_steps(scenes.len());
    if start_step > total_steps {
        return Err(Error::Config(format!(
            "checkpoint is at step {start_step} but the run has only {total_steps} steps"
        )));
    }

    let mut flat = flatten_params(&mut model);
    let n_params = flat.values.len();
    let mut opt = match moments {
        Some((m, v)) => {
            if m.len() != n_params {
                return Err(Error::Contract(format!(
                    "checkpoint moments cover {} slots but the model has {n_params}",
                    m.len()
                )));
            }
            AdamW::from_state(cfg.weight_decay, start_step, m, v)?
        }
        None => AdamW::new(n_params, cfg.weight_decay),
    };

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = if resume.is_some() && metrics_path.is_file() {
        let kept: Vec<String> = fs::read_to_string(&metrics_path)?
            .lines()
            .filter(|line| {
                serde_json::from_str::<MetricsRecord>(line)
                    .map(|r| r.step <= start_step)
                    .unwrap_or(false)
            })
            .map(str::to_string)
            .collect();
        let mut file = fs::File::create(&metrics_path)?;
        for line in &kept {
            writeln!(file, "{line}")?;
        }
        file
    } else {
        fs::File::create(&metrics_path)?
    };

    let started = Instant::now();
    let mut step = start_step;
    let mut first_record = None;
    let mut last_record = None;

    for epoch in 0..cfg.epochs {
        let epoch_first = (epoch * steps_per_epoch) as u64;
        if epoch_first + steps_per_epoch as u64 <= start_step {
            continue;
        }
        let order = shuffled_indices(scenes.len(), cfg.seed, epoch);
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let this_step = epoch_first + batch_idx as u64;
            if this_step < start_step {
                continue;
            }
            let lr = learning_rate(cfg.base_lr, this_step, warmup_steps, total_steps);

            let outcomes = map_items(cfg.exec, batch, |&scene_idx| {
                scene_pass(&model, &scenes[scene_idx], cfg, epoch, scene_idx)
                    .map(|out| (scene_idx, out))
            });

            let scale = 1.0 / batch.len() as f64;
            let mut grad_mean = vec![0.0f64; n_params];
            let mut sum_mae = 0.0;
            let mut sum_scene = 0.0;
            let mut sum_object = 0.0;
            let mut reports = Vec::with_capacity(batch.len());
            for outcome in outcomes {
                let (scene_idx, (report, grad)) = outcome?;
                for (acc, g) in grad_mean.iter_mut().zip(&grad) {
                    *acc += g;
                }
                sum_mae += report.l_mae;
                sum_scene += report.l_scene;
                sum_object += report.l_object;
                reports.push((scenes[scene_idx].scene_id.clone(), report));
            }
            for g in grad_mean.iter_mut() {
                *g *= scale;
            }
            let l_mae = sum_mae * scale;
            let l_scene = sum_scene * scale;
            let l_object = sum_object * scale;
            let l_total = l_mae + l_scene + l_object;
            step = this_step + 1;

            if !l_total.is_finite() {
                let path = write_diagnostic(out_dir, step, epoch, &reports)?;
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!(
                        "batch mean loss {l_total}; diagnostic written to {}",
                        path.display()
                    ),
                });
            }

            if let Some(max_norm) = cfg.grad_clip {
                clip_grad_norm(&mut grad_mean, max_norm);
            }
            opt.update(lr, &mut flat.values, &grad_mean, &flat.decay)?;
            write_params(&mut model, &flat.values)?;

            let record = MetricsRecord {
                step,
                epoch,
                l_mae,
                l_scene,
                l_object,
                l_total,
                lr,
                seconds: started.elapsed().as_secs_f64(),
            };
            writeln!(metrics, "{}", serde_json::to_string(&record)?)?;
            if first_record.is_none() {
                first_record = Some(record.clone());
            }
            last_record = Some(record);

            if let Some(every) = cfg.checkpoint_every {
                if step % every as u64 == 0 && step < total_steps {
                    let dir = out_dir.join(format!("checkpoint-step-{step:06}"));
                    save_training_checkpoint(&dir, &model, &opt, step)?;
                }
            }
        }
    }
    metrics.flush()?;

    let final_checkpoint = out_dir.join("checkpoint-final");
    save_training_checkpoint(&final_checkpoint, &model, &opt, step)?;
    Ok(PretrainOutcome {
        final_step: step,
        total_steps,
        final_checkpoint,
        metrics_path,
        first_record,
        last_record,
    })
}
