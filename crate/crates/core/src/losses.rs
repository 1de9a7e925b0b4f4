//! Pretraining losses: masked-patch reconstruction plus scene-level and
//! object-level feature distillation against a frozen teacher.
//!
//! Every loss comes with its gradient so one scene pass produces both a
//! `LossReport` and the upstream `SceneGrad` for `backward_scene`. The
//! total is accumulated in a fixed order (reconstruction, scene, object)
//! and the report keeps each component, so the decomposition is exact.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::masking::MaskingPlan;
use crate::model::{
    decoder_rows, MaskPool, PretrainModel, SceneForward, SceneGrad,
};
use crate::nn::DropDecision;
use crate::pointcloud::{dist2, PatchSet};
use crate::teacher::TeacherBundle;

/// Huber transition point shared by every distillation term.
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// All loss components from one scene pass. `l_total` is always
/// `l_mae + l_scene + l_object` in that accumulation order, and each
/// aggregate equals the sum of its stored parts.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub l_mae: f64,
    pub l_scene: f64,
    pub l_scene_img: f64,
    pub l_scene_txt: f64,
    pub l_object: f64,
    pub l_object_img: f64,
    pub l_object_txt: f64,
    pub l_total: f64,
    /// No patches were masked, so the reconstruction term is vacuous.
    pub zero_masked_patches: bool,
    /// No instance mask survived pooling, so the object term is vacuous.
    pub zero_object_masks: bool,
}

/// Mean smooth-L1 over paired elements: 0.5 d^2/beta inside the quadratic
/// zone, |d| - 0.5 beta outside.
pub fn smooth_l1(pred: &Array1<f64>, target: &Array1<f64>, beta: f64) -> f64 {
    assert_eq!(pred.len(), target.len());
    assert!(beta > 0.0);
    let mut total = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        let d = p - t;
        total += if d.abs() < beta {
            0.5 * d * d / beta
        } else {
            d.abs() - 0.5 * beta
        };
    }
    total / pred.len() as f64
}

/// Gradient of `smooth_l1` with respect to `pred`, scaled by `upstream`.
pub fn smooth_l1_grad(
    pred: &Array1<f64>,
    target: &Array1<f64>,
    beta: f64,
    upstream: f64,
) -> Array1<f64> {
    let n = pred.len() as f64;
    Array1::from_shape_fn(pred.len(), |i| {
        let d = pred[i] - target[i];
        let slope = if d.abs() < beta { d / beta } else { d.signum() };
        upstream * slope / n
    })
}

/// Symmetric chamfer distance with its gradient on the first set. The
/// value reproduces `pointcloud::chamfer_l2` bit for bit.
pub fn chamfer_with_grad(pred: &[[f64; 3]], target: &[[f64; 3]]) -> Result<(f64, Vec<[f64; 3]>)> {
    if pred.is_empty() || target.is_empty() {
        return Err(Error::Precondition(
            "chamfer_l2 requires two non-empty point sets".into(),
        ));
    }
    let mut grad = vec![[0.0; 3]; pred.len()];
    let inv_pred = 1.0 / pred.len() as f64;
    let inv_target = 1.0 / target.len() as f64;

    let mut forward = 0.0;
    for (i, &p) in pred.iter().enumerate() {
        let mut best = f64::INFINITY;
        let mut best_j = 0;
        for (j, &q) in target.iter().enumerate() {
            let d = dist2(p, q);
            if d < best {
                best = d;
                best_j = j;
            }
        }
        forward += best;
        let q = target[best_j];
        for c in 0..3 {
            grad[i][c] += 2.0 * inv_pred * (p[c] - q[c]);
        }
    }

    let mut backward = 0.0;
    for &q in target {
        let mut best = f64::INFINITY;
        let mut best_i = 0;
        for (i, &p) in pred.iter().enumerate() {
            let d = dist2(q, p);
            if d < best {
                best = d;
                best_i = i;
            }
        }
        backward += best;
        let p = pred[best_i];
        for c in 0..3 {
            grad[best_i][c] += 2.0 * inv_target * (p[c] - q[c]);
        }
    }

    Ok((
        forward / pred.len() as f64 + backward / target.len() as f64,
        grad,
    ))
}

/// For each point, the lowest patch index whose neighbor set contains it.
/// Points no surviving patch covers stay `None`.
pub fn point_patch_ownership(patches: &PatchSet, n_points: usize) -> Vec<Option<usize>> {
    let mut owner = vec![None; n_points];
    for m in 0..patches.n_patches() {
        for &p in patches.neighbors(m) {
            if p < n_points && owner[p].is_none() {
                owner[p] = Some(m);
            }
        }
    }
    owner
}

/// A mask descriptor for pooling, decoupled from the container manifest.
#[derive(Debug, Clone)]
pub struct MaskDescriptor {
    pub mask_id: i32,
    pub label_id: i32,
    pub is_foreground: bool,
}

/// Derives per-mask pooling weights over decoder rows: each point inherits
/// the decoder token of the lowest-indexed patch containing it, and a
/// mask's feature is the mean of its points' tokens. Points owned only by
/// dropped patches are excluded; masks with no surviving points are
/// skipped and reported.
pub fn pool_student_mask_features(
    patches: &PatchSet,
    plan: &MaskingPlan,
    point_mask_ids: &[i32],
    masks: &[MaskDescriptor],
) -> (Vec<MaskPool>, Vec<i32>) {
    let owner = point_patch_ownership(patches, point_mask_ids.len());
    let rows = decoder_rows(plan);
    let mut pools = Vec::new();
    let mut skipped = Vec::new();
    for mask in masks {
        let mut counts: std::collections::BTreeMap<usize, usize> = Default::default();
        let mut total = 0usize;
        for (point, &mask_id) in point_mask_ids.iter().enumerate() {
            if mask_id != mask.mask_id {
                continue;
            }
            let Some(patch) = owner[point] else { continue };
            let Some(row) = rows[patch] else { continue };
            *counts.entry(row).or_insert(0) += 1;
            total += 1;
        }
        if total == 0 {
            skipped.push(mask.mask_id);
            continue;
        }
        let weights = counts
            .into_iter()
            .map(|(row, c)| (row, c as f64 / total as f64))
            .collect();
        pools.push(MaskPool {
            mask_id: mask.mask_id,
            label_id: mask.label_id,
            is_foreground: mask.is_foreground,
            weights,
        });
    }
    (pools, skipped)
}

fn widen(v: &[f32]) -> Array1<f64> {
    Array1::from_iter(v.iter().map(|&x| x as f64))
}

/// Reconstruction loss: mean chamfer distance over masked patches, in
/// center-relative coordinates. Returns the loss, its gradient on the
/// reconstruction rows, and whether the term was vacuous.
pub fn loss_mae(
    fwd: &SceneForward,
    patches: &PatchSet,
    plan: &MaskingPlan,
) -> Result<(f64, Array2<f64>, bool)> {
    let masked = plan.masked_indices();
    if masked.len() != fwd.recon.nrows() {
        return Err(Error::Contract(format!(
            "plan masks {} patches but the pass reconstructed {}",
            masked.len(),
            fwd.recon.nrows()
        )));
    }
    let mut d_recon = Array2::zeros(fwd.recon.raw_dim());
    if masked.is_empty() {
        return Ok((0.0, d_recon, true));
    }
    let scale = 1.0 / masked.len() as f64;
    let mut total = 0.0;
    for (row, &patch) in masked.iter().enumerate() {
        let pred: Vec<[f64; 3]> = crate::model::recon_patch_points(&fwd.recon, row);
        let target = patches.locals(patch);
        let (value, grad) = chamfer_with_grad(&pred, target)?;
        total += value;
        for (i, g) in grad.iter().enumerate() {
            for c in 0..3 {
                d_recon[[row, 3 * i + c]] = scale * g[c];
            }
        }
    }
    Ok((total * scale, d_recon, false))
}

/// Scene distillation: smooth-L1 between the projected scene feature and
/// each teacher scene embedding. Returns (img, txt) losses and gradients.
pub fn loss_scene(
    fwd: &SceneForward,
    teacher: &TeacherBundle,
) -> Result<(f64, f64, Array1<f64>, Array1<f64>)> {
    if fwd.scene_img_pred.len() != teacher.d_img || fwd.scene_txt_pred.len() != teacher.d_txt {
        return Err(Error::Contract(format!(
            "scene head dims ({}, {}) do not match teacher dims ({}, {})",
            fwd.scene_img_pred.len(),
            fwd.scene_txt_pred.len(),
            teacher.d_img,
            teacher.d_txt
        )));
    }
    let img_target = widen(&teacher.scene_image_feature);
    let txt_target = widen(&teacher.scene_text_feature);
    let l_img = smooth_l1(&fwd.scene_img_pred, &img_target, SMOOTH_L1_BETA);
    let l_txt = smooth_l1(&fwd.scene_txt_pred, &txt_target, SMOOTH_L1_BETA);
    let d_img = smooth_l1_grad(&fwd.scene_img_pred, &img_target, SMOOTH_L1_BETA, 1.0);
    let d_txt = smooth_l1_grad(&fwd.scene_txt_pred, &txt_target, SMOOTH_L1_BETA, 1.0);
    Ok((l_img, l_txt, d_img, d_txt))
}

/// Object distillation: the visual term averages over every pooled mask,
/// the text term only over foreground masks. Returns (img, txt) losses,
/// per-mask gradients, and whether the term was vacuous.
#[allow(clippy::type_complexity)]
pub fn loss_object(
    fwd: &SceneForward,
    pools: &[MaskPool],
    teacher: &TeacherBundle,
) -> Result<(f64, f64, Vec<Array1<f64>>, Vec<Array1<f64>>, bool)> {
    if fwd.object_img_preds.len() != pools.len() || fwd.object_txt_preds.len() != pools.len() {
        return Err(Error::Contract(format!(
            "pass predicted {} masks but {} pools were given",
            fwd.object_img_preds.len(),
            pools.len()
        )));
    }
    let mut d_img: Vec<Array1<f64>> = fwd
        .object_img_preds
        .iter()
        .map(|p| Array1::zeros(p.len()))
        .collect();
    let mut d_txt: Vec<Array1<f64>> = fwd
        .object_txt_preds
        .iter()
        .map(|p| Array1::zeros(p.len()))
        .collect();
    if pools.is_empty() {
        return Ok((0.0, 0.0, d_img, d_txt, true));
    }

    let inv_k = 1.0 / pools.len() as f64;
    let n_fg = pools.iter().filter(|p| p.is_foreground).count();
    let inv_s = if n_fg > 0 { 1.0 / n_fg as f64 } else { 0.0 };

    let mut l_img = 0.0;
    let mut l_txt = 0.0;
    for (i, pool) in pools.iter().enumerate() {
        let visual = teacher.per_mask_visual.get(&pool.mask_id).ok_or_else(|| {
            Error::Contract(format!("teacher has no visual feature for mask {}", pool.mask_id))
        })?;
        let target = widen(visual);
        l_img += inv_k * smooth_l1(&fwd.object_img_preds[i], &target, SMOOTH_L1_BETA);
        d_img[i] = smooth_l1_grad(&fwd.object_img_preds[i], &target, SMOOTH_L1_BETA, inv_k);

        if pool.is_foreground {
            let text = teacher.per_label_text.get(&pool.label_id).ok_or_else(|| {
                Error::Contract(format!(
                    "teacher has no text embedding for label {}",
                    pool.label_id
                ))
            })?;
            let target = widen(text);
            l_txt += inv_s * smooth_l1(&fwd.object_txt_preds[i], &target, SMOOTH_L1_BETA);
            d_txt[i] = smooth_l1_grad(&fwd.object_txt_preds[i], &target, SMOOTH_L1_BETA, inv_s);
        }
    }
    Ok((l_img, l_txt, d_img, d_txt, false))
}

/// Assembles the full report and upstream gradients from one forward pass.
pub fn scene_loss(
    fwd: &SceneForward,
    patches: &PatchSet,
    plan: &MaskingPlan,
    pools: &[MaskPool],
    teacher: &TeacherBundle,
) -> Result<(LossReport, SceneGrad)> {
    let (l_mae, d_recon, zero_masked) = loss_mae(fwd, patches, plan)?;
    let (l_scene_img, l_scene_txt, d_scene_img, d_scene_txt) = loss_scene(fwd, teacher)?;
    let (l_object_img, l_object_txt, d_object_img, d_object_txt, zero_masks) =
        loss_object(fwd, pools, teacher)?;

    let l_scene = l_scene_img + l_scene_txt;
    let l_object = l_object_img + l_object_txt;
    let l_total = l_mae + l_scene + l_object;
    let report = LossReport {
        l_mae,
        l_scene,
        l_scene_img,
        l_scene_txt,
        l_object,
        l_object_img,
        l_object_txt,
        l_total,
        zero_masked_patches: zero_masked,
        zero_object_masks: zero_masks,
    };
    let grad = SceneGrad {
        d_recon,
        d_scene_img_pred: d_scene_img,
        d_scene_txt_pred: d_scene_txt,
        d_object_img_preds: d_object_img,
        d_object_txt_preds: d_object_txt,
    };
    Ok((report, grad))
}

/// Runs one scene forward, reports every loss, and accumulates parameter
/// gradients of the total into `grad`.
pub fn loss_and_grad(
    model: &PretrainModel,
    patches: &PatchSet,
    plan: &MaskingPlan,
    pools: &[MaskPool],
    teacher: &TeacherBundle,
    drops: &[DropDecision],
    grad: &mut PretrainModel,
) -> Result<LossReport> {
    let (fwd, cache) = model.forward_scene(patches, plan, pools, drops)?;
    let (report, upstream) = scene_loss(&fwd, patches, plan, pools, teacher)?;
    model.backward_scene(&cache, &upstream, grad)?;
    Ok(report)
}

/// Runs one scene forward and reports losses without touching gradients.
pub fn evaluate_scene(
    model: &PretrainModel,
    patches: &PatchSet,
    plan: &MaskingPlan,
    pools: &[MaskPool],
    teacher: &TeacherBundle,
    drops: &[DropDecision],
) -> Result<LossReport> {
    let (fwd, _) = model.forward_scene(patches, plan, pools, drops)?;
    Ok(scene_loss(&fwd, patches, plan, pools, teacher)?.0)
}
