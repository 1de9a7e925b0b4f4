//! Pixel-point correspondence: pinhole projection, transfer of 2D instance
//! masks onto points, per-patch foreground classification, and grouping of
//! points by the mask they landed in.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::pointcloud::{PatchSet, PointCloud};

/// Calibrated pinhole camera. `rotation` and `translation` map world
/// coordinates into the camera frame (`x_cam = R x + t`); `rotation` is
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    /// Identity extrinsics looking down +Z.
    pub fn identity(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        CameraModel {
            fx,
            fy,
            cx,
            cy,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 0.0],
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0) || !(self.fy > 0.0) {
            return Err(Error::Precondition(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Precondition("image size must be at least 1x1".into()));
        }
        // R^T R == I within 1e-6, checked entrywise.
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                if (dot - expected).abs() > 1e-6 {
                    return Err(Error::Precondition(format!(
                        "rotation is not orthonormal: (R^T R)[{i}][{j}] = {dot}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// World point into the camera frame.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// Continuous (un-rounded) pixel coordinates; `None` when depth ≤ 0.
    pub fn project_exact(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        let c = self.to_camera(p);
        if c[2] <= 0.0 {
            return None;
        }
        Some([
            self.fx * c[0] / c[2] + self.cx,
            self.fy * c[1] / c[2] + self.cy,
        ])
    }

    /// Camera-frame ray direction through pixel (u, v), unnormalized.
    pub fn pixel_ray(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }
}

/// One instance mask: id, semantic label, and whether it is an object (as
/// opposed to floor/wall structure).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskEntry {
    pub mask_id: i32,
    pub label_id: i32,
    pub is_foreground: bool,
}

/// Per-pixel instance segmentation of one rendered view. `pixels` is a
/// row-major height×width map of mask ids, −1 where no mask claims the pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMaskSet {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<i32>,
    pub masks: Vec<MaskEntry>,
}

impl InstanceMaskSet {
    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.width * self.height {
            return Err(Error::Precondition(format!(
                "pixel map has {} entries for a {}x{} image",
                self.pixels.len(),
                self.width,
                self.height
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for m in &self.masks {
            if !seen.insert(m.mask_id) {
                return Err(Error::Precondition(format!(
                    "duplicate mask_id {}",
                    m.mask_id
                )));
            }
        }
        for (i, &id) in self.pixels.iter().enumerate() {
            if id != -1 && !seen.contains(&id) {
                return Err(Error::Precondition(format!(
                    "pixel {i} references unknown mask_id {id}"
                )));
            }
        }
        Ok(())
    }

    pub fn entry(&self, mask_id: i32) -> Option<&MaskEntry> {
        self.masks.iter().find(|m| m.mask_id == mask_id)
    }
}

/// Per-point projection and mask assignment. `pixel` holds rounded (u, v);
/// only entries with `valid` set are meaningful. `mask_id` is −1 until
/// [`build_point_mask_map`] fills it, and stays −1 for points that hit no
/// mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMaskMap {
    pub pixel: Vec<[i64; 2]>,
    pub valid: Vec<bool>,
    pub mask_id: Vec<i32>,
    pub width: usize,
    pub height: usize,
}

impl PointMaskMap {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }
}

/// Per-patch foreground flag and dominant foreground mask (−1 = none).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSemantics {
    pub is_foreground: Vec<bool>,
    pub dominant_mask: Vec<i32>,
}

impl PatchSemantics {
    pub fn n_patches(&self) -> usize {
        self.is_foreground.len()
    }

    pub fn n_foreground(&self) -> usize {
        self.is_foreground.iter().filter(|&&f| f).count()
    }
}

/// Points grouped by assigned mask, ordered by ascending mask_id.
/// `foreground_subset` indexes into `groups`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskGroups {
    pub groups: Vec<(i32, Vec<usize>)>,
    pub foreground_subset: Vec<usize>,
}

/// Round half away from zero, matching the rounding used everywhere else in
/// the pipeline.
#[inline]
fn round_pixel(x: f64) -> i64 {
    x.round() as i64
}

/// Project every point through the camera. Points behind the camera or
/// landing outside the image keep `valid = false`; nothing errors.
pub fn project_points(cloud: &PointCloud, camera: &CameraModel) -> Result<PointMaskMap> {
    camera.validate()?;
    let n = cloud.len();
    let mut pixel = vec![[0i64, 0i64]; n];
    let mut valid = vec![false; n];
    for i in 0..n {
        if let Some([u, v]) = camera.project_exact(cloud.point_f64(i)) {
            let ui = round_pixel(u);
            let vi = round_pixel(v);
            if ui >= 0 && vi >= 0 && (ui as usize) < camera.width && (vi as usize) < camera.height
            {
                pixel[i] = [ui, vi];
                valid[i] = true;
            }
        }
    }
    Ok(PointMaskMap {
        pixel,
        valid,
        mask_id: vec![-1; n],
        width: camera.width,
        height: camera.height,
    })
}

/// Fill the mask assignment of a projection by looking up each valid point's
/// pixel in the instance mask image.
pub fn build_point_mask_map(
    projection: &PointMaskMap,
    masks: &InstanceMaskSet,
) -> Result<PointMaskMap> {
    if projection.width != masks.width || projection.height != masks.height {
        return Err(Error::Config(format!(
            "projection image {}x{} does not match mask image {}x{}",
            projection.width, projection.height, masks.width, masks.height
        )));
    }
    masks.validate()?;
    let mut out = projection.clone();
    for i in 0..out.len() {
        out.mask_id[i] = if out.valid[i] {
            let [u, v] = out.pixel[i];
            masks.pixels[v as usize * masks.width + u as usize]
        } else {
            -1
        };
    }
    Ok(out)
}

/// Classify each patch as foreground when strictly more than `tau` of its K
/// points sit in foreground masks, and record the patch's most frequent
/// foreground mask (ties toward the lowest mask_id, −1 when no point touches
/// a foreground mask).
pub fn classify_patches(
    patches: &PatchSet,
    map: &PointMaskMap,
    masks: &InstanceMaskSet,
    tau: f64,
) -> Result<PatchSemantics> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Precondition(format!(
            "tau must be in (0, 1], got {tau}"
        )));
    }
    let fg_lookup: HashMap<i32, bool> = masks
        .masks
        .iter()
        .map(|m| (m.mask_id, m.is_foreground))
        .collect();

    let m = patches.n_patches();
    let k = patches.patch_size;
    let mut is_foreground = Vec::with_capacity(m);
    let mut dominant_mask = Vec::with_capacity(m);
    for p in 0..m {
        let mut fg_points = 0usize;
        let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
        for &idx in patches.neighbors(p) {
            let id = map.mask_id[idx];
            if id >= 0 && fg_lookup.get(&id).copied().unwrap_or(false) {
                fg_points += 1;
                *counts.entry(id).or_insert(0) += 1;
            }
        }
        is_foreground.push(fg_points as f64 > tau * k as f64);
        // BTreeMap iterates in ascending id order, so > keeps the lowest id
        // among equally frequent masks.
        let mut best_id = -1;
        let mut best_count = 0usize;
        for (&id, &c) in &counts {
            if c > best_count {
                best_count = c;
                best_id = id;
            }
        }
        dominant_mask.push(best_id);
    }
    Ok(PatchSemantics {
        is_foreground,
        dominant_mask,
    })
}

/// Group point indices by assigned mask. Masks with no assigned points are
/// omitted; groups come out in ascending mask_id order.
pub fn group_points_by_mask(map: &PointMaskMap, masks: &InstanceMaskSet) -> Result<MaskGroups> {
    masks.validate()?;
    let mut by_mask: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for i in 0..map.len() {
        let id = map.mask_id[i];
        if id >= 0 {
            by_mask.entry(id).or_default().push(i);
        }
    }
    let groups: Vec<(i32, Vec<usize>)> = by_mask.into_iter().collect();
    let foreground_subset = groups
        .iter()
        .enumerate()
        .filter(|(_, (id, _))| masks.entry(*id).is_some_and(|m| m.is_foreground))
        .map(|(pos, _)| pos)
        .collect();
    Ok(MaskGroups {
        groups,
        foreground_subset,
    })
}
