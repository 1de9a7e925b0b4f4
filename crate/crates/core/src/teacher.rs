//! Teacher providers and the on-disk scene container.
//!
//! Training never runs a foundation model; it consumes per-scene bundles of
//! precomputed features (scene-level image/text vectors, per-mask visual
//! vectors, per-label text vectors, a caption) that some offline producer
//! wrote into a scene container. The [`FrozenSyntheticTeacher`] is the
//! built-in producer for synthetic data: a deterministic generator whose
//! label geometry (same label close, different labels near-orthogonal) gives
//! distillation something real to learn.
//!
//! Container layout: one directory per scene holding `manifest.json` and one
//! little-endian `.bin` file per array, each checksummed. A dataset is a
//! directory of scene containers plus a `dataset.json` index.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::{
    expect_f32, expect_i32, find_entry, read_array, write_array, ArrayData, ArrayEntry,
};
use crate::correspondence::{CameraModel, InstanceMaskSet, MaskEntry};
use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::seeding::{rng_for, rng_for_str};

/// All teacher outputs for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherBundle {
    pub d_img: usize,
    pub d_txt: usize,
    pub scene_image_feature: Vec<f32>,
    pub scene_text_feature: Vec<f32>,
    /// mask_id → pooled visual feature, one entry per scene mask.
    pub per_mask_visual: BTreeMap<i32, Vec<f32>>,
    /// label_id → text embedding, one entry per vocabulary label.
    pub per_label_text: BTreeMap<i32, Vec<f32>>,
    pub caption: String,
}

/// One complete training scene: geometry, calibration, instance masks, and
/// the frozen teacher outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub scene_id: String,
    pub cloud: PointCloud,
    pub camera: CameraModel,
    pub masks: InstanceMaskSet,
    pub teacher: TeacherBundle,
    pub label_vocab: Vec<String>,
}

impl SceneRecord {
    pub fn validate(&self) -> Result<()> {
        self.cloud.validate()?;
        self.camera.validate()?;
        self.masks.validate()?;
        if self.masks.width != self.camera.width || self.masks.height != self.camera.height {
            return Err(Error::Precondition(format!(
                "mask image {}x{} does not match camera image {}x{}",
                self.masks.width, self.masks.height, self.camera.width, self.camera.height
            )));
        }
        let t = &self.teacher;
        check_vector("scene_image_feature", &t.scene_image_feature, t.d_img)?;
        check_vector("scene_text_feature", &t.scene_text_feature, t.d_txt)?;
        for m in &self.masks.masks {
            let v = t.per_mask_visual.get(&m.mask_id).ok_or_else(|| {
                Error::Precondition(format!("mask {} has no visual feature", m.mask_id))
            })?;
            check_vector("per_mask_visual", v, t.d_img)?;
            if m.label_id < 0 || m.label_id as usize >= self.label_vocab.len() {
                return Err(Error::Precondition(format!(
                    "mask {} carries out-of-vocabulary label {}",
                    m.mask_id, m.label_id
                )));
            }
        }
        let vocab = self.label_vocab.len();
        if t.per_label_text.len() != vocab
            || !(0..vocab as i32).all(|l| t.per_label_text.contains_key(&l))
        {
            return Err(Error::Precondition(format!(
                "per_label_text must cover label ids 0..{vocab}"
            )));
        }
        for v in t.per_label_text.values() {
            check_vector("per_label_text", v, t.d_txt)?;
        }
        for (i, &l) in self.cloud.label_id.iter().enumerate() {
            if l >= vocab as i32 {
                return Err(Error::Precondition(format!(
                    "point {i} carries out-of-vocabulary label {l}"
                )));
            }
        }
        Ok(())
    }
}

fn check_vector(name: &str, v: &[f32], dim: usize) -> Result<()> {
    if v.len() != dim {
        return Err(Error::ShapeMismatch {
            name: name.to_string(),
            expected: vec![dim],
            actual: vec![v.len()],
        });
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::Precondition(format!("{name} has non-finite entries")));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CameraManifest {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
    width: usize,
    height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MaskManifest {
    mask_id: i32,
    label_id: i32,
    is_foreground: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FeatureDims {
    #[serde(rename = "D_img")]
    pub d_img: usize,
    #[serde(rename = "D_txt")]
    pub d_txt: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneManifest {
    scene_id: String,
    arrays: Vec<ArrayEntry>,
    camera: CameraManifest,
    masks: Vec<MaskManifest>,
    caption: String,
    label_vocab: Vec<String>,
    dims: FeatureDims,
}

/// Write a scene container into `dir` (created if needed).
pub fn save_scene(record: &SceneRecord, dir: &Path) -> Result<()> {
    record.validate()?;
    fs::create_dir_all(dir)?;

    let n = record.cloud.len();
    let flat_points: Vec<f32> = record.cloud.points.iter().flatten().copied().collect();
    let t = &record.teacher;
    let n_masks = record.masks.masks.len();
    let vocab = record.label_vocab.len();

    let mut mask_visual = Vec::with_capacity(n_masks * t.d_img);
    for m in &record.masks.masks {
        mask_visual.extend_from_slice(&t.per_mask_visual[&m.mask_id]);
    }
    let mut label_text = Vec::with_capacity(vocab * t.d_txt);
    for l in 0..vocab as i32 {
        label_text.extend_from_slice(&t.per_label_text[&l]);
    }

    let mut arrays = Vec::new();
    arrays.push(write_array(dir, "points", &[n, 3], &ArrayData::F32(flat_points))?);
    arrays.push(write_array(
        dir,
        "instance_id",
        &[n],
        &ArrayData::I32(record.cloud.instance_id.clone()),
    )?);
    arrays.push(write_array(
        dir,
        "label_id",
        &[n],
        &ArrayData::I32(record.cloud.label_id.clone()),
    )?);
    arrays.push(write_array(
        dir,
        "pixel_mask",
        &[record.masks.height, record.masks.width],
        &ArrayData::I32(record.masks.pixels.clone()),
    )?);
    arrays.push(write_array(
        dir,
        "scene_image_feature",
        &[t.d_img],
        &ArrayData::F32(t.scene_image_feature.clone()),
    )?);
    arrays.push(write_array(
        dir,
        "scene_text_feature",
        &[t.d_txt],
        &ArrayData::F32(t.scene_text_feature.clone()),
    )?);
    arrays.push(write_array(
        dir,
        "mask_visual",
        &[n_masks, t.d_img],
        &ArrayData::F32(mask_visual),
    )?);
    arrays.push(write_array(
        dir,
        "label_text",
        &[vocab, t.d_txt],
        &ArrayData::F32(label_text),
    )?);

    let cam = &record.camera;
    let manifest = SceneManifest {
        scene_id: record.scene_id.clone(),
        arrays,
        camera: CameraManifest {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            r: [
                cam.rotation[0][0],
                cam.rotation[0][1],
                cam.rotation[0][2],
                cam.rotation[1][0],
                cam.rotation[1][1],
                cam.rotation[1][2],
                cam.rotation[2][0],
                cam.rotation[2][1],
                cam.rotation[2][2],
            ],
            t: cam.translation,
            width: cam.width,
            height: cam.height,
        },
        masks: record
            .masks
            .masks
            .iter()
            .map(|m| MaskManifest {
                mask_id: m.mask_id,
                label_id: m.label_id,
                is_foreground: m.is_foreground,
            })
            .collect(),
        caption: t.caption.clone(),
        label_vocab: record.label_vocab.clone(),
        dims: FeatureDims {
            d_img: t.d_img,
            d_txt: t.d_txt,
        },
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

fn required_shape(entry: &ArrayEntry, expected: &[usize]) -> Result<()> {
    if entry.shape != expected {
        return Err(Error::ShapeMismatch {
            name: entry.name.clone(),
            expected: expected.to_vec(),
            actual: entry.shape.clone(),
        });
    }
    Ok(())
}

/// Read and fully validate a scene container.
pub fn load_scene(dir: &Path) -> Result<SceneRecord> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.is_file() {
        return Err(Error::MissingFile(manifest_path));
    }
    let manifest: SceneManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let dims = manifest.dims;

    let points_entry = find_entry(&manifest.arrays, "points")?;
    if points_entry.shape.len() != 2 || points_entry.shape[1] != 3 {
        return Err(Error::ShapeMismatch {
            name: "points".into(),
            expected: vec![0, 3],
            actual: points_entry.shape.clone(),
        });
    }
    let n = points_entry.shape[0];
    let flat_points = expect_f32(read_array(dir, points_entry)?, "points")?;
    let points: Vec<[f32; 3]> = flat_points
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();

    let entry = find_entry(&manifest.arrays, "instance_id")?;
    required_shape(entry, &[n])?;
    let instance_id = expect_i32(read_array(dir, entry)?, "instance_id")?;

    let entry = find_entry(&manifest.arrays, "label_id")?;
    required_shape(entry, &[n])?;
    let label_id = expect_i32(read_array(dir, entry)?, "label_id")?;

    let cam = &manifest.camera;
    let entry = find_entry(&manifest.arrays, "pixel_mask")?;
    required_shape(entry, &[cam.height, cam.width])?;
    let pixels = expect_i32(read_array(dir, entry)?, "pixel_mask")?;

    let entry = find_entry(&manifest.arrays, "scene_image_feature")?;
    required_shape(entry, &[dims.d_img])?;
    let scene_image_feature = expect_f32(read_array(dir, entry)?, "scene_image_feature")?;

    let entry = find_entry(&manifest.arrays, "scene_text_feature")?;
    required_shape(entry, &[dims.d_txt])?;
    let scene_text_feature = expect_f32(read_array(dir, entry)?, "scene_text_feature")?;

    let entry = find_entry(&manifest.arrays, "mask_visual")?;
    required_shape(entry, &[manifest.masks.len(), dims.d_img])?;
    let mask_visual = expect_f32(read_array(dir, entry)?, "mask_visual")?;

    let entry = find_entry(&manifest.arrays, "label_text")?;
    required_shape(entry, &[manifest.label_vocab.len(), dims.d_txt])?;
    let label_text = expect_f32(read_array(dir, entry)?, "label_text")?;

    let mut per_mask_visual = BTreeMap::new();
    for (row, m) in manifest.masks.iter().enumerate() {
        per_mask_visual.insert(
            m.mask_id,
            mask_visual[row * dims.d_img..(row + 1) * dims.d_img].to_vec(),
        );
    }
    let mut per_label_text = BTreeMap::new();
    for l in 0..manifest.label_vocab.len() {
        per_label_text.insert(
            l as i32,
            label_text[l * dims.d_txt..(l + 1) * dims.d_txt].to_vec(),
        );
    }

    let record = SceneRecord {
        scene_id: manifest.scene_id,
        cloud: PointCloud {
            points,
            instance_id,
            label_id,
        },
        camera: CameraModel {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            rotation: [
                [cam.r[0], cam.r[1], cam.r[2]],
                [cam.r[3], cam.r[4], cam.r[5]],
                [cam.r[6], cam.r[7], cam.r[8]],
            ],
            translation: cam.t,
            width: cam.width,
            height: cam.height,
        },
        masks: InstanceMaskSet {
            width: cam.width,
            height: cam.height,
            pixels,
            masks: manifest
                .masks
                .iter()
                .map(|m| MaskEntry {
                    mask_id: m.mask_id,
                    label_id: m.label_id,
                    is_foreground: m.is_foreground,
                })
                .collect(),
        },
        teacher: TeacherBundle {
            d_img: dims.d_img,
            d_txt: dims.d_txt,
            scene_image_feature,
            scene_text_feature,
            per_mask_visual,
            per_label_text,
            caption: manifest.caption,
        },
        label_vocab: manifest.label_vocab,
    };
    record.validate()?;
    Ok(record)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetScene {
    pub scene_id: String,
    pub dir: String,
}

/// `dataset.json`: the index of scene containers under a dataset root.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub scenes: Vec<DatasetScene>,
    pub label_vocab: Vec<String>,
    pub dims: FeatureDims,
}

pub fn save_dataset_index(root: &Path, index: &DatasetIndex) -> Result<()> {
    fs::create_dir_all(root)?;
    let json = serde_json::to_string_pretty(index)?;
    fs::write(root.join("dataset.json"), json)?;
    Ok(())
}

pub fn load_dataset_index(root: &Path) -> Result<DatasetIndex> {
    let path = root.join("dataset.json");
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Load every scene listed in a dataset index, in index order.
pub fn load_dataset(root: &Path) -> Result<Vec<SceneRecord>> {
    let index = load_dataset_index(root)?;
    index
        .scenes
        .iter()
        .map(|s| load_scene(&root.join(&s.dir)))
        .collect()
}

fn normalize_f64(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return false;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    true
}

fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if normalize_f64(&mut v) {
            return v;
        }
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Deterministic stand-in for the offline foundation-model pipeline.
///
/// Every label gets a fixed unit text embedding and a fixed unit visual
/// anchor; each mask instance perturbs its label's anchor by a scaled unit
/// vector, so instances of one label stay tightly clustered (cosine > 0.9)
/// while distinct labels stay near-orthogonal at typical dims. Scene-level
/// features are normalized means over the scene's masks and labels.
#[derive(Debug, Clone)]
pub struct FrozenSyntheticTeacher {
    pub label_vocab_size: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub seed: u64,
}

impl FrozenSyntheticTeacher {
    pub fn new(label_vocab_size: usize, d_img: usize, d_txt: usize, seed: u64) -> Result<Self> {
        if d_img < 8 || d_txt < 8 {
            return Err(Error::Precondition(format!(
                "feature dims must be at least 8, got D_img={d_img} D_txt={d_txt}"
            )));
        }
        if label_vocab_size == 0 {
            return Err(Error::Precondition("label vocabulary is empty".into()));
        }
        Ok(FrozenSyntheticTeacher {
            label_vocab_size,
            d_img,
            d_txt,
            seed,
        })
    }

    pub fn per_label_text(&self, label: i32) -> Vec<f32> {
        let mut rng = rng_for(self.seed, "teacher.text", &[label as u64]);
        to_f32(&unit_vector(&mut rng, self.d_txt))
    }

    fn label_anchor(&self, label: i32) -> Vec<f64> {
        let mut rng = rng_for(self.seed, "teacher.img.anchor", &[label as u64]);
        unit_vector(&mut rng, self.d_img)
    }

    pub fn per_mask_visual(&self, scene_id: &str, label: i32, mask_id: i32) -> Vec<f32> {
        let mut anchor = self.label_anchor(label);
        let mut rng = rng_for_str(self.seed, "teacher.img.perturb", scene_id, &[mask_id as u64]);
        let pert = unit_vector(&mut rng, self.d_img);
        for (a, p) in anchor.iter_mut().zip(&pert) {
            *a += 0.1 * p;
        }
        normalize_f64(&mut anchor);
        to_f32(&anchor)
    }

    /// Fixed fallback used when a scene has no masks at all, so the
    /// required scene-level arrays still exist and stay deterministic.
    fn empty_scene_vector(&self, domain: &str, dim: usize) -> Vec<f32> {
        let mut rng = rng_for(self.seed, domain, &[dim as u64]);
        to_f32(&unit_vector(&mut rng, dim))
    }

    /// Assemble the full bundle for a scene's mask set.
    pub fn bundle_for_scene(&self, scene_id: &str, masks: &InstanceMaskSet) -> Result<TeacherBundle> {
        let mut per_mask_visual = BTreeMap::new();
        for m in &masks.masks {
            if m.label_id < 0 || m.label_id as usize >= self.label_vocab_size {
                return Err(Error::Precondition(format!(
                    "mask {} carries out-of-vocabulary label {}",
                    m.mask_id, m.label_id
                )));
            }
            per_mask_visual.insert(
                m.mask_id,
                self.per_mask_visual(scene_id, m.label_id, m.mask_id),
            );
        }
        let mut per_label_text = BTreeMap::new();
        for l in 0..self.label_vocab_size as i32 {
            per_label_text.insert(l, self.per_label_text(l));
        }

        let scene_image_feature = if masks.masks.is_empty() {
            self.empty_scene_vector("teacher.scene.empty.img", self.d_img)
        } else {
            let mut mean = vec![0.0f64; self.d_img];
            for v in per_mask_visual.values() {
                for (m, &x) in mean.iter_mut().zip(v) {
                    *m += x as f64;
                }
            }
            for m in mean.iter_mut() {
                *m /= per_mask_visual.len() as f64;
            }
            if normalize_f64(&mut mean) {
                to_f32(&mean)
            } else {
                self.empty_scene_vector("teacher.scene.empty.img", self.d_img)
            }
        };

        // Distinct labels present in the scene, each counted once.
        let labels: std::collections::BTreeSet<i32> =
            masks.masks.iter().map(|m| m.label_id).collect();
        let scene_text_feature = if labels.is_empty() {
            self.empty_scene_vector("teacher.scene.empty.txt", self.d_txt)
        } else {
            let mut mean = vec![0.0f64; self.d_txt];
            for &l in &labels {
                for (m, &x) in mean.iter_mut().zip(&per_label_text[&l]) {
                    *m += x as f64;
                }
            }
            for m in mean.iter_mut() {
                *m /= labels.len() as f64;
            }
            if normalize_f64(&mut mean) {
                to_f32(&mean)
            } else {
                self.empty_scene_vector("teacher.scene.empty.txt", self.d_txt)
            }
        };

        Ok(TeacherBundle {
            d_img: self.d_img,
            d_txt: self.d_txt,
            scene_image_feature,
            scene_text_feature,
            per_mask_visual,
            per_label_text,
            caption: String::new(),
        })
    }

    /// Deterministic caption naming each distinct label present.
    pub fn caption_for(&self, masks: &InstanceMaskSet, vocab: &[String]) -> String {
        let labels: std::collections::BTreeSet<i32> =
            masks.masks.iter().filter(|m| m.is_foreground).map(|m| m.label_id).collect();
        if labels.is_empty() {
            return "an empty room".to_string();
        }
        let names: Vec<&str> = labels
            .iter()
            .filter_map(|&l| vocab.get(l as usize).map(|s| s.as_str()))
            .collect();
        format!("a room with {}", names.join(", "))
    }
}

pub fn cosine_f32(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}
