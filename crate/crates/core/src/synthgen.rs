//! Procedural indoor-like scenes with exact ground truth.
//!
//! A scene is a floor plus two walls (background) and a handful of primitive
//! objects (foreground instances) resting on the floor, surface-sampled into
//! a point cloud the way a single RGB-D view would see it: points occluded
//! by an object, including an object's own back faces, are culled by a
//! segment-versus-primitive test against the camera. The instance image is
//! rendered from the final cloud with a nearest-depth-wins rule per pixel,
//! so the pixel mask and the per-point instance labels disagree only at
//! silhouette rounding, never by construction.

use std::path::Path;

use rand::Rng;

use crate::correspondence::{project_points, CameraModel, InstanceMaskSet, MaskEntry};
use crate::error::{Error, Result};
use crate::exec::{map_range, ExecMode};
use crate::pointcloud::PointCloud;
use crate::seeding::rng_for;
use crate::teacher::{
    save_dataset_index, save_scene, DatasetIndex, DatasetScene, FeatureDims,
    FrozenSyntheticTeacher, SceneRecord,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrimitiveShape {
    Box { half_lo: f64, half_hi: f64 },
    Sphere { radius_lo: f64, radius_hi: f64 },
    Cylinder {
        radius_lo: f64,
        radius_hi: f64,
        height_lo: f64,
        height_hi: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSpec {
    pub name: String,
    pub shape: PrimitiveShape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_objects_min: usize,
    pub n_objects_max: usize,
    pub label_vocab: Vec<LabelSpec>,
    /// Side length of the square room floor, meters.
    pub room_extent: f64,
    /// Background sampling density, points per square meter.
    pub points_per_surface_unit: f64,
    /// Foreground surfaces sample at `points_per_surface_unit` times this.
    /// Zero disables object placement entirely.
    pub foreground_density_boost: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub d_img: usize,
    pub d_txt: usize,
    /// Dataset-level seed: feeds the frozen teacher and, combined with each
    /// scene seed, the geometry draws.
    pub seed: u64,
}

impl SynthConfig {
    /// The tuned desk-scale default: six geometrically distinct labels, a
    /// 6 m room, scenes of roughly 2-3k points.
    pub fn desk_default() -> Self {
        SynthConfig {
            n_objects_min: 5,
            n_objects_max: 8,
            label_vocab: vec![
                LabelSpec {
                    name: "crate".into(),
                    shape: PrimitiveShape::Box {
                        half_lo: 0.25,
                        half_hi: 0.35,
                    },
                },
                LabelSpec {
                    name: "cabinet".into(),
                    shape: PrimitiveShape::Box {
                        half_lo: 0.40,
                        half_hi: 0.46,
                    },
                },
                LabelSpec {
                    name: "ball".into(),
                    shape: PrimitiveShape::Sphere {
                        radius_lo: 0.30,
                        radius_hi: 0.38,
                    },
                },
                LabelSpec {
                    name: "globe".into(),
                    shape: PrimitiveShape::Sphere {
                        radius_lo: 0.45,
                        radius_hi: 0.55,
                    },
                },
                LabelSpec {
                    name: "drum".into(),
                    shape: PrimitiveShape::Cylinder {
                        radius_lo: 0.30,
                        radius_hi: 0.36,
                        height_lo: 0.45,
                        height_hi: 0.60,
                    },
                },
                LabelSpec {
                    name: "pillar".into(),
                    shape: PrimitiveShape::Cylinder {
                        radius_lo: 0.16,
                        radius_hi: 0.20,
                        height_lo: 1.10,
                        height_hi: 1.40,
                    },
                },
            ],
            room_extent: 6.0,
            points_per_surface_unit: 24.0,
            foreground_density_boost: 4.5,
            image_width: 96,
            image_height: 72,
            d_img: 64,
            d_txt: 64,
            seed: 446,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.label_vocab.is_empty() {
            return Err(Error::Config("label vocabulary is empty".into()));
        }
        if self.n_objects_min == 0 || self.n_objects_min > self.n_objects_max {
            return Err(Error::Config(format!(
                "object count range [{}, {}] is invalid",
                self.n_objects_min, self.n_objects_max
            )));
        }
        if !(self.room_extent > 0.0) || !(self.points_per_surface_unit > 0.0) {
            return Err(Error::Config("room extent and density must be positive".into()));
        }
        if self.foreground_density_boost < 0.0 {
            return Err(Error::Config("foreground density boost must be >= 0".into()));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::Config("image size must be at least 1x1".into()));
        }
        for spec in &self.label_vocab {
            let ok = match spec.shape {
                PrimitiveShape::Box { half_lo, half_hi } => 0.0 < half_lo && half_lo <= half_hi,
                PrimitiveShape::Sphere { radius_lo, radius_hi } => {
                    0.0 < radius_lo && radius_lo <= radius_hi
                }
                PrimitiveShape::Cylinder {
                    radius_lo,
                    radius_hi,
                    height_lo,
                    height_hi,
                } => 0.0 < radius_lo && radius_lo <= radius_hi && 0.0 < height_lo && height_lo <= height_hi,
            };
            if !ok {
                return Err(Error::Config(format!(
                    "label {:?} has an invalid size range",
                    spec.name
                )));
            }
        }
        Ok(())
    }

    pub fn label_names(&self) -> Vec<String> {
        self.label_vocab.iter().map(|l| l.name.clone()).collect()
    }

    fn wall_height(&self) -> f64 {
        self.room_extent / 2.0
    }
}

/// A placed object, used both for surface sampling and occlusion tests.
#[derive(Debug, Clone, Copy)]
enum Solid {
    Box { center: [f64; 3], half: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
    Cylinder {
        cx: f64,
        cy: f64,
        radius: f64,
        z0: f64,
        z1: f64,
    },
}

impl Solid {
    /// Horizontal footprint radius, for overlap rejection during placement.
    fn footprint_radius(&self) -> f64 {
        match *self {
            Solid::Box { half, .. } => (half[0] * half[0] + half[1] * half[1]).sqrt(),
            Solid::Sphere { radius, .. } => radius,
            Solid::Cylinder { radius, .. } => radius,
        }
    }

    fn center_xy(&self) -> [f64; 2] {
        match *self {
            Solid::Box { center, .. } => [center[0], center[1]],
            Solid::Sphere { center, .. } => [center[0], center[1]],
            Solid::Cylinder { cx, cy, .. } => [cx, cy],
        }
    }

    /// Surface area sampled by the generator (floor-contact faces omitted,
    /// matching what a scanner could ever see).
    fn sampled_area(&self) -> f64 {
        match *self {
            Solid::Box { half, .. } => {
                let [hx, hy, hz] = half;
                8.0 * hy * hz + 8.0 * hx * hz + 4.0 * hx * hy
            }
            Solid::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
            Solid::Cylinder { radius, z0, z1, .. } => {
                let h = z1 - z0;
                2.0 * std::f64::consts::PI * radius * h + std::f64::consts::PI * radius * radius
            }
        }
    }

    /// Earliest parameter t in (0, 1) at which the segment `eye + t*(p-eye)`
    /// crosses this solid's surface, if any.
    fn segment_entry(&self, eye: [f64; 3], p: [f64; 3]) -> Option<f64> {
        let d = [p[0] - eye[0], p[1] - eye[1], p[2] - eye[2]];
        match *self {
            Solid::Box { center, half } => {
                let mut t_in = f64::NEG_INFINITY;
                let mut t_out = f64::INFINITY;
                for a in 0..3 {
                    let lo = center[a] - half[a];
                    let hi = center[a] + half[a];
                    if d[a].abs() < 1e-15 {
                        if eye[a] < lo || eye[a] > hi {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (lo - eye[a]) / d[a];
                    let t2 = (hi - eye[a]) / d[a];
                    t_in = t_in.max(t1.min(t2));
                    t_out = t_out.min(t1.max(t2));
                }
                (t_in <= t_out && t_in > 0.0).then_some(t_in)
            }
            Solid::Sphere { center, radius } => {
                let o = [eye[0] - center[0], eye[1] - center[1], eye[2] - center[2]];
                let a = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                let b = 2.0 * (o[0] * d[0] + o[1] * d[1] + o[2] * d[2]);
                let c = o[0] * o[0] + o[1] * o[1] + o[2] * o[2] - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / (2.0 * a);
                (t > 0.0).then_some(t)
            }
            Solid::Cylinder {
                cx,
                cy,
                radius,
                z0,
                z1,
            } => {
                let mut best: Option<f64> = None;
                let mut consider = |t: f64| {
                    if t > 0.0 && best.is_none_or(|b| t < b) {
                        best = Some(t);
                    }
                };
                // Lateral surface.
                let ox = eye[0] - cx;
                let oy = eye[1] - cy;
                let a = d[0] * d[0] + d[1] * d[1];
                if a > 1e-15 {
                    let b = 2.0 * (ox * d[0] + oy * d[1]);
                    let c = ox * ox + oy * oy - radius * radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 {
                        for t in [(-b - disc.sqrt()) / (2.0 * a), (-b + disc.sqrt()) / (2.0 * a)] {
                            let z = eye[2] + t * d[2];
                            if z >= z0 && z <= z1 {
                                consider(t);
                            }
                        }
                    }
                }
                // Caps.
                if d[2].abs() > 1e-15 {
                    for plane in [z0, z1] {
                        let t = (plane - eye[2]) / d[2];
                        let x = eye[0] + t * d[0] - cx;
                        let y = eye[1] + t * d[1] - cy;
                        if x * x + y * y <= radius * radius {
                            consider(t);
                        }
                    }
                }
                best
            }
        }
    }
}

/// True when some solid blocks the segment from the camera to the point
/// strictly before the point itself (the endpoint's own surface crossing is
/// excluded by the upper margin).
fn occluded(eye: [f64; 3], p: [f64; 3], solids: &[Solid]) -> bool {
    solids
        .iter()
        .any(|s| s.segment_entry(eye, p).is_some_and(|t| t < 1.0 - 1e-4))
}

fn sample_count(area: f64, density: f64) -> usize {
    (area * density).round() as usize
}

fn sample_solid_surface(solid: &Solid, density: f64, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let mut pts = Vec::new();
    match *solid {
        Solid::Box { center, half } => {
            let [hx, hy, hz] = half;
            // (axis, sign, area); bottom face omitted.
            let faces = [
                (0usize, 1.0, 4.0 * hy * hz),
                (0, -1.0, 4.0 * hy * hz),
                (1, 1.0, 4.0 * hx * hz),
                (1, -1.0, 4.0 * hx * hz),
                (2, 1.0, 4.0 * hx * hy),
            ];
            for (axis, sign, area) in faces {
                for _ in 0..sample_count(area, density) {
                    let mut p = center;
                    p[axis] += sign * half[axis];
                    let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                    p[u] += rng.random_range(-half[u]..half[u]);
                    p[v] += rng.random_range(-half[v]..half[v]);
                    pts.push(p);
                }
            }
        }
        Solid::Sphere { center, radius } => {
            for _ in 0..sample_count(solid.sampled_area(), density) {
                let dir = loop {
                    let v = [
                        rng.sample::<f64, _>(rand_distr::StandardNormal),
                        rng.sample::<f64, _>(rand_distr::StandardNormal),
                        rng.sample::<f64, _>(rand_distr::StandardNormal),
                    ];
                    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                    if n > 1e-9 {
                        break [v[0] / n, v[1] / n, v[2] / n];
                    }
                };
                pts.push([
                    center[0] + radius * dir[0],
                    center[1] + radius * dir[1],
                    center[2] + radius * dir[2],
                ]);
            }
        }
        Solid::Cylinder {
            cx,
            cy,
            radius,
            z0,
            z1,
        } => {
            let h = z1 - z0;
            let lateral = 2.0 * std::f64::consts::PI * radius * h;
            for _ in 0..sample_count(lateral, density) {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                pts.push([
                    cx + radius * theta.cos(),
                    cy + radius * theta.sin(),
                    rng.random_range(z0..z1),
                ]);
            }
            let cap = std::f64::consts::PI * radius * radius;
            for _ in 0..sample_count(cap, density) {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let r = radius * rng.random_range(0.0f64..1.0).sqrt();
                pts.push([cx + r * theta.cos(), cy + r * theta.sin(), z1]);
            }
        }
    }
    pts
}

fn corner_camera(config: &SynthConfig) -> CameraModel {
    let e = config.room_extent;
    let h = config.wall_height();
    let eye = [0.92 * e, 0.92 * e, 1.05 * h];
    let target = [0.45 * e, 0.45 * e, 0.2 * h];
    let mut z = [target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]];
    let zn = (z[0] * z[0] + z[1] * z[1] + z[2] * z[2]).sqrt();
    for c in z.iter_mut() {
        *c /= zn;
    }
    let up = [0.0, 0.0, 1.0];
    let mut x = [
        z[1] * up[2] - z[2] * up[1],
        z[2] * up[0] - z[0] * up[2],
        z[0] * up[1] - z[1] * up[0],
    ];
    let xn = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
    for c in x.iter_mut() {
        *c /= xn;
    }
    let y = [
        z[1] * x[2] - z[2] * x[1],
        z[2] * x[0] - z[0] * x[2],
        z[0] * x[1] - z[1] * x[0],
    ];
    let rotation = [x, y, z];
    let translation = [
        -(rotation[0][0] * eye[0] + rotation[0][1] * eye[1] + rotation[0][2] * eye[2]),
        -(rotation[1][0] * eye[0] + rotation[1][1] * eye[1] + rotation[1][2] * eye[2]),
        -(rotation[2][0] * eye[0] + rotation[2][1] * eye[1] + rotation[2][2] * eye[2]),
    ];
    let w = config.image_width;
    let ht = config.image_height;
    CameraModel {
        fx: 0.6 * w as f64,
        fy: 0.6 * w as f64,
        cx: w as f64 / 2.0,
        cy: ht as f64 / 2.0,
        rotation,
        translation,
        width: w,
        height: ht,
    }
}

fn camera_eye(camera: &CameraModel) -> [f64; 3] {
    // eye = -R^T t
    let r = &camera.rotation;
    let t = camera.translation;
    [
        -(r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2]),
        -(r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2]),
        -(r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2]),
    ]
}

fn place_objects(config: &SynthConfig, rng: &mut impl Rng) -> (Vec<Solid>, Vec<i32>) {
    let e = config.room_extent;
    let n_target = rng.random_range(config.n_objects_min..=config.n_objects_max);
    let mut solids: Vec<Solid> = Vec::new();
    let mut labels: Vec<i32> = Vec::new();
    for _ in 0..n_target {
        let label = rng.random_range(0..config.label_vocab.len());
        let proto = match config.label_vocab[label].shape {
            PrimitiveShape::Box { half_lo, half_hi } => {
                let half = [
                    rng.random_range(half_lo..half_hi),
                    rng.random_range(half_lo..half_hi),
                    rng.random_range(half_lo..half_hi),
                ];
                Solid::Box {
                    center: [0.0, 0.0, half[2]],
                    half,
                }
            }
            PrimitiveShape::Sphere { radius_lo, radius_hi } => {
                let radius = rng.random_range(radius_lo..radius_hi);
                Solid::Sphere {
                    center: [0.0, 0.0, radius],
                    radius,
                }
            }
            PrimitiveShape::Cylinder {
                radius_lo,
                radius_hi,
                height_lo,
                height_hi,
            } => {
                let radius = rng.random_range(radius_lo..radius_hi);
                let height = rng.random_range(height_lo..height_hi);
                Solid::Cylinder {
                    cx: 0.0,
                    cy: 0.0,
                    radius,
                    z0: 0.0,
                    z1: height,
                }
            }
        };
        let fr = proto.footprint_radius();
        let lo = 0.15 * e + fr;
        let hi = 0.85 * e - fr;
        if lo >= hi {
            continue;
        }
        for _attempt in 0..30 {
            let x = rng.random_range(lo..hi);
            let y = rng.random_range(lo..hi);
            let clear = solids.iter().all(|s| {
                let [sx, sy] = s.center_xy();
                let min_dist = fr + s.footprint_radius() + 0.1;
                (x - sx).powi(2) + (y - sy).powi(2) >= min_dist * min_dist
            });
            if clear {
                let placed = match proto {
                    Solid::Box { center, half } => Solid::Box {
                        center: [x, y, center[2]],
                        half,
                    },
                    Solid::Sphere { center, radius } => Solid::Sphere {
                        center: [x, y, center[2]],
                        radius,
                    },
                    Solid::Cylinder { radius, z0, z1, .. } => Solid::Cylinder {
                        cx: x,
                        cy: y,
                        radius,
                        z0,
                        z1,
                    },
                };
                solids.push(placed);
                labels.push(label as i32);
                break;
            }
        }
    }
    (solids, labels)
}

/// Generate one fully-populated scene. Deterministic in
/// `(config, scene_seed)`.
pub fn generate_scene(config: &SynthConfig, scene_seed: u64) -> Result<SceneRecord> {
    config.validate()?;
    let teacher = FrozenSyntheticTeacher::new(
        config.label_vocab.len(),
        config.d_img,
        config.d_txt,
        config.seed,
    )?;
    let mut rng = rng_for(config.seed, "synthgen.scene", &[scene_seed]);
    let camera = corner_camera(config);
    let eye = camera_eye(&camera);
    let e = config.room_extent;
    let h = config.wall_height();
    let density = config.points_per_surface_unit;

    let (solids, solid_labels) = if config.foreground_density_boost > 0.0 {
        place_objects(config, &mut rng)
    } else {
        (Vec::new(), Vec::new())
    };

    // Background surfaces: floor plus the two walls the camera faces.
    let mut raw: Vec<([f64; 3], i32, i32)> = Vec::new();
    for _ in 0..sample_count(e * e, density) {
        raw.push((
            [rng.random_range(0.0..e), rng.random_range(0.0..e), 0.0],
            -1,
            -1,
        ));
    }
    for _ in 0..sample_count(e * h, density) {
        raw.push((
            [0.0, rng.random_range(0.0..e), rng.random_range(0.0..h)],
            -1,
            -1,
        ));
    }
    for _ in 0..sample_count(e * h, density) {
        raw.push((
            [rng.random_range(0.0..e), 0.0, rng.random_range(0.0..h)],
            -1,
            -1,
        ));
    }
    let fg_density = density * config.foreground_density_boost;
    for (j, solid) in solids.iter().enumerate() {
        for p in sample_solid_surface(solid, fg_density, &mut rng) {
            raw.push((p, j as i32, solid_labels[j]));
        }
    }

    // Single-view visibility: drop everything some solid hides, back faces
    // included.
    let mut points = Vec::with_capacity(raw.len());
    let mut instance_id = Vec::with_capacity(raw.len());
    let mut label_id = Vec::with_capacity(raw.len());
    for (p, inst, lab) in raw {
        if occluded(eye, p, &solids) {
            continue;
        }
        points.push([p[0] as f32, p[1] as f32, p[2] as f32]);
        instance_id.push(inst);
        label_id.push(lab);
    }
    let cloud = PointCloud {
        points,
        instance_id,
        label_id,
    };

    // Render the instance image from the quantized cloud so that later
    // re-projection of the stored f32 points lands on the same pixels.
    let proj = project_points(&cloud, &camera)?;
    let w = camera.width;
    let mut pixels = vec![-1i32; w * camera.height];
    let mut zbuf = vec![f64::INFINITY; w * camera.height];
    for i in 0..cloud.len() {
        if proj.valid[i] {
            let z = camera.to_camera(cloud.point_f64(i))[2];
            let [u, v] = proj.pixel[i];
            let at = v as usize * w + u as usize;
            if z < zbuf[at] {
                zbuf[at] = z;
                pixels[at] = cloud.instance_id[i];
            }
        }
    }

    let masks = InstanceMaskSet {
        width: w,
        height: camera.height,
        pixels,
        masks: solids
            .iter()
            .enumerate()
            .map(|(j, _)| MaskEntry {
                mask_id: j as i32,
                label_id: solid_labels[j],
                is_foreground: true,
            })
            .collect(),
    };

    let scene_id = format!("scene-{scene_seed:05}");
    let vocab = config.label_names();
    let mut bundle = teacher.bundle_for_scene(&scene_id, &masks)?;
    bundle.caption = teacher.caption_for(&masks, &vocab);

    let record = SceneRecord {
        scene_id,
        cloud,
        camera,
        masks,
        teacher: bundle,
        label_vocab: vocab,
    };
    record.validate()?;
    Ok(record)
}

/// Generate `n_scenes` scenes (seeds 0..n) under `root`, one container per
/// scene, plus the dataset index. Generation parallelizes per scene.
pub fn generate_dataset(
    config: &SynthConfig,
    n_scenes: usize,
    root: &Path,
    mode: ExecMode,
) -> Result<DatasetIndex> {
    if n_scenes == 0 {
        return Err(Error::Config("dataset needs at least one scene".into()));
    }
    config.validate()?;
    let records = map_range(mode, n_scenes, |i| generate_scene(config, i as u64));
    let mut scenes = Vec::with_capacity(n_scenes);
    for record in records {
        let record = record?;
        let dir = record.scene_id.clone();
        save_scene(&record, &root.join(&dir))?;
        scenes.push(DatasetScene {
            scene_id: record.scene_id,
            dir,
        });
    }
    let index = DatasetIndex {
        scenes,
        label_vocab: config.label_names(),
        dims: FeatureDims {
            d_img: config.d_img,
            d_txt: config.d_txt,
        },
    };
    save_dataset_index(root, &index)?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspondence::build_point_mask_map;
    use crate::teacher::load_scene;

    #[test]
    fn generation_is_deterministic() {
        let config = SynthConfig::desk_default();
        let a = generate_scene(&config, 3).unwrap();
        let b = generate_scene(&config, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_boost_gives_pure_background() {
        let mut config = SynthConfig::desk_default();
        config.foreground_density_boost = 0.0;
        let scene = generate_scene(&config, 1).unwrap();
        assert!(scene.masks.masks.is_empty());
        assert!(scene.cloud.instance_id.iter().all(|&i| i == -1));
        assert!(scene.cloud.label_id.iter().all(|&l| l == -1));
        assert!(scene.masks.pixels.iter().all(|&p| p == -1));
    }

    #[test]
    fn generated_scene_round_trips_through_container() {
        let config = SynthConfig::desk_default();
        let scene = generate_scene(&config, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_scene(&scene, dir.path()).unwrap();
        assert_eq!(load_scene(dir.path()).unwrap(), scene);
    }

    #[test]
    fn dataset_generation_writes_index_and_containers() {
        let config = SynthConfig::desk_default();
        let dir = tempfile::tempdir().unwrap();
        let index = generate_dataset(&config, 3, dir.path(), ExecMode::Sequential).unwrap();
        assert_eq!(index.scenes.len(), 3);
        for s in &index.scenes {
            let scene = load_scene(&dir.path().join(&s.dir)).unwrap();
            assert_eq!(scene.scene_id, s.scene_id);
        }
    }

    #[test]
    fn parallel_and_sequential_generation_agree() {
        let config = SynthConfig::desk_default();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_dataset(&config, 4, a.path(), ExecMode::Sequential).unwrap();
        generate_dataset(&config, 4, b.path(), ExecMode::Parallel).unwrap();
        for i in 0..4 {
            let dir = format!("scene-{i:05}");
            let sa = load_scene(&a.path().join(&dir)).unwrap();
            let sb = load_scene(&b.path().join(&dir)).unwrap();
            assert_eq!(sa, sb);
        }
    }

    #[test]
    fn hundred_seed_scene_statistics() {
        let config = SynthConfig::desk_default();
        let mut worst_fraction = (1.0f64, 0.0f64);
        for seed in 0..100u64 {
            let scene = generate_scene(&config, seed).unwrap();
            let n = scene.cloud.len();
            let n_fg = scene
                .cloud
                .instance_id
                .iter()
                .filter(|&&i| i >= 0)
                .count();
            let fraction = n_fg as f64 / n as f64;
            worst_fraction.0 = worst_fraction.0.min(fraction);
            worst_fraction.1 = worst_fraction.1.max(fraction);
            assert!(
                (0.15..=0.6).contains(&fraction),
                "seed {seed}: foreground fraction {fraction:.3} out of range"
            );

            let proj = project_points(&scene.cloud, &scene.camera).unwrap();
            let map = build_point_mask_map(&proj, &scene.masks).unwrap();

            // Every instance with at least 30 visible points owns a pixel.
            let n_instances = scene.masks.masks.len();
            let mut visible = vec![0usize; n_instances];
            for i in 0..n {
                let inst = scene.cloud.instance_id[i];
                if inst >= 0 && proj.valid[i] {
                    visible[inst as usize] += 1;
                }
            }
            let mut owns_pixel = vec![false; n_instances];
            for &px in &scene.masks.pixels {
                if px >= 0 {
                    owns_pixel[px as usize] = true;
                }
            }
            for j in 0..n_instances {
                if visible[j] >= 30 {
                    assert!(
                        owns_pixel[j],
                        "seed {seed}: instance {j} has {} visible points but no pixel",
                        visible[j]
                    );
                }
            }

            // Pixel-mask assignment agrees with ground-truth instances on
            // at least 95% of valid points.
            let mut valid_count = 0usize;
            let mut agree = 0usize;
            for i in 0..n {
                if proj.valid[i] {
                    valid_count += 1;
                    if map.mask_id[i] == scene.cloud.instance_id[i] {
                        agree += 1;
                    }
                }
            }
            let agreement = agree as f64 / valid_count as f64;
            assert!(
                agreement >= 0.95,
                "seed {seed}: mask agreement {agreement:.4} below 95%"
            );
        }
    }
}
