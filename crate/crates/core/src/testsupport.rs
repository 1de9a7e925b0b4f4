//! Helpers shared by unit and integration tests: seeded random inputs and
//! slow brute-force oracles for the geometric kernels.
//!
//! Not part of the public API surface.

use rand::Rng;

use crate::pointcloud::PointCloud;
use crate::seeding::rng_for;

/// Uniform points in [-1, 1]^3 with a fixed seed.
pub fn random_points(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = rng_for(seed, "testsupport.points", &[]);
    (0..n)
        .map(|_| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]
        })
        .collect()
}

/// Unlabelled random cloud (all points background).
pub fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = rng_for(seed, "testsupport.cloud", &[]);
    let points = (0..n)
        .map(|_| {
            [
                rng.random_range(-1.0f32..1.0),
                rng.random_range(-1.0f32..1.0),
                rng.random_range(-1.0f32..1.0),
            ]
        })
        .collect();
    PointCloud {
        points,
        instance_id: vec![-1; n],
        label_id: vec![-1; n],
    }
}

fn d2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Reference farthest-point sampling: recompute every min-distance from
/// scratch each round instead of maintaining a running minimum.
pub fn brute_fps(cloud: &PointCloud, m: usize, seed_index: usize) -> Vec<usize> {
    let n = cloud.len();
    let pts: Vec<[f64; 3]> = (0..n).map(|i| cloud.point_f64(i)).collect();
    let mut selected = vec![seed_index];
    while selected.len() < m {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if selected.contains(&i) {
                continue;
            }
            let min_d = selected
                .iter()
                .map(|&s| d2(pts[i], pts[s]))
                .fold(f64::INFINITY, f64::min);
            if min_d > best_d {
                best_d = min_d;
                best = i;
            }
        }
        selected.push(best);
    }
    selected
}

/// Reference k-NN: full sort of all (distance, index) pairs.
pub fn brute_knn(cloud: &PointCloud, center: usize, k: usize) -> Vec<usize> {
    let n = cloud.len();
    let c = cloud.point_f64(center);
    let mut pairs: Vec<(f64, usize)> = (0..n).map(|i| (d2(cloud.point_f64(i), c), i)).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    pairs[..k].iter().map(|&(_, i)| i).collect()
}
