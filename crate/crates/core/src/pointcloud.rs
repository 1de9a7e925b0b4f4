//! Geometric kernels: farthest-point sampling, k-NN patch grouping, and the
//! squared-L2 Chamfer distance.
//!
//! All three are deterministic: distances are compared as exact f64 squared
//! norms and every tie breaks toward the lowest point index, so repeated
//! calls are bitwise identical and small instances can be checked against
//! brute-force oracles exactly.

use crate::error::{Error, Result};

/// A labelled scene point cloud.
///
/// Coordinates are stored as `f32` (the on-disk dtype); geometry runs in
/// `f64` after exact widening. `instance_id` is −1 for background structure
/// and ≥ 0 for object instances; `label_id` is −1 for background and a
/// semantic vocabulary index otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
    pub instance_id: Vec<i32>,
    pub label_id: Vec<i32>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Point coordinates widened to f64 (exact).
    pub fn point_f64(&self, index: usize) -> [f64; 3] {
        let p = self.points[index];
        [p[0] as f64, p[1] as f64, p[2] as f64]
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Precondition("point cloud is empty".into()));
        }
        if self.instance_id.len() != self.points.len() || self.label_id.len() != self.points.len()
        {
            return Err(Error::Precondition(format!(
                "id arrays ({}, {}) do not match point count {}",
                self.instance_id.len(),
                self.label_id.len(),
                self.points.len()
            )));
        }
        for (i, p) in self.points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::Precondition(format!(
                    "point {i} has non-finite coordinates"
                )));
            }
        }
        for i in 0..self.len() {
            if self.instance_id[i] >= 0 && self.label_id[i] < 0 {
                return Err(Error::Precondition(format!(
                    "point {i} has instance_id {} but no label",
                    self.instance_id[i]
                )));
            }
        }
        Ok(())
    }
}

/// Patch decomposition of a cloud: M centers, each with its K nearest points
/// and their center-relative coordinates.
///
/// `local_coords[m * k .. ]` are exact f64 differences, so
/// `local + center == parent point` holds bitwise for scene-scale inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub centers: Vec<[f64; 3]>,
    /// Point indices of the selected centers in the parent cloud.
    pub center_indices: Vec<usize>,
    /// Flat M×K neighbor indices into the parent cloud.
    pub neighbor_indices: Vec<usize>,
    /// Flat M×K center-relative coordinates.
    pub local_coords: Vec<[f64; 3]>,
    pub patch_size: usize,
}

impl PatchSet {
    pub fn n_patches(&self) -> usize {
        self.centers.len()
    }

    /// Neighbor indices of patch `m`.
    pub fn neighbors(&self, m: usize) -> &[usize] {
        let k = self.patch_size;
        &self.neighbor_indices[m * k..(m + 1) * k]
    }

    /// Center-relative coordinates of patch `m`.
    pub fn locals(&self, m: usize) -> &[[f64; 3]] {
        let k = self.patch_size;
        &self.local_coords[m * k..(m + 1) * k]
    }
}

#[inline]
pub(crate) fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Farthest-point sampling of `m` patch centers starting from `seed_index`.
///
/// Greedy: each selected point maximizes the minimum squared distance to all
/// previously selected points, ties broken by the lowest index. Returns the
/// selected point indices in selection order.
pub fn fps(cloud: &PointCloud, m: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(Error::Precondition(format!(
            "fps requested {m} centers from {n} points"
        )));
    }
    if seed_index >= n {
        return Err(Error::Precondition(format!(
            "fps seed index {seed_index} out of range for {n} points"
        )));
    }

    let points: Vec<[f64; 3]> = (0..n).map(|i| cloud.point_f64(i)).collect();
    let mut selected = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut min_d2 = vec![f64::INFINITY; n];

    let mut current = seed_index;
    selected.push(current);
    taken[current] = true;

    for _ in 1..m {
        let cp = points[current];
        for i in 0..n {
            let d = dist2(points[i], cp);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
        // Strict > keeps the lowest index on ties.
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if !taken[i] && min_d2[i] > best_d {
                best_d = min_d2[i];
                best = i;
            }
        }
        current = best;
        selected.push(current);
        taken[current] = true;
    }
    Ok(selected)
}

/// Group the K nearest points around each center into a [`PatchSet`].
///
/// The center point itself is always among its own neighbors (distance 0);
/// equal distances break toward the lowest point index, and each patch's
/// neighbors are listed in (distance, index) order.
pub fn knn_group(cloud: &PointCloud, center_indices: &[usize], k: usize) -> Result<PatchSet> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::Precondition(format!(
            "knn_group requested {k} neighbors from {n} points"
        )));
    }
    for &c in center_indices {
        if c >= n {
            return Err(Error::Precondition(format!(
                "center index {c} out of range for {n} points"
            )));
        }
    }

    let points: Vec<[f64; 3]> = (0..n).map(|i| cloud.point_f64(i)).collect();
    let m = center_indices.len();
    let mut centers = Vec::with_capacity(m);
    let mut neighbor_indices = Vec::with_capacity(m * k);
    let mut local_coords = Vec::with_capacity(m * k);

    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n);
    for &c in center_indices {
        let center = points[c];
        centers.push(center);
        scratch.clear();
        scratch.extend((0..n).map(|i| (dist2(points[i], center), i)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
        };
        if k < n {
            scratch.select_nth_unstable_by(k - 1, cmp);
        }
        scratch[..k].sort_unstable_by(cmp);
        for &(_, i) in &scratch[..k] {
            neighbor_indices.push(i);
            let p = points[i];
            local_coords.push([p[0] - center[0], p[1] - center[1], p[2] - center[2]]);
        }
    }

    Ok(PatchSet {
        centers,
        center_indices: center_indices.to_vec(),
        neighbor_indices,
        local_coords,
        patch_size: k,
    })
}

/// Squared-L2 Chamfer distance between two point sets:
/// mean over `a` of the squared distance to its nearest point in `b`, plus
/// the same with the roles swapped.
pub fn chamfer_l2(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Precondition(
            "chamfer_l2 requires two non-empty point sets".into(),
        ));
    }
    let mut forward = 0.0;
    for &p in a {
        let mut best = f64::INFINITY;
        for &q in b {
            let d = dist2(p, q);
            if d < best {
                best = d;
            }
        }
        forward += best;
    }
    let mut backward = 0.0;
    for &q in b {
        let mut best = f64::INFINITY;
        for &p in a {
            let d = dist2(q, p);
            if d < best {
                best = d;
            }
        }
        backward += best;
    }
    Ok(forward / a.len() as f64 + backward / b.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testsupport::{brute_fps, brute_knn, random_cloud, random_points};

    fn line_cloud(xs: &[f32]) -> PointCloud {
        PointCloud {
            points: xs.iter().map(|&x| [x, 0.0, 0.0]).collect(),
            instance_id: vec![-1; xs.len()],
            label_id: vec![-1; xs.len()],
        }
    }

    #[test]
    fn fps_collinear_hand_trace() {
        // p3 is farthest from p0; p1 and p2 then tie at min-distance 1 and
        // the lowest index wins.
        let cloud = line_cloud(&[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(fps(&cloud, 3, 0).unwrap(), vec![0, 3, 1]);
    }

    #[test]
    fn fps_single_center_is_seed() {
        let cloud = line_cloud(&[0.5, 1.5, -3.0]);
        assert_eq!(fps(&cloud, 1, 2).unwrap(), vec![2]);
    }

    #[test]
    fn fps_exhaustion_is_permutation() {
        let cloud = random_cloud(17, 42);
        let mut got = fps(&cloud, 17, 5).unwrap();
        got.sort_unstable();
        assert_eq!(got, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn fps_rejects_bad_preconditions() {
        let cloud = line_cloud(&[0.0, 1.0]);
        assert!(matches!(fps(&cloud, 3, 0), Err(Error::Precondition(_))));
        assert!(matches!(fps(&cloud, 1, 9), Err(Error::Precondition(_))));
    }

    #[test]
    fn fps_matches_brute_force_oracle_all_seeds() {
        for trial in 0..20 {
            let n = 4 + (trial * 3) % 61;
            let cloud = random_cloud(n, 1000 + trial as u64);
            let m = 1 + (trial * 7) % n;
            for seed in 0..n {
                assert_eq!(
                    fps(&cloud, m, seed).unwrap(),
                    brute_fps(&cloud, m, seed),
                    "n={n} m={m} seed={seed}"
                );
            }
        }
    }

    #[test]
    fn knn_self_is_nearest() {
        let cloud = random_cloud(9, 3);
        let patches = knn_group(&cloud, &[4], 1).unwrap();
        assert_eq!(patches.neighbors(0), &[4]);
        assert_eq!(patches.locals(0), &[[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn knn_line_hand_trace() {
        let cloud = line_cloud(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        let patches = knn_group(&cloud, &[2], 3).unwrap();
        // self first, then the distance-1 tie resolves to the lower index.
        assert_eq!(patches.neighbors(0), &[2, 1, 3]);
    }

    #[test]
    fn knn_k_equals_n_covers_everything() {
        let cloud = random_cloud(12, 8);
        let patches = knn_group(&cloud, &[0, 7], 12).unwrap();
        for m in 0..2 {
            let mut idx = patches.neighbors(m).to_vec();
            idx.sort_unstable();
            assert_eq!(idx, (0..12).collect::<Vec<_>>());
        }
    }

    #[test]
    fn knn_rejects_k_above_n() {
        let cloud = random_cloud(4, 1);
        assert!(matches!(
            knn_group(&cloud, &[0], 5),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn knn_matches_brute_force_oracle() {
        for trial in 0..20 {
            let n = 3 + (trial * 5) % 62;
            let cloud = random_cloud(n, 2000 + trial as u64);
            let k = 1 + (trial * 3) % n;
            let centers: Vec<usize> = (0..n).step_by(3).collect();
            let got = knn_group(&cloud, &centers, k).unwrap();
            for (row, &c) in centers.iter().enumerate() {
                assert_eq!(
                    got.neighbors(row),
                    brute_knn(&cloud, c, k).as_slice(),
                    "n={n} k={k} center={c}"
                );
            }
        }
    }

    #[test]
    fn local_coords_reconstruct_parent_points_exactly() {
        let cloud = random_cloud(40, 77);
        let centers = fps(&cloud, 8, 0).unwrap();
        let patches = knn_group(&cloud, &centers, 6).unwrap();
        for m in 0..patches.n_patches() {
            let center = patches.centers[m];
            for (local, &idx) in patches.locals(m).iter().zip(patches.neighbors(m)) {
                let p = cloud.point_f64(idx);
                for d in 0..3 {
                    assert_eq!(local[d] + center[d], p[d]);
                }
            }
        }
    }

    #[test]
    fn chamfer_identity_is_zero() {
        let pts = random_points(10, 5);
        assert_eq!(chamfer_l2(&pts, &pts).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_unit_offset_analytic() {
        let a = [[0.0, 0.0, 0.0]];
        let b = [[1.0, 0.0, 0.0]];
        assert_eq!(chamfer_l2(&a, &b).unwrap(), 2.0);
    }

    #[test]
    fn chamfer_rejects_empty_sets() {
        let pts = random_points(3, 1);
        assert!(matches!(
            chamfer_l2(&pts, &[]),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            chamfer_l2(&[], &pts),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn chamfer_matches_double_loop_oracle() {
        // Oracle: mean-of-min via explicitly materialized distance matrix.
        let a = random_points(8, 11);
        let b = random_points(6, 12);
        let mut fwd = 0.0;
        for p in &a {
            let best = b
                .iter()
                .map(|q| dist2(*p, *q))
                .fold(f64::INFINITY, f64::min);
            fwd += best;
        }
        let mut bwd = 0.0;
        for q in &b {
            let best = a
                .iter()
                .map(|p| dist2(*q, *p))
                .fold(f64::INFINITY, f64::min);
            bwd += best;
        }
        let expected = fwd / 8.0 + bwd / 6.0;
        let got = chamfer_l2(&a, &b).unwrap();
        assert!((got - expected).abs() <= 1e-6 * expected.abs());
    }

    #[test]
    fn chamfer_symmetry_nonnegativity_translation() {
        for trial in 0..10 {
            let a = random_points(7, 100 + trial);
            let b = random_points(9, 200 + trial);
            let ab = chamfer_l2(&a, &b).unwrap();
            let ba = chamfer_l2(&b, &a).unwrap();
            assert_eq!(ab, ba);
            assert!(ab >= 0.0);

            let shift = [0.3, -1.7, 2.2];
            let at: Vec<[f64; 3]> = a
                .iter()
                .map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]])
                .collect();
            let bt: Vec<[f64; 3]> = b
                .iter()
                .map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]])
                .collect();
            let translated = chamfer_l2(&at, &bt).unwrap();
            assert!((translated - ab).abs() <= 1e-6 * ab.max(1.0));
        }
    }

    #[test]
    fn kernels_are_bitwise_deterministic() {
        let cloud = random_cloud(50, 9);
        let a = fps(&cloud, 13, 2).unwrap();
        let b = fps(&cloud, 13, 2).unwrap();
        assert_eq!(a, b);
        let pa = knn_group(&cloud, &a, 7).unwrap();
        let pb = knn_group(&cloud, &b, 7).unwrap();
        assert_eq!(pa, pb);
        let x = random_points(12, 3);
        let y = random_points(14, 4);
        assert_eq!(
            chamfer_l2(&x, &y).unwrap().to_bits(),
            chamfer_l2(&x, &y).unwrap().to_bits()
        );
    }
}
