//! Geometric primitives over raw positions: farthest-point sampling, radius
//! and k-nearest neighbor queries, box cropping, per-instance normalization,
//! and radius-based connected-component clustering.
//!
//! Everything is pure and deterministic: distance ties always break toward
//! the lower point index, so results are stable across runs and platforms.
//! Radius queries go through a uniform voxel hash grid with cell size equal
//! to the query radius; at the point counts this crate targets (1e4..1e5)
//! that outperforms brute force without approximation.

use std::collections::{HashMap, HashSet};

use crate::types::{Box7, PointCloud};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PointError {
    #[error("operation requires a nonempty point set")]
    EmptyCloud,
    #[error("sample target must be at least 1")]
    ZeroTarget,
    #[error("center index {index} out of range for {len} points")]
    CenterOutOfRange { index: usize, len: usize },
}

/// One neighbor of a query: point index plus Euclidean distance in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// Per-center neighbor sets, each sorted by ascending distance (ties by
/// lower index).
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub per_center: Vec<Vec<Neighbor>>,
}

/// Per-point cluster labels; `None` marks noise. Ids are contiguous from 0
/// in order of each cluster's first member.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<Option<usize>>,
    pub cluster_count: usize,
}

impl ClusterAssignment {
    /// Point indices per cluster, in ascending order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.cluster_count];
        for (i, label) in self.labels.iter().enumerate() {
            if let Some(c) = label {
                out[*c].push(i);
            }
        }
        out
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Index of the lexicographically smallest (x, y, z); used as a geometric
/// (permutation-independent) sampling seed.
pub fn lexicographic_seed_index(positions: &[[f64; 3]]) -> Result<usize, PointError> {
    positions
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])).then(a[2].total_cmp(&b[2]))
        })
        .map(|(i, _)| i)
        .ok_or(PointError::EmptyCloud)
}

/// Greedy farthest-point sampling: starts at `seed_index`, then repeatedly
/// takes the point with the largest distance to the chosen set (ties to the
/// lower index). When fewer than `target_count` points exist, the selected
/// sequence repeats cyclically so downstream shapes stay fixed.
pub fn farthest_point_sample(
    positions: &[[f64; 3]],
    target_count: usize,
    seed_index: usize,
) -> Result<Vec<usize>, PointError> {
    if positions.is_empty() {
        return Err(PointError::EmptyCloud);
    }
    if target_count == 0 {
        return Err(PointError::ZeroTarget);
    }
    if seed_index >= positions.len() {
        return Err(PointError::CenterOutOfRange { index: seed_index, len: positions.len() });
    }

    let n = positions.len();
    let base = target_count.min(n);
    let mut chosen = Vec::with_capacity(target_count);
    let mut selected = vec![false; n];
    let mut min_d2 = vec![f64::INFINITY; n];

    chosen.push(seed_index);
    selected[seed_index] = true;
    for step in 1..base {
        let last = positions[chosen[step - 1]];
        let mut best = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, p) in positions.iter().enumerate() {
            let d = dist2(*p, last).min(min_d2[i]);
            min_d2[i] = d;
            if !selected[i] && d > best_d2 {
                best_d2 = d;
                best = i;
            }
        }
        chosen.push(best);
        selected[best] = true;
    }

    for i in 0..target_count.saturating_sub(base) {
        let repeat = chosen[i % base];
        chosen.push(repeat);
    }
    Ok(chosen)
}

/// Uniform hash grid over 3D positions; cell edge = query radius so any
/// neighbor within the radius lies in one of the 27 adjacent cells.
pub struct VoxelGrid {
    cell: f64,
    buckets: HashMap<[i64; 3], Vec<usize>>,
}

impl VoxelGrid {
    pub fn build(positions: &[[f64; 3]], cell: f64) -> Self {
        assert!(cell > 0.0, "cell size must be positive");
        let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in positions.iter().enumerate() {
            buckets.entry(Self::key(*p, cell)).or_default().push(i);
        }
        VoxelGrid { cell, buckets }
    }

    fn key(p: [f64; 3], cell: f64) -> [i64; 3] {
        [
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        ]
    }

    /// Visits every candidate index in the 27 cells around `center`.
    pub fn for_each_candidate(&self, center: [f64; 3], mut visit: impl FnMut(usize)) {
        let k = Self::key(center, self.cell);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = self.buckets.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        for &i in bucket {
                            visit(i);
                        }
                    }
                }
            }
        }
    }
}

/// Radius query around existing points. Per center: every point within
/// `radius` (the center itself included at distance 0), nearest-first,
/// truncated to `max_samples`. A center with no in-range point falls back
/// to itself.
pub fn ball_query(
    positions: &[[f64; 3]],
    centers: &[usize],
    radius: f64,
    max_samples: usize,
) -> Result<NeighborList, PointError> {
    assert!(radius > 0.0, "radius must be positive");
    assert!(max_samples >= 1, "max_samples must be at least 1");
    for &c in centers {
        if c >= positions.len() {
            return Err(PointError::CenterOutOfRange { index: c, len: positions.len() });
        }
    }

    let grid = VoxelGrid::build(positions, radius);
    let r2 = radius * radius;
    let mut per_center = Vec::with_capacity(centers.len());
    for &c in centers {
        let center = positions[c];
        let mut found: Vec<Neighbor> = Vec::new();
        grid.for_each_candidate(center, |i| {
            let d2 = dist2(positions[i], center);
            if d2 <= r2 {
                found.push(Neighbor { index: i, distance: d2.sqrt() });
            }
        });
        found.sort_unstable_by(|a, b| {
            a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index))
        });
        found.truncate(max_samples);
        if found.is_empty() {
            found.push(Neighbor { index: c, distance: 0.0 });
        }
        per_center.push(found);
    }
    Ok(NeighborList { per_center })
}

/// The k nearest points to an arbitrary query position, ascending by
/// distance with ties by lower index; shorter when fewer points exist.
pub fn knn(positions: &[[f64; 3]], query: [f64; 3], k: usize) -> Vec<Neighbor> {
    assert!(k >= 1, "k must be at least 1");
    let mut all: Vec<Neighbor> = positions
        .iter()
        .enumerate()
        .map(|(i, p)| Neighbor { index: i, distance: dist2(*p, query).sqrt() })
        .collect();
    all.sort_unstable_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
    all.truncate(k);
    all
}

/// Indices of points inside `bbox` after growing its length by `dl` and
/// width by `dw` (height unchanged). The box is closed: face points count
/// as inside.
pub fn crop_by_box(positions: &[[f64; 3]], bbox: &Box7, dl: f64, dw: f64) -> Vec<usize> {
    let half_l = (bbox.l + dl) / 2.0;
    let half_w = (bbox.w + dw) / 2.0;
    let half_h = bbox.h / 2.0;
    let (sin, cos) = bbox.yaw.sin_cos();
    positions
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let dx = p[0] - bbox.x;
            let dy = p[1] - bbox.y;
            let dz = p[2] - bbox.z;
            // rotate into the box frame: R(-yaw)
            let local_x = cos * dx + sin * dy;
            let local_y = -sin * dx + cos * dy;
            local_x.abs() <= half_l && local_y.abs() <= half_w && dz.abs() <= half_h
        })
        .map(|(i, _)| i)
        .collect()
}

/// Centroid/scale transform produced by [`normalize_instance`];
/// `restore` maps a normalized position back to sensor coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceTransform {
    pub centroid: [f64; 3],
    pub scale: f64,
}

impl InstanceTransform {
    pub fn restore(&self, p: [f64; 3]) -> [f64; 3] {
        [
            p[0] * self.scale + self.centroid[0],
            p[1] * self.scale + self.centroid[1],
            p[2] * self.scale + self.centroid[2],
        ]
    }
}

/// Centers a point set on its centroid and divides by the largest absolute
/// coordinate (scale 1 when degenerate). Reflectance passes through.
pub fn normalize_instance(cloud: &PointCloud) -> Result<(PointCloud, InstanceTransform), PointError> {
    if cloud.is_empty() {
        return Err(PointError::EmptyCloud);
    }
    let n = cloud.len() as f64;
    let mut centroid = [0.0; 3];
    for p in &cloud.points {
        centroid[0] += p.x;
        centroid[1] += p.y;
        centroid[2] += p.z;
    }
    for c in &mut centroid {
        *c /= n;
    }
    let mut max_abs: f64 = 0.0;
    for p in &cloud.points {
        max_abs = max_abs
            .max((p.x - centroid[0]).abs())
            .max((p.y - centroid[1]).abs())
            .max((p.z - centroid[2]).abs());
    }
    let scale = if max_abs > 0.0 { max_abs } else { 1.0 };
    let points = cloud
        .points
        .iter()
        .map(|p| crate::types::Point {
            x: (p.x - centroid[0]) / scale,
            y: (p.y - centroid[1]) / scale,
            z: (p.z - centroid[2]) / scale,
            r: p.r,
        })
        .collect();
    Ok((PointCloud::new(points), InstanceTransform { centroid, scale }))
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect(), size: vec![1; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
    }
}

/// Single-linkage clustering: two points share a cluster iff connected by a
/// chain of hops each within `radius`. Components smaller than `min_points`
/// become noise. The partition is order-independent; ids follow each
/// cluster's first member index.
pub fn radius_cluster(positions: &[[f64; 3]], radius: f64, min_points: usize) -> ClusterAssignment {
    assert!(radius > 0.0, "radius must be positive");
    let n = positions.len();
    if n == 0 {
        return ClusterAssignment { labels: Vec::new(), cluster_count: 0 };
    }

    let grid = VoxelGrid::build(positions, radius);
    let r2 = radius * radius;
    let mut uf = UnionFind::new(n);
    for (i, p) in positions.iter().enumerate() {
        grid.for_each_candidate(*p, |j| {
            if j > i && dist2(positions[j], *p) <= r2 {
                uf.union(i, j);
            }
        });
    }

    let mut labels = vec![None; n];
    let mut next_id = 0;
    let mut id_of_root: HashMap<usize, usize> = HashMap::new();
    for i in 0..n {
        let root = uf.find(i);
        if uf.size[root] < min_points {
            continue;
        }
        let id = *id_of_root.entry(root).or_insert_with(|| {
            let id = next_id;
            next_id += 1;
            id
        });
        labels[i] = Some(id);
    }
    ClusterAssignment { labels, cluster_count: next_id }
}

/// Jaccard overlap of two index sets; duplicates within a set are ignored.
/// Both empty counts as zero overlap.
pub fn point_set_iou(a: &[usize], b: &[usize]) -> f64 {
    let sa: HashSet<usize> = a.iter().copied().collect();
    let sb: HashSet<usize> = b.iter().copied().collect();
    let intersection = sa.intersection(&sb).count();
    let union = sa.union(&sb).count();
    if union == 0 {
        0.0
    } else {
        intersection as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Point;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_positions(n: usize, extent: f64, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-extent..extent),
                    rng.gen_range(-extent..extent),
                    rng.gen_range(-extent..extent),
                ]
            })
            .collect()
    }

    /// Same greedy rule as the implementation, but O(N) min-distance scans
    /// recomputed from scratch every step.
    fn fps_oracle(positions: &[[f64; 3]], target: usize, seed: usize) -> Vec<usize> {
        let mut chosen = vec![seed];
        while chosen.len() < target.min(positions.len()) {
            let mut best = usize::MAX;
            let mut best_d = f64::NEG_INFINITY;
            for (i, p) in positions.iter().enumerate() {
                if chosen.contains(&i) {
                    continue;
                }
                let d = chosen.iter().map(|&c| dist2(positions[c], *p)).fold(f64::INFINITY, f64::min);
                if d > best_d {
                    best_d = d;
                    best = i;
                }
            }
            chosen.push(best);
        }
        let base = chosen.len();
        for i in 0..target.saturating_sub(base) {
            let repeat = chosen[i % base];
            chosen.push(repeat);
        }
        chosen
    }

    #[test]
    fn fps_picks_the_farthest_point_first() {
        let positions = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 0.0, 0.0]];
        assert_eq!(farthest_point_sample(&positions, 2, 0).unwrap(), vec![0, 1]);
    }

    #[test]
    fn fps_with_target_equal_to_n_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let positions = random_positions(17, 5.0, &mut rng);
        let mut sample = farthest_point_sample(&positions, 17, 3).unwrap();
        sample.sort_unstable();
        assert_eq!(sample, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn fps_pads_cyclically_when_target_exceeds_n() {
        let positions = vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        let sample = farthest_point_sample(&positions, 5, 0).unwrap();
        assert_eq!(sample.len(), 5);
        let mut distinct = sample.clone();
        distinct.sort_unstable();
        distinct.dedup();
        assert_eq!(distinct, vec![0, 1, 2]);
        assert_eq!(sample[3], sample[0]);
        assert_eq!(sample[4], sample[1]);
    }

    #[test]
    fn fps_rejects_empty_input_and_zero_target() {
        assert_eq!(farthest_point_sample(&[], 2, 0), Err(PointError::EmptyCloud));
        assert_eq!(
            farthest_point_sample(&[[0.0; 3]], 0, 0),
            Err(PointError::ZeroTarget)
        );
    }

    #[test]
    fn fps_matches_naive_greedy_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for trial in 0..20 {
            let n = rng.gen_range(5..120);
            let positions = random_positions(n, 8.0, &mut rng);
            let target = rng.gen_range(1..=n);
            let seed = rng.gen_range(0..n);
            assert_eq!(
                farthest_point_sample(&positions, target, seed).unwrap(),
                fps_oracle(&positions, target, seed),
                "trial {trial}"
            );
        }
    }

    #[test]
    fn fps_spreads_better_than_random_subsets() {
        fn min_pairwise(positions: &[[f64; 3]], subset: &[usize]) -> f64 {
            let mut best = f64::INFINITY;
            for (i, &a) in subset.iter().enumerate() {
                for &b in &subset[i + 1..] {
                    best = best.min(dist2(positions[a], positions[b]));
                }
            }
            best
        }
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut wins = 0;
        let trials = 100;
        for _ in 0..trials {
            let positions = random_positions(60, 10.0, &mut rng);
            let sample = farthest_point_sample(&positions, 8, 0).unwrap();
            let fps_spread = min_pairwise(&positions, &sample);
            let random_subset: Vec<usize> = rand::seq::index::sample(&mut rng, 60, 8).into_vec();
            if fps_spread >= min_pairwise(&positions, &random_subset) {
                wins += 1;
            }
        }
        assert!(wins >= 95, "FPS beat random spread only {wins}/{trials} times");
    }

    #[test]
    fn ball_query_returns_center_for_isolated_points() {
        let positions = vec![[0.0; 3], [100.0, 0.0, 0.0]];
        let result = ball_query(&positions, &[1], 0.5, 4).unwrap();
        assert_eq!(result.per_center[0], vec![Neighbor { index: 1, distance: 0.0 }]);
    }

    #[test]
    fn ball_query_collects_everything_in_range_sorted() {
        let positions = vec![[0.0; 3], [0.3, 0.0, 0.0], [0.1, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let result = ball_query(&positions, &[0], 1.0, 10).unwrap();
        let indices: Vec<usize> = result.per_center[0].iter().map(|n| n.index).collect();
        assert_eq!(indices, vec![0, 2, 1]);
    }

    #[test]
    fn ball_query_rejects_bad_center() {
        let positions = vec![[0.0; 3]];
        assert_eq!(
            ball_query(&positions, &[3], 1.0, 4),
            Err(PointError::CenterOutOfRange { index: 3, len: 1 })
        );
    }

    #[test]
    fn ball_query_matches_brute_force_on_random_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for trial in 0..20 {
            let n = rng.gen_range(10..=200);
            let positions = random_positions(n, 3.0, &mut rng);
            let radius = rng.gen_range(0.2..2.5);
            let max_samples = rng.gen_range(1..40);
            let centers: Vec<usize> = (0..rng.gen_range(1..10)).map(|_| rng.gen_range(0..n)).collect();
            let got = ball_query(&positions, &centers, radius, max_samples).unwrap();
            for (slot, &c) in centers.iter().enumerate() {
                let mut expect: Vec<Neighbor> = positions
                    .iter()
                    .enumerate()
                    .filter_map(|(i, p)| {
                        let d = dist2(*p, positions[c]).sqrt();
                        (d <= radius).then_some(Neighbor { index: i, distance: d })
                    })
                    .collect();
                expect.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
                expect.truncate(max_samples);
                let got_idx: Vec<usize> = got.per_center[slot].iter().map(|n| n.index).collect();
                let expect_idx: Vec<usize> = expect.iter().map(|n| n.index).collect();
                assert_eq!(got_idx, expect_idx, "trial {trial} center {c}");
            }
        }
    }

    #[test]
    fn knn_of_a_data_point_is_itself() {
        let positions = vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let result = knn(&positions, [1.0, 2.0, 3.0], 1);
        assert_eq!(result, vec![Neighbor { index: 0, distance: 0.0 }]);
    }

    #[test]
    fn knn_breaks_distance_ties_by_lower_index() {
        let positions = vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        let result = knn(&positions, [0.0; 3], 2);
        assert_eq!(result[0].index, 0);
        assert_eq!(result[1].index, 1);
    }

    #[test]
    fn knn_truncates_to_available_points() {
        let positions = vec![[0.0; 3]];
        assert_eq!(knn(&positions, [1.0, 0.0, 0.0], 5).len(), 1);
    }

    #[test]
    fn knn_matches_brute_force_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..20 {
            let n = rng.gen_range(5..200);
            let positions = random_positions(n, 4.0, &mut rng);
            let query = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
            let k = rng.gen_range(1..10);
            let got: Vec<usize> = knn(&positions, query, k).iter().map(|n| n.index).collect();
            let mut expect: Vec<(f64, usize)> = positions
                .iter()
                .enumerate()
                .map(|(i, p)| (dist2(*p, query).sqrt(), i))
                .collect();
            expect.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let expect: Vec<usize> = expect.into_iter().take(k).map(|(_, i)| i).collect();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn crop_growth_admits_points_just_outside() {
        let unit_box = Box7::new([0.0; 3], [1.0, 1.0, 1.0], 0.0);
        let positions = vec![[0.55, 0.0, 0.0]];
        assert!(crop_by_box(&positions, &unit_box, 0.0, 0.0).is_empty());
        assert_eq!(crop_by_box(&positions, &unit_box, 0.2, 0.2), vec![0]);
    }

    #[test]
    fn crop_includes_face_points() {
        let unit_box = Box7::new([0.0; 3], [1.0, 1.0, 1.0], 0.0);
        let positions = vec![[0.5, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.5]];
        assert_eq!(crop_by_box(&positions, &unit_box, 0.0, 0.0), vec![0, 1, 2]);
    }

    #[test]
    fn crop_of_yawed_box_equals_swapped_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let positions = random_positions(300, 2.0, &mut rng);
        let yawed = Box7::new([0.2, -0.1, 0.0], [0.6, 1.4, 2.0], std::f64::consts::FRAC_PI_2);
        let swapped = Box7::new([0.2, -0.1, 0.0], [1.4, 0.6, 2.0], 0.0);
        let a = crop_by_box(&positions, &yawed, 0.0, 0.0);
        let b = crop_by_box(&positions, &swapped, 0.0, 0.0);
        assert_eq!(a, b);
    }

    #[test]
    fn crop_without_growth_is_subset_of_grown_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        for _ in 0..10 {
            let positions = random_positions(200, 2.0, &mut rng);
            let bbox = Box7::new(
                [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0],
                [rng.gen_range(0.2..1.5), rng.gen_range(0.2..1.5), rng.gen_range(0.5..2.0)],
                rng.gen_range(-3.0..3.0),
            );
            let tight: std::collections::HashSet<usize> =
                crop_by_box(&positions, &bbox, 0.0, 0.0).into_iter().collect();
            let grown: std::collections::HashSet<usize> =
                crop_by_box(&positions, &bbox, 0.3, 0.3).into_iter().collect();
            assert!(tight.is_subset(&grown));
        }
    }

    #[test]
    fn normalize_single_point_goes_to_origin_with_unit_scale() {
        let cloud = PointCloud::new(vec![Point::new(3.0, -2.0, 1.0, 0.7)]);
        let (normed, t) = normalize_instance(&cloud).unwrap();
        assert_eq!(normed.points[0].pos(), [0.0, 0.0, 0.0]);
        assert_eq!(normed.points[0].r, 0.7);
        assert_eq!(t.scale, 1.0);
        assert_eq!(t.centroid, [3.0, -2.0, 1.0]);
    }

    #[test]
    fn normalize_keeps_symmetric_pair_fixed() {
        let cloud = PointCloud::from_raw(&[[-1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]]);
        let (normed, t) = normalize_instance(&cloud).unwrap();
        assert_eq!(normed.points[0].pos(), [-1.0, 0.0, 0.0]);
        assert_eq!(normed.points[1].pos(), [1.0, 0.0, 0.0]);
        assert_eq!(t.centroid, [0.0, 0.0, 0.0]);
        assert_eq!(t.scale, 1.0);
    }

    #[test]
    fn normalize_round_trips_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let points: Vec<Point> = (0..50)
            .map(|_| {
                Point::new(
                    rng.gen_range(-20.0..20.0),
                    rng.gen_range(-20.0..20.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(0.0..1.0),
                )
            })
            .collect();
        let cloud = PointCloud::new(points);
        let (normed, t) = normalize_instance(&cloud).unwrap();
        for (orig, n) in cloud.points.iter().zip(&normed.points) {
            let restored = t.restore(n.pos());
            for c in 0..3 {
                assert!((restored[c] - orig.pos()[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn far_points_do_not_share_a_cluster() {
        let positions = vec![[0.0; 3], [10.0, 0.0, 0.0]];
        let a = radius_cluster(&positions, 1.0, 1);
        assert_eq!(a.cluster_count, 2);
        assert_ne!(a.labels[0], a.labels[1]);
        let noisy = radius_cluster(&positions, 1.0, 2);
        assert_eq!(noisy.cluster_count, 0);
        assert_eq!(noisy.labels, vec![None, None]);
    }

    #[test]
    fn chains_within_radius_form_one_cluster() {
        let positions: Vec<[f64; 3]> = (0..10).map(|i| [0.9 * i as f64, 0.0, 0.0]).collect();
        let a = radius_cluster(&positions, 1.0, 1);
        assert_eq!(a.cluster_count, 1);
        assert!(a.labels.iter().all(|l| *l == Some(0)));
    }

    /// O(N²) union-find over the full distance matrix.
    fn cluster_oracle(positions: &[[f64; 3]], radius: f64, min_points: usize) -> Vec<Vec<usize>> {
        let n = positions.len();
        let mut uf = UnionFind::new(n);
        for i in 0..n {
            for j in i + 1..n {
                if dist2(positions[i], positions[j]) <= radius * radius {
                    uf.union(i, j);
                }
            }
        }
        let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
        for i in 0..n {
            let root = uf.find(i);
            groups.entry(root).or_default().push(i);
        }
        let mut out: Vec<Vec<usize>> =
            groups.into_values().filter(|g| g.len() >= min_points).collect();
        out.sort_by_key(|g| g[0]);
        out
    }

    #[test]
    fn radius_cluster_matches_brute_force_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        for trial in 0..20 {
            let n = rng.gen_range(10..=200);
            let positions = random_positions(n, 4.0, &mut rng);
            let radius = rng.gen_range(0.3..2.0);
            let min_points = rng.gen_range(1..6);
            let got = radius_cluster(&positions, radius, min_points);
            assert_eq!(got.members(), cluster_oracle(&positions, radius, min_points), "trial {trial}");
        }
    }

    #[test]
    fn radius_cluster_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let positions = random_positions(80, 3.0, &mut rng);
        let base = radius_cluster(&positions, 0.8, 3);

        let mut perm: Vec<usize> = (0..80).collect();
        for i in (1..80).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let shuffled: Vec<[f64; 3]> = perm.iter().map(|&i| positions[i]).collect();
        let permuted = radius_cluster(&shuffled, 0.8, 3);

        // map each shuffled cluster back to original indices and compare as partitions
        let mut got: Vec<Vec<usize>> = permuted
            .members()
            .into_iter()
            .map(|g| {
                let mut orig: Vec<usize> = g.into_iter().map(|i| perm[i]).collect();
                orig.sort_unstable();
                orig
            })
            .collect();
        got.sort();
        let mut expect = base.members();
        expect.sort();
        assert_eq!(got, expect);
    }

    #[test]
    fn cluster_ids_are_contiguous() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let positions = random_positions(120, 3.0, &mut rng);
        let a = radius_cluster(&positions, 0.7, 2);
        let mut seen = vec![false; a.cluster_count];
        for label in a.labels.iter().flatten() {
            assert!(*label < a.cluster_count);
            seen[*label] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn point_set_iou_examples() {
        assert_eq!(point_set_iou(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(point_set_iou(&[1, 2], &[3, 4]), 0.0);
        assert_eq!(point_set_iou(&[], &[]), 0.0);
        assert!((point_set_iou(&[1, 2, 3, 4], &[3, 4, 5, 6]) - 2.0 / 6.0).abs() < 1e-15);
        // duplicates are set-collapsed
        assert_eq!(point_set_iou(&[1, 1, 2], &[1, 2, 2]), 1.0);
    }
}
