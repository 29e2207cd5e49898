//! Point clouds, patch segmentation and masking.
//!
//! A cloud is split into `G` patches: centers are picked with farthest point
//! sampling and each center gathers its `group_size` nearest neighbours.
//! Patch points are stored relative to their center so that
//! [`assemble`] can add the center back with the same arithmetic.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

pub type Point = [f64; 3];

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn sub(a: &Point, b: &Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: &Point, b: &Point) -> Point {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// An ordered, non-empty set of finite 3-D points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return invalid("point cloud must contain at least one point");
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return invalid(format!("point {i} has a non-finite coordinate"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `G` centers with their center-relative neighbourhoods.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub centers: Vec<Point>,
    pub patches: Vec<Vec<Point>>,
    pub group_size: usize,
}

impl PatchSet {
    pub fn num_groups(&self) -> usize {
        self.centers.len()
    }

    /// Builds a patch set from absolute patch points, subtracting centers.
    pub fn from_absolute(centers: Vec<Point>, absolute: &[Vec<Point>]) -> Result<Self> {
        if centers.len() != absolute.len() || centers.is_empty() {
            return invalid(format!(
                "{} centers for {} patches",
                centers.len(),
                absolute.len()
            ));
        }
        let group_size = absolute[0].len();
        if group_size == 0 || absolute.iter().any(|p| p.len() != group_size) {
            return invalid("patches must share one non-zero size");
        }
        let patches = absolute
            .iter()
            .zip(&centers)
            .map(|(pts, c)| pts.iter().map(|p| sub(p, c)).collect())
            .collect();
        Ok(Self {
            centers,
            patches,
            group_size,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskStrategy {
    Random,
    Block,
}

impl std::str::FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(Self::Random),
            "block" => Ok(Self::Block),
            other => invalid(format!("unknown mask strategy '{other}'")),
        }
    }
}

/// Masked/visible partition of the patches; `true` marks a masked patch.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub indicator: Vec<bool>,
    pub ratio: f64,
    pub strategy: MaskStrategy,
}

impl MaskSpec {
    pub fn num_groups(&self) -> usize {
        self.indicator.len()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.indicator.len()).filter(|&i| self.indicator[i]).collect()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.indicator.len()).filter(|&i| !self.indicator[i]).collect()
    }

    pub fn num_masked(&self) -> usize {
        self.indicator.iter().filter(|&&b| b).count()
    }

    pub fn num_visible(&self) -> usize {
        self.indicator.len() - self.num_masked()
    }

    /// Patch indices in decoder token order: visible first, then masked.
    pub fn token_order(&self) -> Vec<usize> {
        let mut order = self.visible_indices();
        order.extend(self.masked_indices());
        order
    }
}

/// Number of masked patches for a ratio, rounding half up.
pub fn masked_count(num_groups: usize, ratio: f64) -> usize {
    (ratio * num_groups as f64 + 0.5).floor() as usize
}

/// Greedy farthest point sampling starting from `seed_index`.
///
/// Ties are resolved towards the lowest index.
pub fn fps(cloud: &PointCloud, k: usize, seed_index: usize) -> Result<Vec<usize>> {
    fps_points(cloud.points(), k, seed_index)
}

pub(crate) fn fps_points(points: &[Point], k: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if n == 0 {
        return invalid("fps on an empty cloud");
    }
    if k == 0 || k > n {
        return invalid(format!("fps: k={k} must be in [1, {n}]"));
    }
    if seed_index >= n {
        return invalid(format!("fps: seed index {seed_index} out of range for {n} points"));
    }
    let mut selected = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = seed_index;
    for _ in 0..k {
        selected.push(current);
        taken[current] = true;
        let anchor = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, &anchor);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !taken[i] && min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(selected)
}

/// For each center, the indices of its `group_size` nearest points in
/// ascending distance order (ties by lowest index).
pub fn knn_group(cloud: &PointCloud, centers: &[Point], group_size: usize) -> Result<Vec<Vec<usize>>> {
    let n = cloud.len();
    if group_size == 0 || group_size > n {
        return invalid(format!("knn: group size {group_size} must be in [1, {n}]"));
    }
    let pts = cloud.points();
    let mut order: Vec<usize> = (0..n).collect();
    let mut d = vec![0.0; n];
    Ok(centers
        .iter()
        .map(|c| {
            for (di, p) in d.iter_mut().zip(pts) {
                *di = dist2(p, c);
            }
            let cmp = |a: &usize, b: &usize| d[*a].total_cmp(&d[*b]).then(a.cmp(b));
            order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
            if group_size < n {
                order.select_nth_unstable_by(group_size - 1, cmp);
            }
            let mut group = order[..group_size].to_vec();
            group.sort_by(cmp);
            group
        })
        .collect())
}

/// Splits a cloud into `num_groups` center-relative patches.
pub fn segment(cloud: &PointCloud, num_groups: usize, group_size: usize) -> Result<PatchSet> {
    let center_idx = fps(cloud, num_groups, 0)?;
    let pts = cloud.points();
    let centers: Vec<Point> = center_idx.iter().map(|&i| pts[i]).collect();
    let groups = knn_group(cloud, &centers, group_size)?;
    let patches = groups
        .iter()
        .zip(&centers)
        .map(|(g, c)| g.iter().map(|&i| sub(&pts[i], c)).collect())
        .collect();
    Ok(PatchSet {
        centers,
        patches,
        group_size,
    })
}

/// Draws a mask over `centers.len()` patches.
///
/// `Block` masks the patches whose centers are closest to a randomly chosen
/// seed center (the seed itself included), i.e. one spatially contiguous
/// region.
pub fn apply_mask(
    centers: &[Point],
    ratio: f64,
    strategy: MaskStrategy,
    rng_seed: u64,
) -> Result<MaskSpec> {
    let g = centers.len();
    if !(ratio > 0.0 && ratio < 1.0) {
        return invalid(format!("mask ratio {ratio} must lie in (0, 1)"));
    }
    let m = masked_count(g, ratio);
    if m == 0 || m >= g {
        return invalid(format!(
            "mask ratio {ratio} over {g} patches masks {m}; need between 1 and {}",
            g.saturating_sub(1)
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut indicator = vec![false; g];
    match strategy {
        MaskStrategy::Random => {
            for i in sample_indices(&mut rng, g, m) {
                indicator[i] = true;
            }
        }
        MaskStrategy::Block => {
            let seed = rng.random_range(0..g);
            let mut order: Vec<usize> = (0..g).collect();
            order.sort_by(|&a, &b| {
                dist2(&centers[a], &centers[seed])
                    .total_cmp(&dist2(&centers[b], &centers[seed]))
                    .then(a.cmp(&b))
            });
            for &i in &order[..m] {
                indicator[i] = true;
            }
        }
    }
    Ok(MaskSpec {
        indicator,
        ratio,
        strategy,
    })
}

/// Concatenates the selected patches back into absolute coordinates.
///
/// When `overrides` is given it supplies, in ascending patch order, one
/// replacement point array per selected patch.
pub fn assemble(
    patchset: &PatchSet,
    subset: &[bool],
    overrides: Option<&[Vec<Point>]>,
) -> Result<PointCloud> {
    if subset.len() != patchset.num_groups() {
        return invalid(format!(
            "subset has {} entries for {} patches",
            subset.len(),
            patchset.num_groups()
        ));
    }
    let selected: Vec<usize> = (0..subset.len()).filter(|&i| subset[i]).collect();
    if let Some(ov) = overrides {
        if ov.len() != selected.len() {
            return invalid(format!(
                "{} override patches for {} selected patches",
                ov.len(),
                selected.len()
            ));
        }
        if let Some(bad) = ov.iter().position(|p| p.is_empty()) {
            return invalid(format!("override patch {bad} is empty"));
        }
    }
    let mut out = Vec::new();
    for (k, &i) in selected.iter().enumerate() {
        let src = match overrides {
            Some(ov) => &ov[k],
            None => &patchset.patches[i],
        };
        let c = patchset.centers[i];
        out.extend(src.iter().map(|p| add(p, &c)));
    }
    PointCloud::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> PointCloud {
        PointCloud::new(xs.iter().map(|&x| [x, 0.0, 0.0]).collect()).unwrap()
    }

    fn pseudo_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn rejects_empty_and_non_finite_clouds() {
        assert!(PointCloud::new(vec![]).is_err());
        assert!(PointCloud::new(vec![[0.0, f64::NAN, 0.0]]).is_err());
    }

    #[test]
    fn fps_seed_only() {
        let c = pseudo_cloud(5, 1);
        assert_eq!(fps(&c, 1, 0).unwrap(), vec![0]);
    }

    #[test]
    fn fps_collinear_picks_far_end() {
        let c = line(&[0.0, 1.0, 2.0, 3.0, 10.0]);
        assert_eq!(fps(&c, 2, 0).unwrap(), vec![0, 4]);
    }

    #[test]
    fn fps_full_is_permutation() {
        let c = pseudo_cloud(40, 2);
        let mut idx = fps(&c, 40, 3).unwrap();
        assert_eq!(idx[0], 3);
        idx.sort_unstable();
        assert_eq!(idx, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn fps_errors() {
        let c = pseudo_cloud(4, 3);
        assert!(matches!(fps(&c, 5, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(fps(&c, 2, 4), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn fps_ties_take_lowest_index() {
        // From the origin, points 1 and 2 are equally far.
        let c = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(fps(&c, 2, 0).unwrap(), vec![0, 1]);
    }

    #[test]
    fn knn_zero_distance_wins() {
        let c = pseudo_cloud(10, 4);
        let center = c.points()[6];
        assert_eq!(knn_group(&c, &[center], 1).unwrap(), vec![vec![6]]);
    }

    #[test]
    fn knn_square_tie_break() {
        let sq = PointCloud::new(vec![
            [1.0, 1.0, 0.0],
            [-1.0, 1.0, 0.0],
            [-1.0, -1.0, 0.0],
            [1.0, -1.0, 0.0],
        ])
        .unwrap();
        assert_eq!(knn_group(&sq, &[[0.0; 3]], 2).unwrap(), vec![vec![0, 1]]);
    }

    #[test]
    fn knn_full_is_sorted_by_distance() {
        let c = pseudo_cloud(30, 5);
        let q = [0.1, -0.2, 0.05];
        let g = &knn_group(&c, &[q], 30).unwrap()[0];
        let mut brute: Vec<usize> = (0..30).collect();
        brute.sort_by(|&a, &b| {
            dist2(&c.points()[a], &q)
                .total_cmp(&dist2(&c.points()[b], &q))
                .then(a.cmp(&b))
        });
        assert_eq!(g, &brute);
        assert!(knn_group(&c, &[q], 31).is_err());
    }

    #[test]
    fn segment_defaults_shape() {
        let c = pseudo_cloud(2048, 6);
        let ps = segment(&c, 64, 32).unwrap();
        assert_eq!(ps.centers.len(), 64);
        assert!(ps.patches.iter().all(|p| p.len() == 32));
    }

    #[test]
    fn segment_self_grouping() {
        let c = pseudo_cloud(8, 7);
        let ps = segment(&c, 8, 1).unwrap();
        for p in &ps.patches {
            assert_eq!(p, &vec![[0.0; 3]]);
        }
    }

    #[test]
    fn assembled_points_are_source_points_bitwise() {
        let c = pseudo_cloud(256, 8);
        let ps = segment(&c, 16, 24).unwrap();
        let all = assemble(&ps, &[true; 16], None).unwrap();
        assert_eq!(all.len(), 16 * 24);
        for p in all.points() {
            assert!(c.points().contains(p), "{p:?} not bitwise in source");
        }
    }

    #[test]
    fn random_mask_counts() {
        let c = pseudo_cloud(256, 9);
        let ps = segment(&c, 64, 4).unwrap();
        let m = apply_mask(&ps.centers, 0.75, MaskStrategy::Random, 7).unwrap();
        assert_eq!(m.num_masked(), 48);
        assert_eq!(m.num_visible(), 16);
        let again = apply_mask(&ps.centers, 0.75, MaskStrategy::Random, 7).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn block_mask_is_nearest_pair() {
        let centers = vec![
            [0.0, 0.0, 0.0],
            [0.1, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [1.2, 1.0, 0.0],
        ];
        for seed in 0..10 {
            let m = apply_mask(&centers, 0.5, MaskStrategy::Block, seed).unwrap();
            let masked = m.masked_indices();
            assert_eq!(masked.len(), 2);
            let (a, b) = (masked[0], masked[1]);
            // b must be the nearest other center to a, and vice versa here.
            for j in 0..4 {
                if j != a && j != b {
                    assert!(dist2(&centers[a], &centers[b]) < dist2(&centers[a], &centers[j]));
                    assert!(dist2(&centers[a], &centers[b]) < dist2(&centers[b], &centers[j]));
                }
            }
        }
    }

    #[test]
    fn degenerate_ratios_rejected() {
        let centers = vec![[0.0; 3]; 4];
        assert!(apply_mask(&centers, 0.0, MaskStrategy::Random, 0).is_err());
        assert!(apply_mask(&centers, 0.1, MaskStrategy::Random, 0).is_err());
        assert!(apply_mask(&centers, 0.9, MaskStrategy::Random, 0).is_err());
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(masked_count(64, 0.75), 48);
        assert_eq!(masked_count(64, 0.4), 26);
        assert_eq!(masked_count(4, 0.625), 3);
    }

    #[test]
    fn assemble_override_and_arity() {
        let c = pseudo_cloud(2048, 10);
        let ps = segment(&c, 64, 32).unwrap();
        let m = apply_mask(&ps.centers, 0.75, MaskStrategy::Random, 1).unwrap();
        let masked_sel = m.indicator.clone();
        let gt: Vec<Vec<Point>> = m.masked_indices().iter().map(|&i| ps.patches[i].clone()).collect();
        assert_eq!(
            assemble(&ps, &masked_sel, Some(&gt)).unwrap(),
            assemble(&ps, &masked_sel, None).unwrap()
        );
        let vis_sel: Vec<bool> = masked_sel.iter().map(|b| !b).collect();
        let n = assemble(&ps, &vis_sel, None).unwrap().len() + assemble(&ps, &masked_sel, Some(&gt)).unwrap().len();
        assert_eq!(n, 2048);
        assert!(assemble(&ps, &masked_sel, Some(&gt[1..])).is_err());
        assert!(assemble(&ps, &[true; 3], None).is_err());
    }
}
