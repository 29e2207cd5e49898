//! Evaluation metrics: Chamfer-L2, Hausdorff, MMD-CD, 1-NN-CD and the
//! voxel-occupancy Jensen–Shannon divergence.

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::geometry::{Point, PointCloud};
use crate::kdtree::KdTree;

/// Mean of squared nearest distances from every point of `from` into `tree`.
fn directed_mean_sq(from: &[Point], tree: &KdTree<'_>) -> f64 {
    let mut s = 0.0;
    for p in from {
        s += tree.nearest(p).expect("non-empty").1;
    }
    s / from.len() as f64
}

fn directed_max(from: &[Point], tree: &KdTree<'_>) -> f64 {
    from.iter()
        .map(|p| tree.nearest(p).expect("non-empty").1)
        .fold(0.0, f64::max)
        .sqrt()
}

fn non_empty(a: &[Point], b: &[Point], op: &str) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return invalid(format!("{op} needs two non-empty point sets"));
    }
    Ok(())
}

/// Chamfer-L2 on raw point slices.
pub fn chamfer_points(a: &[Point], b: &[Point]) -> Result<f64> {
    non_empty(a, b, "chamfer_l2")?;
    let (ta, tb) = (KdTree::new(a), KdTree::new(b));
    Ok(directed_mean_sq(a, &tb) + directed_mean_sq(b, &ta))
}

/// Symmetric Chamfer distance with squared Euclidean terms:
/// `mean_a min_b |a-b|² + mean_b min_a |a-b|²`.
pub fn chamfer_l2(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    chamfer_points(a.points(), b.points())
}

pub fn hausdorff_points(a: &[Point], b: &[Point]) -> Result<f64> {
    non_empty(a, b, "hausdorff")?;
    let (ta, tb) = (KdTree::new(a), KdTree::new(b));
    Ok(directed_max(a, &tb).max(directed_max(b, &ta)))
}

/// Symmetric Hausdorff distance (unsquared).
pub fn hausdorff(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    hausdorff_points(a.points(), b.points())
}

fn check_sets(gen: &[PointCloud], refs: &[PointCloud], op: &str) -> Result<()> {
    if gen.is_empty() || refs.is_empty() {
        return invalid(format!("{op} needs non-empty generated and reference sets"));
    }
    Ok(())
}

/// Chamfer distance for every (gen, ref) pair, row-major by generated cloud.
fn cd_matrix(gen: &[PointCloud], refs: &[PointCloud]) -> Result<Vec<Vec<f64>>> {
    gen.par_iter()
        .map(|g| refs.iter().map(|r| chamfer_l2(g, r)).collect())
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Minimum matching distance: for each reference, the Chamfer distance to
/// its best generated match, averaged over references.
pub fn mmd_cd(gen: &[PointCloud], refs: &[PointCloud]) -> Result<f64> {
    check_sets(gen, refs, "mmd_cd")?;
    let m = cd_matrix(gen, refs)?;
    Ok(mmd_from_matrix(&m, refs.len()))
}

fn mmd_from_matrix(m: &[Vec<f64>], n_ref: usize) -> f64 {
    mean((0..n_ref).map(|r| m.iter().map(|row| row[r]).fold(f64::INFINITY, f64::min)))
}

/// For each generated cloud, the Chamfer distance to its nearest reference,
/// averaged over generated clouds.
pub fn one_nn_cd(gen: &[PointCloud], refs: &[PointCloud]) -> Result<f64> {
    check_sets(gen, refs, "one_nn_cd")?;
    let m = cd_matrix(gen, refs)?;
    Ok(one_nn_from_matrix(&m))
}

fn one_nn_from_matrix(m: &[Vec<f64>]) -> f64 {
    mean(m.iter().map(|row| row.iter().copied().fold(f64::INFINITY, f64::min)))
}

/// Occupancy histogram over `[-0.5, 0.5]³` pooled across a set of clouds,
/// normalized to a probability vector.
pub fn occupancy(set: &[PointCloud], resolution: usize) -> Result<Vec<f64>> {
    if resolution == 0 {
        return invalid("grid resolution must be positive");
    }
    let r = resolution;
    let mut counts = vec![0u64; r * r * r];
    let mut total = 0u64;
    for (ci, cloud) in set.iter().enumerate() {
        for (pi, p) in cloud.points().iter().enumerate() {
            let mut idx = [0usize; 3];
            for k in 0..3 {
                let v = p[k];
                if !(-0.5..=0.5).contains(&v) {
                    return invalid(format!(
                        "point {pi} of cloud {ci} ({:?}) lies outside [-0.5, 0.5]^3",
                        p
                    ));
                }
                idx[k] = (((v + 0.5) * r as f64).floor() as usize).min(r - 1);
            }
            counts[(idx[0] * r + idx[1]) * r + idx[2]] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return invalid("occupancy of an empty set");
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Jensen–Shannon divergence (natural log) of two probability vectors.
pub fn jsd_of(p: &[f64], q: &[f64]) -> f64 {
    let mut kl_p = 0.0;
    let mut kl_q = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            kl_p += a * (a / m).ln();
        }
        if b > 0.0 {
            kl_q += b * (b / m).ln();
        }
    }
    (0.5 * kl_p + 0.5 * kl_q).clamp(0.0, std::f64::consts::LN_2)
}

/// JSD between the pooled voxel occupancies of two sets of normalized clouds.
pub fn jsd(gen: &[PointCloud], refs: &[PointCloud], grid_resolution: usize) -> Result<f64> {
    check_sets(gen, refs, "jsd")?;
    let p = occupancy(gen, grid_resolution)?;
    let q = occupancy(refs, grid_resolution)?;
    Ok(jsd_of(&p, &q))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub grid_resolution: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { grid_resolution: 32 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemScore {
    pub id: String,
    pub cd: f64,
    pub hd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mmd_cd: f64,
    pub one_nn_cd: f64,
    pub jsd: f64,
    pub hd: f64,
    pub per_item: Vec<ItemScore>,
}

/// All four metrics. When the sets have equal length they are treated as
/// paired: `per_item` holds the CD/HD of each pair and `hd` is their mean.
/// Unpaired sets report `hd` as the mean over references of the HD to the
/// Chamfer-nearest generated cloud.
pub fn evaluate(
    gen: &[PointCloud],
    refs: &[PointCloud],
    ids: Option<&[String]>,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    check_sets(gen, refs, "evaluate")?;
    let m = cd_matrix(gen, refs)?;
    let mmd = mmd_from_matrix(&m, refs.len());
    let one_nn = one_nn_from_matrix(&m);
    let js = jsd(gen, refs, cfg.grid_resolution)?;
    let (hd, per_item) = if gen.len() == refs.len() {
        let items: Vec<ItemScore> = gen
            .par_iter()
            .zip(refs.par_iter())
            .enumerate()
            .map(|(i, (g, r))| {
                Ok(ItemScore {
                    id: ids.and_then(|v| v.get(i).cloned()).unwrap_or_else(|| i.to_string()),
                    cd: m[i][i],
                    hd: hausdorff(g, r)?,
                })
            })
            .collect::<Result<_>>()?;
        (mean(items.iter().map(|s| s.hd)), items)
    } else {
        let hds: Vec<f64> = (0..refs.len())
            .into_par_iter()
            .map(|r| {
                let best = (0..gen.len())
                    .min_by(|&a, &b| m[a][r].total_cmp(&m[b][r]))
                    .expect("non-empty");
                hausdorff(&gen[best], &refs[r])
            })
            .collect::<Result<_>>()?;
        (mean(hds.into_iter()), Vec::new())
    };
    Ok(MetricReport {
        mmd_cd: mmd,
        one_nn_cd: one_nn,
        jsd: js,
        hd,
        per_item,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pc(p: &[Point]) -> PointCloud {
        PointCloud::new(p.to_vec()).unwrap()
    }

    #[test]
    fn chamfer_basics() {
        let a = pc(&[[0.0; 3]]);
        let b = pc(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer_l2(&a, &a).unwrap(), 0.0);
        assert_eq!(chamfer_l2(&a, &b).unwrap(), 2.0);
        assert!(chamfer_points(&[], &[[0.0; 3]]).is_err());
    }

    #[test]
    fn hausdorff_segment_midpoint() {
        let a = pc(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        let b = pc(&[[0.5, 0.0, 0.0]]);
        assert_eq!(hausdorff(&a, &b).unwrap(), 0.5);
        assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn set_metrics_degenerate_cases() {
        let r = pc(&[[0.0; 3]]);
        let g = pc(&[[1.0, 0.0, 0.0]]);
        assert_eq!(mmd_cd(&[g.clone()], &[r.clone()]).unwrap(), 2.0);
        assert_eq!(one_nn_cd(&[g.clone()], &[r.clone()]).unwrap(), 2.0);
        assert_eq!(mmd_cd(&[r.clone()], &[r.clone()]).unwrap(), 0.0);
        assert!(mmd_cd(&[], &[r]).is_err());
    }

    #[test]
    fn jsd_bounds_and_errors() {
        let a = pc(&[[-0.4, -0.4, -0.4]]);
        let b = pc(&[[0.4, 0.4, 0.4]]);
        assert_eq!(jsd(&[a.clone()], &[a.clone()], 8).unwrap(), 0.0);
        assert!((jsd(&[a.clone()], &[b], 8).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let out = pc(&[[0.6, 0.0, 0.0]]);
        let err = jsd(&[out], &[a.clone()], 8).unwrap_err().to_string();
        assert!(err.contains("point 0 of cloud 0"), "{err}");
        // Upper boundary lands in the last voxel.
        let edge = pc(&[[0.5, 0.5, 0.5]]);
        let occ = occupancy(&[edge], 4).unwrap();
        assert_eq!(occ[63], 1.0);
    }

    #[test]
    fn evaluate_identity_is_zero() {
        let a = pc(&[[0.1, 0.2, 0.3], [-0.2, 0.0, 0.1]]);
        let b = pc(&[[0.3, -0.2, 0.0]]);
        let set = vec![a, b];
        let r = evaluate(&set, &set, None, &EvalConfig::default()).unwrap();
        assert_eq!((r.mmd_cd, r.one_nn_cd, r.jsd, r.hd), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(r.per_item.len(), 2);
    }
}
