use std::collections::HashMap;

use super::PointCloud;
use crate::error::{Error, Result};
use crate::kernels::KdTree;

/// Uniform voxel grid with cubic cells of `cell_size` meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelSpec {
    pub cell_size: f64,
}

impl VoxelSpec {
    pub fn new(cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::invalid(format!("voxel size {cell_size} must be positive")));
        }
        Ok(Self { cell_size })
    }

    pub fn cell_of(&self, p: &crate::Point3) -> [i64; 3] {
        p.map(|v| (v / self.cell_size).floor() as i64)
    }
}

impl Default for VoxelSpec {
    fn default() -> Self {
        Self { cell_size: 0.01 }
    }
}

/// Replaces the points of each occupied voxel by their centroid.
///
/// Colors are averaged and the label is the majority vote (lowest class id on
/// ties). Output voxels appear in order of their first point in the input.
pub fn voxel_downsample(cloud: &PointCloud, spec: VoxelSpec) -> Result<PointCloud> {
    VoxelSpec::new(spec.cell_size)?;
    if cloud.is_empty() {
        return Err(Error::invalid("cannot voxelize an empty cloud"));
    }
    let mut slot: HashMap<[i64; 3], usize> = HashMap::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        let next = members.len();
        let s = *slot.entry(spec.cell_of(p)).or_insert(next);
        if s == next {
            members.push(Vec::new());
        }
        members[s].push(i);
    }

    let mean = |rows: &[usize], v: &[[f64; 3]]| -> [f64; 3] {
        let mut acc = [0.0; 3];
        for &i in rows {
            for a in 0..3 {
                acc[a] += v[i][a];
            }
        }
        acc.map(|s| s / rows.len() as f64)
    };
    let positions = members.iter().map(|m| mean(m, &cloud.positions)).collect();
    let colors = cloud
        .colors
        .as_ref()
        .map(|c| members.iter().map(|m| mean(m, c)).collect());
    let labels = cloud.labels.as_ref().map(|l| {
        members
            .iter()
            .map(|m| {
                let mut votes: Vec<u32> = m.iter().map(|&i| l[i]).collect();
                votes.sort_unstable();
                let mut best = (0usize, votes[0]);
                let mut run = 0;
                for (j, &v) in votes.iter().enumerate() {
                    run = if j > 0 && votes[j - 1] == v { run + 1 } else { 1 };
                    if run > best.0 {
                        best = (run, v);
                    }
                }
                best.1
            })
            .collect()
    });
    Ok(PointCloud {
        positions,
        colors,
        labels,
    })
}

/// Statistical outlier removal: drops points whose mean distance to their `k`
/// nearest neighbours exceeds `mean + std_ratio * std` over the whole cloud.
pub fn remove_outliers(cloud: &PointCloud, k: usize, std_ratio: f64) -> Result<PointCloud> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k >= cloud.len() {
        return Err(Error::invalid(format!(
            "k = {k} must be smaller than the point count {}",
            cloud.len()
        )));
    }
    if !(std_ratio > 0.0) {
        return Err(Error::invalid("std_ratio must be positive"));
    }
    let tree = KdTree::new(&cloud.positions);
    let mean_dist: Vec<f64> = cloud
        .positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let nn = tree.nearest(p, k + 1);
            let mut sum = 0.0;
            let mut used = 0;
            for (d2, j) in nn {
                if j != i && used < k {
                    sum += d2.sqrt();
                    used += 1;
                }
            }
            sum / k as f64
        })
        .collect();
    let n = mean_dist.len() as f64;
    let mu = mean_dist.iter().sum::<f64>() / n;
    let var = mean_dist.iter().map(|d| (d - mu) * (d - mu)).sum::<f64>() / n;
    let limit = mu + std_ratio * var.sqrt();
    let keep: Vec<usize> = (0..cloud.len()).filter(|&i| mean_dist[i] <= limit).collect();
    Ok(cloud.select(&keep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{dist2, Point3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    #[test]
    fn distinct_cells_are_kept() {
        let c = PointCloud::from_positions(vec![[0.001, 0.001, 0.001], [0.021, 0.001, 0.001]]);
        assert_eq!(voxel_downsample(&c, VoxelSpec::default()).unwrap().len(), 2);
    }

    #[test]
    fn same_cell_collapses_to_midpoint() {
        let c = PointCloud::from_positions(vec![[0.002, 0.005, 0.005], [0.003, 0.005, 0.005]])
            .with_labels(vec![1, 0]);
        let v = voxel_downsample(&c, VoxelSpec::default()).unwrap();
        assert_eq!(v.len(), 1);
        assert!((v.positions[0][0] - 0.0025).abs() < 1e-15);
        // tie between classes 0 and 1 -> lowest id
        assert_eq!(v.labels.unwrap()[0], 0);
    }

    #[test]
    fn rejects_bad_cell_and_empty_cloud() {
        let c = PointCloud::from_positions(vec![[0.0; 3]]);
        assert!(voxel_downsample(&c, VoxelSpec { cell_size: 0.0 }).is_err());
        assert!(voxel_downsample(&PointCloud::default(), VoxelSpec::default()).is_err());
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions: Vec<Point3> = (0..n)
            .map(|_| [0; 3].map(|_: u8| rng.random_range(-0.1..0.1)))
            .collect();
        let colors = (0..n).map(|_| [0; 3].map(|_: u8| rng.random::<f64>())).collect();
        let labels = (0..n).map(|_| rng.random_range(0..3)).collect();
        PointCloud::from_positions(positions).with_colors(colors).with_labels(labels)
    }

    #[test]
    fn matches_bucketing_oracle() {
        let c = random_cloud(10_000, 1);
        let spec = VoxelSpec::new(0.01).unwrap();
        let v = voxel_downsample(&c, spec).unwrap();
        // independent oracle: ordered map of cell -> members
        let mut buckets: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
        for (i, p) in c.positions.iter().enumerate() {
            let key = [0, 1, 2].map(|a| (p[a] / 0.01).floor() as i64);
            buckets.entry(key).or_default().push(i);
        }
        assert_eq!(v.len(), buckets.len());
        let mut seen = std::collections::HashSet::new();
        for (j, p) in v.positions.iter().enumerate() {
            let key = spec.cell_of(p);
            assert!(seen.insert(key), "duplicate output voxel");
            let m = &buckets[&key];
            let mut cen = [0.0; 3];
            for &i in m {
                for a in 0..3 {
                    cen[a] += c.positions[i][a];
                }
            }
            assert_eq!(*p, cen.map(|s| s / m.len() as f64));
            let mut votes = [0usize; 3];
            for &i in m {
                votes[c.labels.as_ref().unwrap()[i] as usize] += 1;
            }
            let maj = (0..3).rev().max_by_key(|&k| votes[k]).unwrap();
            assert_eq!(v.labels.as_ref().unwrap()[j], maj as u32);
        }
    }

    #[test]
    fn idempotent() {
        let c = random_cloud(5000, 2);
        let spec = VoxelSpec::new(0.02).unwrap();
        let once = voxel_downsample(&c, spec).unwrap();
        let twice = voxel_downsample(&once, spec).unwrap();
        assert_eq!(once.len(), twice.len());
        for (a, b) in once.positions.iter().zip(&twice.positions) {
            assert!(dist2(a, b).sqrt() < 1e-9);
        }
    }

    #[test]
    fn far_point_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pts: Vec<Point3> = (0..100)
            .map(|_| [0; 3].map(|_: u8| rng.random_range(0.0..0.1)))
            .collect();
        pts.push([10.0, 0.0, 0.0]);
        let c = PointCloud::from_positions(pts.clone());
        let kept = remove_outliers(&c, 8, 2.0).unwrap();
        assert_eq!(kept.len(), 100);
        assert_eq!(kept.positions, pts[..100].to_vec());

        // brute-force statistic for the far point
        let mean_knn = |i: usize| {
            let mut d: Vec<f64> = (0..pts.len()).filter(|&j| j != i).map(|j| dist2(&pts[i], &pts[j]).sqrt()).collect();
            d.sort_by(f64::total_cmp);
            d[..8].iter().sum::<f64>() / 8.0
        };
        let all: Vec<f64> = (0..pts.len()).map(mean_knn).collect();
        let mu = all.iter().sum::<f64>() / all.len() as f64;
        let sd = (all.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
        assert!(all[100] > mu + 2.0 * sd);
        assert!(all[..100].iter().all(|&d| d <= mu + 2.0 * sd));
    }

    #[test]
    fn uniform_grid_is_untouched() {
        let mut pts = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                for k in 0..6 {
                    pts.push([i as f64, j as f64, k as f64]);
                }
            }
        }
        let c = PointCloud::from_positions(pts);
        assert_eq!(remove_outliers(&c, 8, 10.0).unwrap(), c);
        assert!(remove_outliers(&c, 216, 1.0).is_err());
    }

    #[test]
    fn survivors_are_a_subsequence() {
        let c = random_cloud(400, 4);
        let kept = remove_outliers(&c, 16, 0.5).unwrap();
        let mut it = c.positions.iter();
        for p in &kept.positions {
            assert!(it.any(|q| q == p));
        }
    }
}
