//! Point-cloud container, ASCII PLY/PCD I/O and the post-processing filters
//! (statistical outlier removal, voxel-grid downsampling).

mod filter;
mod io;

pub use filter::{remove_outliers, voxel_downsample, VoxelSpec};
pub use io::{read_cloud, read_pcd, read_ply, write_cloud, write_pcd, write_ply, CloudFormat};

use crate::error::{Error, Result};
use crate::Point3;

/// Columnar point set with optional per-point RGB (unit interval) and class label.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Point3>,
    pub colors: Option<Vec<[f64; 3]>>,
    pub labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn from_positions(positions: Vec<Point3>) -> Self {
        Self {
            positions,
            colors: None,
            labels: None,
        }
    }

    pub fn with_colors(mut self, colors: Vec<[f64; 3]>) -> Self {
        self.colors = Some(colors);
        self
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Self {
        self.labels = Some(labels);
        self
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn has_colors(&self) -> bool {
        self.colors.is_some()
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    /// Checks the structural invariants. `n_classes` bounds the labels when given.
    pub fn validate(&self, n_classes: Option<u32>) -> Result<()> {
        let n = self.len();
        if let Some(c) = &self.colors {
            if c.len() != n {
                return Err(Error::invalid(format!(
                    "color count {} does not match point count {n}",
                    c.len()
                )));
            }
            if let Some(i) = c
                .iter()
                .position(|rgb| rgb.iter().any(|v| !(0.0..=1.0).contains(v)))
            {
                return Err(Error::invalid(format!("color of point {i} outside [0, 1]")));
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(Error::invalid(format!(
                    "label count {} does not match point count {n}",
                    l.len()
                )));
            }
            if let Some(nc) = n_classes {
                if let Some(i) = l.iter().position(|&v| v >= nc) {
                    return Err(Error::invalid(format!(
                        "label {} of point {i} exceeds class count {nc}",
                        l[i]
                    )));
                }
            }
        }
        if let Some(i) = self
            .positions
            .iter()
            .position(|p| p.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::invalid(format!("non-finite position at point {i}")));
        }
        Ok(())
    }

    /// Sub-cloud made of the given rows, in the given order (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            colors: self
                .colors
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Axis-aligned bounds `(min, max)`; `None` for an empty cloud.
    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        let first = *self.positions.first()?;
        let mut lo = first;
        let mut hi = first;
        for p in &self.positions[1..] {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        Some((lo, hi))
    }

    /// Number of points carrying each label, indexed by class id.
    pub fn label_histogram(&self, n_classes: usize) -> Vec<usize> {
        let mut h = vec![0; n_classes];
        if let Some(l) = &self.labels {
            for &v in l {
                if (v as usize) < n_classes {
                    h[v as usize] += 1;
                }
            }
        }
        h
    }
}
