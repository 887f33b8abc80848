//! Octree partitioning of a scene into bounded blocks, and reassembly of the
//! per-block network outputs into one scene labeling.

use log::warn;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::Point3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn center(&self) -> Point3 {
        [0, 1, 2].map(|a| 0.5 * (self.min[a] + self.max[a]))
    }

    /// Child box for an octant code (bit 0: x, bit 1: y, bit 2: z; set = upper half).
    pub fn octant(&self, code: usize) -> Aabb {
        let mid = self.center();
        let mut out = *self;
        for a in 0..3 {
            if code >> a & 1 == 1 {
                out.min[a] = mid[a];
            } else {
                out.max[a] = mid[a];
            }
        }
        out
    }

    pub fn contains(&self, other: &Aabb) -> bool {
        (0..3).all(|a| self.min[a] <= other.min[a] && other.max[a] <= self.max[a])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OctreeBlock {
    pub aabb: Aabb,
    pub indices: Vec<usize>,
    pub depth: usize,
    /// Set when the leaf hit `max_depth` while still above capacity.
    pub oversized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionSpec {
    pub capacity: usize,
    pub max_depth: usize,
}

impl PartitionSpec {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            max_depth: 12,
        }
    }
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self::new(4096)
    }
}

/// Root cube: the tight bounds padded by 1 µm, extended to the longest side.
pub fn root_box(cloud: &PointCloud) -> Option<Aabb> {
    let (lo, hi) = cloud.bounds()?;
    let min = lo.map(|v| v - 1e-6);
    let max = hi.map(|v| v + 1e-6);
    let side = (0..3).map(|a| max[a] - min[a]).fold(0.0, f64::max);
    Some(Aabb {
        min,
        max: min.map(|v| v + side),
    })
}

/// Splits the scene until every leaf holds at most `capacity` points.
///
/// Leaves come out depth-first in octant-code order. Points on a splitting plane
/// belong to the upper octant.
pub fn build_partition(cloud: &PointCloud, spec: PartitionSpec) -> Result<Vec<OctreeBlock>> {
    if spec.capacity == 0 {
        return Err(Error::invalid("partition capacity must be at least 1"));
    }
    let root = root_box(cloud).ok_or_else(|| Error::invalid("cannot partition an empty cloud"))?;
    let mut leaves = Vec::new();
    split(
        &cloud.positions,
        root,
        (0..cloud.len()).collect(),
        0,
        spec,
        &mut leaves,
    );
    Ok(leaves)
}

fn split(
    pts: &[Point3],
    aabb: Aabb,
    indices: Vec<usize>,
    depth: usize,
    spec: PartitionSpec,
    out: &mut Vec<OctreeBlock>,
) {
    if indices.len() <= spec.capacity || depth >= spec.max_depth {
        let oversized = indices.len() > spec.capacity;
        if oversized {
            warn!(
                "octree leaf at depth {depth} keeps {} points (> capacity {})",
                indices.len(),
                spec.capacity
            );
        }
        out.push(OctreeBlock {
            aabb,
            indices,
            depth,
            oversized,
        });
        return;
    }
    let mid = aabb.center();
    let mut children: [Vec<usize>; 8] = Default::default();
    for i in indices {
        let p = pts[i];
        let code = (0..3).fold(0, |c, a| c | ((p[a] >= mid[a]) as usize) << a);
        children[code].push(i);
    }
    for (code, child) in children.into_iter().enumerate() {
        if !child.is_empty() {
            split(pts, aabb.octant(code), child, depth + 1, spec, out);
        }
    }
}

/// Network output for one fed block: row `r` of `logits` belongs to scene point `origin[r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLogits {
    pub origin: Vec<usize>,
    pub logits: Vec<f64>,
    pub n_classes: usize,
}

/// Scatters per-block logits back to the scene, averaging duplicated rows, and
/// takes the argmax (lowest class on ties). `blocks` must partition `0..scene_size`.
pub fn assemble_predictions(
    scene_size: usize,
    blocks: &[OctreeBlock],
    block_logits: &[BlockLogits],
) -> Result<Vec<u32>> {
    let mut owner = vec![0u32; scene_size];
    let mut duplicated = Vec::new();
    for b in blocks {
        for &i in &b.indices {
            if i >= scene_size {
                return Err(Error::invalid(format!("block index {i} out of range")));
            }
            owner[i] += 1;
            if owner[i] == 2 {
                duplicated.push(i);
            }
        }
    }
    let missing: Vec<usize> = (0..scene_size).filter(|&i| owner[i] == 0).collect();
    if !missing.is_empty() || !duplicated.is_empty() {
        duplicated.sort_unstable();
        return Err(Error::Assembly {
            missing,
            duplicated,
        });
    }

    let n_classes = block_logits.first().map(|b| b.n_classes).unwrap_or(1);
    let mut sums = vec![0.0; scene_size * n_classes];
    let mut hits = vec![0u32; scene_size];
    for bl in block_logits {
        if bl.n_classes != n_classes || bl.logits.len() != bl.origin.len() * n_classes {
            return Err(Error::ShapeMismatch {
                op: "assemble_predictions",
                lhs: vec![bl.origin.len(), n_classes],
                rhs: vec![bl.logits.len()],
            });
        }
        for (r, &i) in bl.origin.iter().enumerate() {
            if i >= scene_size {
                return Err(Error::invalid(format!("logit row maps to index {i} out of range")));
            }
            hits[i] += 1;
            for c in 0..n_classes {
                sums[i * n_classes + c] += bl.logits[r * n_classes + c];
            }
        }
    }
    let missing: Vec<usize> = (0..scene_size).filter(|&i| hits[i] == 0).collect();
    if !missing.is_empty() {
        return Err(Error::Assembly {
            missing,
            duplicated: Vec::new(),
        });
    }
    Ok((0..scene_size)
        .map(|i| {
            let row = &sums[i * n_classes..(i + 1) * n_classes];
            let inv = 1.0 / hits[i] as f64;
            let mut best = 0;
            for c in 1..n_classes {
                if row[c] * inv > row[best] * inv {
                    best = c;
                }
            }
            best as u32
        })
        .collect())
}
