//! Geometric kernels of the set-abstraction and feature-propagation layers:
//! centroid sampling, neighbourhood grouping and 3-NN interpolation weights.
//!
//! All kernels are deterministic: ties are broken by lowest index, and random
//! sampling is driven by an explicit seed.

mod kdtree;

pub use kdtree::KdTree;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::{dist2, Point3};

/// Inverse-distance interpolation regularizer.
pub const INTERP_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMethod {
    Fps,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingSpec {
    pub method: SamplingMethod,
    pub n_centroids: usize,
    pub seed: u64,
}

impl SamplingSpec {
    pub fn fps(n_centroids: usize) -> Self {
        Self {
            method: SamplingMethod::Fps,
            n_centroids,
            seed: 0,
        }
    }

    pub fn sample(&self, positions: &[Point3]) -> Result<Vec<usize>> {
        if self.n_centroids == 0 {
            return Err(Error::invalid("n_centroids must be at least 1"));
        }
        match self.method {
            SamplingMethod::Fps => farthest_point_sample(positions, self.n_centroids, self.seed),
            SamplingMethod::Random => random_sample(positions, self.n_centroids, self.seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupingMethod {
    Knn,
    Ball,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupingSpec {
    pub method: GroupingMethod,
    pub k: usize,
    pub radius: f64,
}

impl GroupingSpec {
    pub fn ball(radius: f64, k: usize) -> Self {
        Self {
            method: GroupingMethod::Ball,
            k,
            radius,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("group size k must be at least 1"));
        }
        if self.method == GroupingMethod::Ball && !(self.radius > 0.0) {
            return Err(Error::invalid("ball radius must be positive"));
        }
        Ok(())
    }

    pub fn group(&self, positions: &[Point3], centroids: &[Point3]) -> Result<GroupIndex> {
        self.validate()?;
        match self.method {
            GroupingMethod::Ball => ball_query(positions, centroids, self.radius, self.k),
            GroupingMethod::Knn => knn_query(positions, centroids, self.k),
        }
    }
}

/// Row-major `(centroids × k)` matrix of point indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupIndex {
    pub k: usize,
    pub indices: Vec<usize>,
}

impl GroupIndex {
    pub fn rows(&self) -> usize {
        self.indices.len() / self.k.max(1)
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }
}

fn non_empty(positions: &[Point3]) -> Result<()> {
    if positions.is_empty() {
        Err(Error::invalid("point set is empty"))
    } else {
        Ok(())
    }
}

/// Greedy farthest point sampling.
///
/// Starts at `seed mod M`; each step takes the unchosen point with the largest
/// squared distance to the chosen set (lowest index on ties). When `n > M` the
/// selection repeats cyclically.
pub fn farthest_point_sample(positions: &[Point3], n: usize, seed: u64) -> Result<Vec<usize>> {
    non_empty(positions)?;
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let m = positions.len();
    let take = n.min(m);
    let mut min_d = vec![f64::INFINITY; m];
    let mut chosen = vec![false; m];
    let mut out = Vec::with_capacity(n);
    let mut cur = (seed % m as u64) as usize;
    for step in 0..take {
        out.push(cur);
        chosen[cur] = true;
        if step + 1 == take {
            break;
        }
        let c = positions[cur];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in positions.iter().enumerate() {
            if chosen[i] {
                continue;
            }
            let d = dist2(&c, p);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        cur = best;
    }
    for i in take..n {
        out.push(out[i % take]);
    }
    Ok(out)
}

/// Uniform sampling without replacement; when `n > M` every index is taken once
/// and the remainder is drawn with replacement.
pub fn random_sample(positions: &[Point3], n: usize, seed: u64) -> Result<Vec<usize>> {
    non_empty(positions)?;
    let m = positions.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if n <= m {
        return Ok(index::sample(&mut rng, m, n).into_vec());
    }
    let mut out = index::sample(&mut rng, m, m).into_vec();
    out.extend((m..n).map(|_| rng.random_range(0..m)));
    Ok(out)
}

/// Brute force is faster than building a tree below this many points.
const TREE_THRESHOLD: usize = 64;

/// Ball grouping: the first `k` points (ascending index) within `radius` of each
/// centroid, padded by repeating the first hit. An empty ball is filled with the
/// nearest point.
pub fn ball_query(
    positions: &[Point3],
    centroids: &[Point3],
    radius: f64,
    k: usize,
) -> Result<GroupIndex> {
    non_empty(positions)?;
    if k == 0 {
        return Err(Error::invalid("group size k must be at least 1"));
    }
    let r2 = radius * radius;
    let mut indices = Vec::with_capacity(centroids.len() * k);
    let tree = (positions.len() > TREE_THRESHOLD).then(|| KdTree::new(positions));
    for c in centroids {
        let start = indices.len();
        match &tree {
            Some(t) => indices.extend(t.within(c, r2).into_iter().take(k)),
            None => indices.extend(
                positions
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| dist2(c, p) <= r2)
                    .map(|(i, _)| i)
                    .take(k),
            ),
        }
        let fill = if indices.len() > start {
            indices[start]
        } else {
            match &tree {
                Some(t) => t.nearest(c, 1)[0].1,
                None => nearest_brute(positions, c),
            }
        };
        indices.resize(start + k, fill);
    }
    Ok(GroupIndex { k, indices })
}

fn nearest_brute(positions: &[Point3], q: &Point3) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in positions.iter().enumerate() {
        let d = dist2(q, p);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// The `k` nearest points of each centroid, by ascending distance then index.
pub fn knn_query(positions: &[Point3], centroids: &[Point3], k: usize) -> Result<GroupIndex> {
    non_empty(positions)?;
    if k == 0 || k > positions.len() {
        return Err(Error::invalid(format!(
            "k = {k} must lie in 1..={}",
            positions.len()
        )));
    }
    let tree = KdTree::new(positions);
    let mut indices = Vec::with_capacity(centroids.len() * k);
    for c in centroids {
        indices.extend(tree.nearest(c, k).into_iter().map(|(_, i)| i));
    }
    Ok(GroupIndex { k, indices })
}

/// Interpolation stencil of one query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub indices: [usize; 3],
    pub weights: [f64; 3],
}

/// Inverse squared-distance weights over the three nearest sources.
///
/// With fewer than three sources the missing slots repeat the nearest index
/// with zero weight, so a single source always receives weight 1.
pub fn three_nn_interpolate_weights(queries: &[Point3], sources: &[Point3]) -> Result<Vec<Stencil>> {
    if sources.is_empty() {
        return Err(Error::invalid("no interpolation sources"));
    }
    let tree = (sources.len() > TREE_THRESHOLD).then(|| KdTree::new(sources));
    let kk = sources.len().min(3);
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let near: Vec<(f64, usize)> = match &tree {
            Some(t) => t.nearest(q, kk),
            None => {
                let mut all: Vec<(f64, usize)> =
                    sources.iter().enumerate().map(|(i, s)| (dist2(q, s), i)).collect();
                all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                all.truncate(kk);
                all
            }
        };
        let mut st = Stencil {
            indices: [near[0].1; 3],
            weights: [0.0; 3],
        };
        let mut total = 0.0;
        for (j, &(d2, i)) in near.iter().enumerate() {
            st.indices[j] = i;
            st.weights[j] = 1.0 / (d2 + INTERP_EPS);
            total += st.weights[j];
        }
        for w in &mut st.weights[..kk] {
            *w /= total;
        }
        out.push(st);
    }
    Ok(out)
}
