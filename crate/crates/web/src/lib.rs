//! Browser bindings: generate a synthetic orchard scene, split it into octree
//! blocks, and inspect farthest-point sampling with ball-query groups.

use orchard_seg::kernels::{ball_query, farthest_point_sample};
use orchard_seg::octree::{build_partition, PartitionSpec};
use orchard_seg::synth::{generate_scene, ColorMode, SceneRecipe};
use orchard_seg::PointCloud;
use wasm_bindgen::prelude::*;

fn js_err(e: orchard_seg::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Scene {
    cloud: PointCloud,
}

#[wasm_bindgen]
impl Scene {
    /// `mode` is `separable`, `geometry-only` or `ambiguous`; `density` in points per m².
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, mode: &str, fruit_count: usize, density: f64) -> Result<Scene, JsError> {
        let color_mode: ColorMode = mode.parse().map_err(js_err)?;
        let recipe = SceneRecipe {
            seed,
            color_mode,
            fruit_count,
            point_density: density,
            ..SceneRecipe::default()
        };
        Ok(Scene {
            cloud: generate_scene(&recipe).map_err(js_err)?,
        })
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    /// Interleaved x, y, z.
    pub fn positions(&self) -> Vec<f32> {
        self.cloud.positions.iter().flatten().map(|&v| v as f32).collect()
    }

    /// Interleaved r, g, b in [0, 1].
    pub fn colors(&self) -> Vec<f32> {
        match &self.cloud.colors {
            Some(c) => c.iter().flatten().map(|&v| v as f32).collect(),
            None => vec![0.5; 3 * self.cloud.len()],
        }
    }

    pub fn labels(&self) -> Vec<u32> {
        self.cloud.labels.clone().unwrap_or_else(|| vec![0; self.cloud.len()])
    }

    /// Octree leaf id of every point for the given leaf capacity.
    pub fn partition(&self, capacity: usize) -> Result<Vec<u32>, JsError> {
        let leaves = build_partition(&self.cloud, PartitionSpec::new(capacity)).map_err(js_err)?;
        let mut owner = vec![0u32; self.cloud.len()];
        for (b, leaf) in leaves.iter().enumerate() {
            for &i in &leaf.indices {
                owner[i] = b as u32;
            }
        }
        Ok(owner)
    }

    /// Group id per point (`u32::MAX` when ungrouped) after sampling `n`
    /// centroids and collecting up to `k` neighbours within `radius`.
    /// The last `n` entries are the centroid indices.
    pub fn sample_groups(&self, n: usize, radius: f64, k: usize) -> Result<Vec<u32>, JsError> {
        let pos = &self.cloud.positions;
        let centroids = farthest_point_sample(pos, n, 0).map_err(js_err)?;
        let cpos: Vec<_> = centroids.iter().map(|&i| pos[i]).collect();
        let groups = ball_query(pos, &cpos, radius, k).map_err(js_err)?;
        let mut out = vec![u32::MAX; pos.len()];
        for g in 0..groups.rows() {
            for &i in groups.row(g) {
                out[i] = g as u32;
            }
        }
        out.extend(centroids.iter().map(|&i| i as u32));
        Ok(out)
    }
}
