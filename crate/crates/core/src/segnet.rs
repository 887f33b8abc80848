//! Point-set segmentation network: set-abstraction encoder, feature-propagation
//! decoder, and an optional color branch fused right before the per-point head.
//!
//! Every forward call runs on a batch of equally sized blocks stacked along the
//! row axis; index-producing kernels (sampling, grouping, interpolation stencils)
//! run per block and are offset into the stacked rows.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{batch_norm, Bindings, Graph, Mode, ParameterStore, RunningStats, Tensor, Var, BN_MOMENTUM};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::kernels::{three_nn_interpolate_weights, GroupingSpec, SamplingSpec};
use crate::octree::{assemble_predictions, build_partition, BlockLogits, PartitionSpec};
use crate::{PointCloud, Point3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    None,
    Early,
    Late,
    /// Raw RGB at the input plus the late color branch. Experimental.
    EarlyLate,
}

impl Fusion {
    pub fn rgb_input(self) -> bool {
        matches!(self, Fusion::Early | Fusion::EarlyLate)
    }

    pub fn color_branch(self) -> bool {
        matches!(self, Fusion::Late | Fusion::EarlyLate)
    }

    pub fn needs_colors(self) -> bool {
        self != Fusion::None
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Fusion::None),
            "early" => Ok(Fusion::Early),
            "late" => Ok(Fusion::Late),
            "early+late" => Ok(Fusion::EarlyLate),
            _ => Err(Error::invalid(format!("unknown fusion mode `{s}`"))),
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::None => "none",
            Fusion::Early => "early",
            Fusion::Late => "late",
            Fusion::EarlyLate => "early+late",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SABlockSpec {
    pub sampling: SamplingSpec,
    pub grouping: GroupingSpec,
    pub mlp_channels: Vec<usize>,
}

impl SABlockSpec {
    pub fn new(n_centroids: usize, radius: f64, k: usize, mlp_channels: Vec<usize>) -> Self {
        Self {
            sampling: SamplingSpec::fps(n_centroids),
            grouping: GroupingSpec::ball(radius, k),
            mlp_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.mlp_channels.last().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FPBlockSpec {
    pub mlp_channels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorBranchSpec {
    pub grouping: GroupingSpec,
    pub mlp_channels: Vec<usize>,
}

impl Default for ColorBranchSpec {
    fn default() -> Self {
        Self {
            grouping: GroupingSpec::ball(0.02, 24),
            mlp_channels: vec![32],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// 4096-point blocks.
    Small,
    /// 8192-point blocks.
    Large,
    /// 1024-point blocks with halved widths, for quick experiments.
    Reduced,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Preset::Small),
            "large" => Ok(Preset::Large),
            "reduced" => Ok(Preset::Reduced),
            _ => Err(Error::invalid(format!("unknown preset `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub sa_blocks: Vec<SABlockSpec>,
    /// Decoder blocks in application order: the first one lifts the coarsest level.
    pub fp_blocks: Vec<FPBlockSpec>,
    pub color_branch: ColorBranchSpec,
    pub head_channels: usize,
    pub fusion: Fusion,
    pub n_classes: usize,
    pub block_size: usize,
}

const RADII: [f64; 4] = [0.01, 0.02, 0.04, 0.08];
const GROUP_SIZE: usize = 24;

impl NetworkSpec {
    pub fn preset(preset: Preset, fusion: Fusion) -> Self {
        let (block_size, ladder, div) = match preset {
            Preset::Small => (4096, [1024, 256, 64, 16], 1),
            Preset::Large => (8192, [2048, 512, 128, 32], 1),
            Preset::Reduced => (1024, [256, 64, 32, 16], 2),
        };
        let enc = [[32, 64], [64, 128], [128, 256], [256, 512]];
        let dec = [[256, 256], [256, 128], [128, 128], [128, 128]];
        let sa_blocks = (0..4)
            .map(|i| SABlockSpec::new(ladder[i], RADII[i], GROUP_SIZE, enc[i].iter().map(|c| c / div).collect()))
            .collect();
        let fp_blocks = dec
            .iter()
            .map(|d| FPBlockSpec {
                mlp_channels: d.iter().map(|c| c / div).collect(),
            })
            .collect();
        Self {
            sa_blocks,
            fp_blocks,
            color_branch: ColorBranchSpec::default(),
            head_channels: 128 / div,
            fusion,
            n_classes: 2,
            block_size,
        }
    }

    /// The preset matching a block size (`Small` unless 8192 or 1024).
    pub fn for_block_size(block_size: usize, fusion: Fusion) -> Self {
        let preset = match block_size {
            8192 => Preset::Large,
            1024 => Preset::Reduced,
            _ => Preset::Small,
        };
        let mut spec = Self::preset(preset, fusion);
        spec.block_size = block_size;
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.sa_blocks.is_empty() || self.sa_blocks.len() != self.fp_blocks.len() {
            return Err(Error::invalid(format!(
                "need equal, non-zero SA and FP block counts (got {} and {})",
                self.sa_blocks.len(),
                self.fp_blocks.len()
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::invalid("n_classes must be at least 2"));
        }
        if self.head_channels == 0 {
            return Err(Error::invalid("head width must be positive"));
        }
        let mut prev_n = self.block_size;
        let mut prev_r = 0.0;
        for (i, sa) in self.sa_blocks.iter().enumerate() {
            sa.grouping.validate()?;
            if sa.mlp_channels.is_empty() || sa.mlp_channels.contains(&0) {
                return Err(Error::invalid(format!("SA block {} has an empty MLP", i + 1)));
            }
            if sa.sampling.n_centroids == 0 || sa.sampling.n_centroids > prev_n {
                return Err(Error::invalid(format!(
                    "SA block {} samples {} centroids from {prev_n} points",
                    i + 1,
                    sa.sampling.n_centroids
                )));
            }
            if sa.grouping.radius <= prev_r {
                return Err(Error::invalid("SA radii must increase strictly"));
            }
            prev_n = sa.sampling.n_centroids;
            prev_r = sa.grouping.radius;
        }
        for (i, fp) in self.fp_blocks.iter().enumerate() {
            if fp.mlp_channels.is_empty() || fp.mlp_channels.contains(&0) {
                return Err(Error::invalid(format!("FP block {} has an empty MLP", i + 1)));
            }
        }
        if self.fusion.color_branch() {
            self.color_branch.grouping.validate()?;
            if self.color_branch.mlp_channels.is_empty() || self.color_branch.mlp_channels.contains(&0) {
                return Err(Error::invalid("color branch has an empty MLP"));
            }
        }
        Ok(())
    }

    fn input_channels(&self) -> usize {
        if self.fusion.rgb_input() {
            3
        } else {
            0
        }
    }

    /// Reads the `[network]` section; missing keys keep the preset values.
    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let fusion = cfg.get::<Fusion>("network.fusion")?.unwrap_or(Fusion::Late);
        let mut spec = match cfg.get::<Preset>("network.preset")? {
            Some(p) => Self::preset(p, fusion),
            None => Self::for_block_size(cfg.get("network.block_size")?.unwrap_or(4096), fusion),
        };
        if let Some(b) = cfg.get("network.block_size")? {
            spec.block_size = b;
        }
        if let Some(n) = cfg.get("network.n_classes")? {
            spec.n_classes = n;
        }
        if let Some(h) = cfg.get("network.head_channels")? {
            spec.head_channels = h;
        }
        let levels = spec.sa_blocks.len();
        let check_len = |key: &str, n: usize| {
            if n != levels {
                Err(Error::invalid(format!("`{key}` needs {levels} entries, got {n}")))
            } else {
                Ok(())
            }
        };
        if let Some(c) = cfg.get_list::<usize>("network.centroids")? {
            check_len("network.centroids", c.len())?;
            for (sa, n) in spec.sa_blocks.iter_mut().zip(c) {
                sa.sampling.n_centroids = n;
            }
        }
        if let Some(r) = cfg.get_list::<f64>("network.radii")? {
            check_len("network.radii", r.len())?;
            for (sa, r) in spec.sa_blocks.iter_mut().zip(r) {
                sa.grouping.radius = r;
            }
        }
        if let Some(k) = cfg.get::<usize>("network.group_size")? {
            for sa in &mut spec.sa_blocks {
                sa.grouping.k = k;
            }
        }
        for i in 0..levels {
            if let Some(m) = cfg.get_list(&format!("network.sa{}_mlp", i + 1))? {
                spec.sa_blocks[i].mlp_channels = m;
            }
            if let Some(m) = cfg.get_list(&format!("network.fp{}_mlp", i + 1))? {
                spec.fp_blocks[i].mlp_channels = m;
            }
        }
        if let Some(r) = cfg.get("network.color_radius")? {
            spec.color_branch.grouping.radius = r;
        }
        if let Some(k) = cfg.get("network.color_group_size")? {
            spec.color_branch.grouping.k = k;
        }
        if let Some(m) = cfg.get_list("network.color_mlp")? {
            spec.color_branch.mlp_channels = m;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Writes every field into the `[network]` section.
    pub fn write_config(&self, cfg: &mut KvConfig) {
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        cfg.set("network.fusion", self.fusion);
        cfg.set("network.block_size", self.block_size);
        cfg.set("network.n_classes", self.n_classes);
        cfg.set("network.head_channels", self.head_channels);
        let c: Vec<usize> = self.sa_blocks.iter().map(|s| s.sampling.n_centroids).collect();
        cfg.set("network.centroids", join(&c));
        let r: Vec<String> = self.sa_blocks.iter().map(|s| s.grouping.radius.to_string()).collect();
        cfg.set("network.radii", r.join(","));
        cfg.set("network.group_size", self.sa_blocks[0].grouping.k);
        for (i, sa) in self.sa_blocks.iter().enumerate() {
            cfg.set(&format!("network.sa{}_mlp", i + 1), join(&sa.mlp_channels));
        }
        for (i, fp) in self.fp_blocks.iter().enumerate() {
            cfg.set(&format!("network.fp{}_mlp", i + 1), join(&fp.mlp_channels));
        }
        cfg.set("network.color_radius", self.color_branch.grouping.radius);
        cfg.set("network.color_group_size", self.color_branch.grouping.k);
        cfg.set("network.color_mlp", join(&self.color_branch.mlp_channels));
    }
}

fn insert_mlp(store: &mut ParameterStore, rng: &mut ChaCha8Rng, prefix: &str, c_in: usize, channels: &[usize]) -> Result<usize> {
    let mut c = c_in;
    for (j, &w) in channels.iter().enumerate() {
        let p = format!("{prefix}.mlp{j}");
        let he = Normal::new(0.0, (2.0 / c.max(1) as f64).sqrt()).expect("positive std");
        let weight: Vec<f64> = (0..c * w).map(|_| he.sample(rng)).collect();
        store.insert(&format!("{p}.weight"), Tensor::new(vec![c, w], weight)?)?;
        store.insert(&format!("{p}.bn.gamma"), Tensor::new(vec![w], vec![1.0; w])?)?;
        store.insert(&format!("{p}.bn.beta"), Tensor::zeros(vec![w]))?;
        store.insert(&format!("{p}.bn.running_mean"), Tensor::zeros(vec![w]))?;
        store.insert(&format!("{p}.bn.running_var"), Tensor::new(vec![w], vec![1.0; w])?)?;
        c = w;
    }
    Ok(c)
}

/// Fresh parameters: He-normal MLP weights, unit BN scale, uniform head init.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<ParameterStore> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let mut widths = vec![spec.input_channels()];
    for (i, sa) in spec.sa_blocks.iter().enumerate() {
        let c = insert_mlp(&mut store, &mut rng, &format!("sa{}", i + 1), 3 + widths[i], &sa.mlp_channels)?;
        widths.push(c);
    }
    let levels = spec.sa_blocks.len();
    let mut c = widths[levels];
    for (j, fp) in spec.fp_blocks.iter().enumerate() {
        let skip = widths[levels - 1 - j];
        c = insert_mlp(&mut store, &mut rng, &format!("fp{}", j + 1), c + skip, &fp.mlp_channels)?;
    }
    if spec.fusion.color_branch() {
        c += insert_mlp(&mut store, &mut rng, "color", 6, &spec.color_branch.mlp_channels)?;
    }
    let h = insert_mlp(&mut store, &mut rng, "head", c, &[spec.head_channels])?;
    let bound = 1.0 / (h as f64).sqrt();
    let w: Vec<f64> = (0..h * spec.n_classes).map(|_| rng.random_range(-bound..bound)).collect();
    store.insert("head.out.weight", Tensor::new(vec![h, spec.n_classes], w)?)?;
    store.insert("head.out.bias", Tensor::zeros(vec![spec.n_classes]))?;
    Ok(store)
}

/// One forward evaluation: the graph, the bound parameters, and the running
/// statistics produced by normalization layers in training mode.
pub struct ForwardCtx<'a> {
    pub graph: Graph,
    pub bindings: Bindings,
    store: &'a ParameterStore,
    mode: Mode,
    updates: Vec<(String, Vec<f64>)>,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(store: &'a ParameterStore, mode: Mode) -> Self {
        let mut graph = Graph::new();
        let bindings = store.bind(&mut graph);
        Self {
            graph,
            bindings,
            store,
            mode,
            updates: Vec::new(),
        }
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        self.bindings
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter `{name}` is missing")))
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// New running-statistic values, keyed by buffer name.
    pub fn running_updates(&self) -> &[(String, Vec<f64>)] {
        &self.updates
    }

    fn buffer(&self, name: &str) -> Result<Vec<f64>> {
        self.store
            .get(name)
            .map(|t| t.data().to_vec())
            .ok_or_else(|| Error::invalid(format!("buffer `{name}` is missing")))
    }

    /// `relu(bn(x · W))` for each layer `prefix.mlp{j}`.
    pub fn shared_mlp(&mut self, prefix: &str, mut x: Var, layers: usize) -> Result<Var> {
        for j in 0..layers {
            let p = format!("{prefix}.mlp{j}");
            let w = self.param(&format!("{p}.weight"))?;
            let gamma = self.param(&format!("{p}.bn.gamma"))?;
            let beta = self.param(&format!("{p}.bn.beta"))?;
            let running = RunningStats {
                mean: self.buffer(&format!("{p}.bn.running_mean"))?,
                var: self.buffer(&format!("{p}.bn.running_var"))?,
            };
            let h = self.graph.matmul(x, w)?;
            let (h, upd) = batch_norm(&mut self.graph, h, gamma, beta, &running, self.mode, BN_MOMENTUM)?;
            if let Some(u) = upd {
                self.updates.push((format!("{p}.bn.running_mean"), u.mean));
                self.updates.push((format!("{p}.bn.running_var"), u.var));
            }
            x = self.graph.relu(h);
        }
        Ok(x)
    }
}

fn offsets(sizes: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut acc = 0;
    let mut out = vec![0];
    for s in sizes {
        acc += s;
        out.push(acc);
    }
    out
}

/// Groups each centroid's neighbours and returns `(global gather indices,
/// recentered xyz rows)` over the stacked batch.
fn grouped_rows(
    positions: &[Vec<Point3>],
    centroids: &[Vec<Point3>],
    grouping: &GroupingSpec,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let offs = offsets(positions.iter().map(Vec::len));
    let mut idx = Vec::new();
    let mut rel = Vec::new();
    for (s, (pos, cen)) in positions.iter().zip(centroids).enumerate() {
        let groups = grouping.group(pos, cen)?;
        for (ci, c) in cen.iter().enumerate() {
            for &i in groups.row(ci) {
                idx.push(offs[s] + i);
                let p = pos[i];
                rel.extend_from_slice(&[p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
            }
        }
    }
    Ok((idx, rel))
}

/// Set abstraction over a batch: FPS centroids, ball groups recentered on their
/// centroid, `[xyz | features]` through the shared MLP, max over each group.
///
/// `features` stacks the per-block rows in batch order. Returns the centroid
/// positions per block and their pooled features.
pub fn sa_forward(
    ctx: &mut ForwardCtx<'_>,
    prefix: &str,
    positions: &[Vec<Point3>],
    features: Option<Var>,
    spec: &SABlockSpec,
) -> Result<(Vec<Vec<Point3>>, Var)> {
    let total: usize = positions.iter().map(Vec::len).sum();
    if positions.iter().any(Vec::is_empty) {
        return Err(Error::invalid("set abstraction on an empty block"));
    }
    if let Some(f) = features {
        let t = ctx.graph.value(f);
        if t.shape().len() != 2 || t.rows() != total {
            return Err(Error::ShapeMismatch {
                op: "sa_forward",
                lhs: t.shape().to_vec(),
                rhs: vec![total, 3],
            });
        }
    }
    let mut centroids = Vec::with_capacity(positions.len());
    for pos in positions {
        let idx = spec.sampling.sample(pos)?;
        centroids.push(idx.into_iter().map(|i| pos[i]).collect::<Vec<_>>());
    }
    let (idx, rel) = grouped_rows(positions, &centroids, &spec.grouping)?;
    let rows = idx.len();
    let xyz = ctx.graph.constant(Tensor::new(vec![rows, 3], rel)?);
    let input = match features {
        Some(f) => {
            let gathered = ctx.graph.gather_rows(f, &idx)?;
            ctx.graph.concat(&[xyz, gathered])?
        }
        None => xyz,
    };
    let h = ctx.shared_mlp(prefix, input, spec.mlp_channels.len())?;
    let c = ctx.graph.value(h).cols();
    let k = spec.grouping.k;
    let h = ctx.graph.reshape(h, vec![rows / k, k, c])?;
    let pooled = ctx.graph.max_axis(h, 1)?;
    Ok((centroids, pooled))
}

/// Feature propagation: inverse-squared-distance 3-NN interpolation of
/// `source_features` onto the query points, concatenated with `skip`, then the
/// shared MLP.
pub fn fp_forward(
    ctx: &mut ForwardCtx<'_>,
    prefix: &str,
    queries: &[Vec<Point3>],
    sources: &[Vec<Point3>],
    source_features: Var,
    skip: Option<Var>,
    spec: &FPBlockSpec,
) -> Result<Var> {
    if queries.len() != sources.len() {
        return Err(Error::invalid("query and source batches differ in length"));
    }
    let offs = offsets(sources.iter().map(Vec::len));
    let n_src = offs[offs.len() - 1];
    if ctx.graph.value(source_features).rows() != n_src {
        return Err(Error::ShapeMismatch {
            op: "fp_forward",
            lhs: ctx.graph.value(source_features).shape().to_vec(),
            rhs: vec![n_src],
        });
    }
    let mut idx = Vec::new();
    let mut w = Vec::new();
    for (s, (q, src)) in queries.iter().zip(sources).enumerate() {
        for st in three_nn_interpolate_weights(q, src)? {
            idx.extend(st.indices.iter().map(|i| offs[s] + i));
            w.extend_from_slice(&st.weights);
        }
    }
    let interp = ctx.graph.weighted_gather(source_features, &idx, &w, 3)?;
    let input = match skip {
        Some(sk) => ctx.graph.concat(&[interp, sk])?,
        None => interp,
    };
    ctx.shared_mlp(prefix, input, spec.mlp_channels.len())
}

/// Color branch: every point is a centroid; its ball neighbours contribute
/// `[recentered xyz | rgb]` rows, which go through the MLP and are max-pooled.
pub fn color_forward(
    ctx: &mut ForwardCtx<'_>,
    prefix: &str,
    positions: &[Vec<Point3>],
    colors: Var,
    spec: &ColorBranchSpec,
) -> Result<Var> {
    let (idx, rel) = grouped_rows(positions, positions, &spec.grouping)?;
    let rows = idx.len();
    let xyz = ctx.graph.constant(Tensor::new(vec![rows, 3], rel)?);
    let rgb = ctx.graph.gather_rows(colors, &idx)?;
    let input = ctx.graph.concat(&[xyz, rgb])?;
    let h = ctx.shared_mlp(prefix, input, spec.mlp_channels.len())?;
    let c = ctx.graph.value(h).cols();
    let k = spec.grouping.k;
    let h = ctx.graph.reshape(h, vec![rows / k, k, c])?;
    ctx.graph.max_axis(h, 1)
}

/// Logits for a batch of blocks, stacked as `(B·block_size) × n_classes`.
pub fn forward(ctx: &mut ForwardCtx<'_>, spec: &NetworkSpec, blocks: &[&PointCloud]) -> Result<Var> {
    if blocks.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    for b in blocks {
        if b.len() != spec.block_size {
            return Err(Error::invalid(format!(
                "block has {} points, network expects {}",
                b.len(),
                spec.block_size
            )));
        }
        if spec.fusion.needs_colors() && !b.has_colors() {
            return Err(Error::invalid(format!("fusion `{}` needs colored blocks", spec.fusion)));
        }
    }
    let rgb = if spec.fusion.needs_colors() {
        let data: Vec<f64> = blocks
            .iter()
            .flat_map(|b| b.colors.as_ref().expect("checked").iter().flatten().copied())
            .collect();
        Some(ctx.graph.constant(Tensor::new(vec![data.len() / 3, 3], data)?))
    } else {
        None
    };
    let input_features = if spec.fusion.rgb_input() { rgb } else { None };

    let mut level_pos = vec![blocks.iter().map(|b| b.positions.clone()).collect::<Vec<_>>()];
    let mut level_feat = vec![input_features];
    for (i, sa) in spec.sa_blocks.iter().enumerate() {
        let (pos, feat) = sa_forward(ctx, &format!("sa{}", i + 1), &level_pos[i], level_feat[i], sa)?;
        level_pos.push(pos);
        level_feat.push(Some(feat));
    }
    let levels = spec.sa_blocks.len();
    let mut h = level_feat[levels].expect("encoder output");
    for (j, fp) in spec.fp_blocks.iter().enumerate() {
        let dst = levels - 1 - j;
        h = fp_forward(
            ctx,
            &format!("fp{}", j + 1),
            &level_pos[dst],
            &level_pos[dst + 1],
            h,
            level_feat[dst],
            fp,
        )?;
    }
    if spec.fusion.color_branch() {
        let color = color_forward(ctx, "color", &level_pos[0], rgb.expect("colors"), &spec.color_branch)?;
        h = ctx.graph.concat(&[h, color])?;
    }
    let h = ctx.shared_mlp("head", h, 1)?;
    let w = ctx.param("head.out.weight")?;
    let b = ctx.param("head.out.bias")?;
    let logits = ctx.graph.matmul(h, w)?;
    ctx.graph.add_bias(logits, b)
}

/// Logits of a single block in evaluation mode, row-major `block_size × n_classes`.
pub fn predict_block(spec: &NetworkSpec, params: &ParameterStore, block: &PointCloud) -> Result<Vec<f64>> {
    let mut ctx = ForwardCtx::new(params, Mode::Eval);
    let out = forward(&mut ctx, spec, &[block])?;
    Ok(ctx.graph.value(out).data().to_vec())
}

/// Resamples a block up to `target` points: the original points first, then
/// draws with replacement. Returns the padded block and, per row, the index of
/// the original point it copies.
pub fn pad_block(block: &PointCloud, target: usize, seed: u64) -> Result<(PointCloud, Vec<usize>)> {
    if block.is_empty() {
        return Err(Error::invalid("cannot pad an empty block"));
    }
    if block.len() > target {
        return Err(Error::invalid(format!(
            "block of {} points exceeds target size {target}",
            block.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map: Vec<usize> = (0..block.len()).collect();
    map.extend((block.len()..target).map(|_| rng.random_range(0..block.len())));
    Ok((block.select(&map), map))
}

/// Labels a whole scene: octree partition, oversized leaves split into
/// consecutive chunks, padding, one forward per block, then reassembly.
pub fn infer_scene(
    cloud: &PointCloud,
    spec: &NetworkSpec,
    params: &ParameterStore,
    partition: PartitionSpec,
    seed: u64,
) -> Result<Vec<u32>> {
    let leaves = build_partition(cloud, partition)?;
    let chunks: Vec<Vec<usize>> = leaves
        .iter()
        .flat_map(|l| l.indices.chunks(spec.block_size).map(<[usize]>::to_vec))
        .collect();
    let run = |(bi, idx): (usize, &Vec<usize>)| -> Result<BlockLogits> {
        let (padded, map) = pad_block(&cloud.select(idx), spec.block_size, seed.wrapping_add(bi as u64))?;
        let logits = predict_block(spec, params, &padded)?;
        Ok(BlockLogits {
            origin: map.into_iter().map(|r| idx[r]).collect(),
            logits,
            n_classes: spec.n_classes,
        })
    };
    #[cfg(feature = "parallel")]
    let block_logits: Vec<BlockLogits> = {
        use rayon::prelude::*;
        chunks.par_iter().enumerate().map(run).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let block_logits: Vec<BlockLogits> = chunks.iter().enumerate().map(run).collect::<Result<_>>()?;
    log::debug!("inferred {} blocks from {} octree leaves", chunks.len(), leaves.len());
    assemble_predictions(cloud.len(), &leaves, &block_logits)
}
