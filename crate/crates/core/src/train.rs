//! Training data and the optimization loop: nearest-neighbour crops with
//! foreground under-sampling, augmentation, weighted cross-entropy, and Adam
//! with per-epoch learning-rate decay and best-validation checkpointing.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{AdamConfig, Graph, Mode, ParameterStore, Tensor, Var};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::kernels::KdTree;
use crate::metrics::ConfusionMatrix;
use crate::segnet::{forward, init_params, predict_block, ForwardCtx, NetworkSpec};
use crate::PointCloud;

/// Class id of fruit points.
pub const OBJECT_CLASS: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Loss weight per class.
    pub class_weights: Vec<f64>,
    /// Crops with fewer fruit points are discarded.
    pub min_object_points: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds_per_scene: usize,
    pub augment: bool,
    /// Pick the best checkpoint among the last `n` epochs only.
    pub checkpoint_window: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_block_size(4096)
    }
}

impl TrainConfig {
    /// Thresholds and class weights tuned per block size.
    pub fn for_block_size(block_size: usize) -> Self {
        let (min_object_points, class_weights) = match block_size {
            8192 => (1500, vec![0.5, 1.5]),
            4096 => (1000, vec![0.75, 1.25]),
            b => (b * 1000 / 4096, vec![0.75, 1.25]),
        };
        Self {
            class_weights,
            min_object_points,
            lr0: 1e-3,
            lr_decay: 0.95,
            lr_min: 1e-4,
            epochs: 100,
            batch_size: 8,
            seeds_per_scene: 150,
            augment: true,
            checkpoint_window: None,
            seed: 0,
        }
    }

    pub fn validate(&self, block_size: usize) -> Result<()> {
        if self.class_weights.iter().any(|a| !(0.0..=2.0).contains(a)) {
            return Err(Error::invalid("class weights must lie in [0, 2]"));
        }
        if self.min_object_points >= block_size {
            return Err(Error::invalid(format!(
                "min_object_points {} must be below the block size {block_size}",
                self.min_object_points
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.lr0 > 0.0 && self.lr_min >= 0.0 && self.lr_decay > 0.0) {
            return Err(Error::invalid("learning-rate schedule must be positive"));
        }
        if self.checkpoint_window == Some(0) {
            return Err(Error::invalid("checkpoint window must be at least 1"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        (self.lr0 * self.lr_decay.powi(epoch as i32)).max(self.lr_min)
    }

    /// Reads the `[train]` section over the defaults for `block_size`.
    pub fn from_config(cfg: &KvConfig, block_size: usize) -> Result<Self> {
        let mut c = Self::for_block_size(block_size);
        if let Some(w) = cfg.get_list("train.class_weights")? {
            c.class_weights = w;
        }
        if let Some(a) = cfg.get("train.alpha_nobj")? {
            c.class_weights[0] = a;
        }
        if let Some(a) = cfg.get("train.alpha_obj")? {
            c.class_weights[OBJECT_CLASS as usize] = a;
        }
        macro_rules! field {
            ($key:literal, $f:ident) => {
                if let Some(v) = cfg.get($key)? {
                    c.$f = v;
                }
            };
        }
        field!("train.min_fruit_pts", min_object_points);
        field!("train.lr0", lr0);
        field!("train.lr_decay", lr_decay);
        field!("train.lr_min", lr_min);
        field!("train.epochs", epochs);
        field!("train.batch_size", batch_size);
        field!("train.seeds_per_scene", seeds_per_scene);
        field!("train.augment", augment);
        field!("train.seed", seed);
        if let Some(w) = cfg.get("train.checkpoint_window")? {
            c.checkpoint_window = Some(w);
        }
        c.validate(block_size)?;
        Ok(c)
    }

    pub fn write_config(&self, cfg: &mut KvConfig) {
        let w: Vec<String> = self.class_weights.iter().map(ToString::to_string).collect();
        cfg.set("train.class_weights", w.join(","));
        cfg.set("train.min_fruit_pts", self.min_object_points);
        cfg.set("train.lr0", self.lr0);
        cfg.set("train.lr_decay", self.lr_decay);
        cfg.set("train.lr_min", self.lr_min);
        cfg.set("train.epochs", self.epochs);
        cfg.set("train.batch_size", self.batch_size);
        cfg.set("train.seeds_per_scene", self.seeds_per_scene);
        cfg.set("train.augment", self.augment);
        cfg.set("train.seed", self.seed);
        if let Some(w) = self.checkpoint_window {
            cfg.set("train.checkpoint_window", w);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    /// Exactly `block_size` points, ordered by distance to the seed point.
    pub block: PointCloud,
    pub scene: usize,
    pub seed_point: usize,
}

impl TrainingSample {
    pub fn object_points(&self) -> usize {
        count_objects(&self.block)
    }
}

fn count_objects(c: &PointCloud) -> usize {
    c.labels
        .as_ref()
        .map_or(0, |l| l.iter().filter(|&&v| v == OBJECT_CLASS).count())
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Crops the `block_size` nearest neighbours of random seed points and keeps
/// the crops holding at least `min_object_points` fruit points.
pub fn make_dataset(
    scenes: &[PointCloud],
    block_size: usize,
    seeds_per_scene: usize,
    min_object_points: usize,
    seed: u64,
) -> Result<Vec<TrainingSample>> {
    let mut out = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        if !scene.has_labels() {
            return Err(Error::invalid(format!("scene {si} is unlabeled")));
        }
        if scene.len() < block_size {
            return Err(Error::invalid(format!(
                "scene {si} has {} points, fewer than the block size {block_size}",
                scene.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, si as u64, 0));
        let seeds: Vec<usize> = (0..seeds_per_scene).map(|_| rng.random_range(0..scene.len())).collect();
        let tree = KdTree::new(&scene.positions);
        let crop = |&sp: &usize| -> Option<TrainingSample> {
            let idx: Vec<usize> = tree
                .nearest(&scene.positions[sp], block_size)
                .into_iter()
                .map(|(_, i)| i)
                .collect();
            let block = scene.select(&idx);
            (count_objects(&block) >= min_object_points).then_some(TrainingSample {
                block,
                scene: si,
                seed_point: sp,
            })
        };
        #[cfg(feature = "parallel")]
        let kept: Vec<TrainingSample> = {
            use rayon::prelude::*;
            seeds.par_iter().filter_map(crop).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let kept: Vec<TrainingSample> = seeds.iter().filter_map(crop).collect();
        log::debug!("scene {si}: kept {} of {seeds_per_scene} crops", kept.len());
        out.extend(kept);
    }
    Ok(out)
}

pub(crate) fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h / 6.0, s, max]
}

pub(crate) fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub const AUGMENT_NOISE_SIGMA: f64 = 0.003;

/// Rotation about the vertical axis through the block centroid, Gaussian
/// position jitter, and saturation/value scaling in HSV.
pub fn augment(sample: &TrainingSample, seed: u64) -> TrainingSample {
    augment_with_noise(sample, seed, AUGMENT_NOISE_SIGMA)
}

/// [`augment`] with a custom position-noise std (zero disables the jitter).
pub fn augment_with_noise(sample: &TrainingSample, seed: u64, noise_sigma: f64) -> TrainingSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let s_scale = rng.random_range(0.8..1.2);
    let v_scale = rng.random_range(0.8..1.2);
    let noise = Normal::new(0.0, noise_sigma).expect("finite std");
    let block = &sample.block;
    let n = block.len().max(1) as f64;
    let cx = block.positions.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = block.positions.iter().map(|p| p[1]).sum::<f64>() / n;
    let (sin, cos) = theta.sin_cos();
    let positions = block
        .positions
        .iter()
        .map(|p| {
            let (x, y) = (p[0] - cx, p[1] - cy);
            [
                cx + cos * x - sin * y + noise.sample(&mut rng),
                cy + sin * x + cos * y + noise.sample(&mut rng),
                p[2] + noise.sample(&mut rng),
            ]
        })
        .collect();
    let colors = block.colors.as_ref().map(|cs| {
        cs.iter()
            .map(|&c| {
                let [h, s, v] = rgb_to_hsv(c);
                hsv_to_rgb([h, (s * s_scale).clamp(0.0, 1.0), (v * v_scale).clamp(0.0, 1.0)])
            })
            .collect()
    });
    TrainingSample {
        block: PointCloud {
            positions,
            colors,
            labels: block.labels.clone(),
        },
        scene: sample.scene,
        seed_point: sample.seed_point,
    }
}

/// Weighted cross-entropy `−(1/N) Σ_i α[y_i] · log softmax(logits_i)[y_i]`.
pub fn wce_loss(g: &mut Graph, logits: Var, labels: &[u32], alpha: &[f64]) -> Result<Var> {
    let t = g.value(logits);
    let (n, c) = (t.rows(), t.cols());
    if alpha.len() != c {
        return Err(Error::invalid(format!(
            "{} class weights for {c} classes",
            alpha.len()
        )));
    }
    if labels.len() != n || n == 0 {
        return Err(Error::ShapeMismatch {
            op: "wce_loss",
            lhs: t.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let mut mask = vec![0.0; n * c];
    for (i, &y) in labels.iter().enumerate() {
        let y = y as usize;
        if y >= c {
            return Err(Error::invalid(format!("label {y} out of range for {c} classes")));
        }
        mask[i * c + y] = alpha[y];
    }
    let mask = g.constant(Tensor::new(vec![n, c], mask)?);
    let p = g.softmax(logits);
    let lp = g.log(p);
    let picked = g.mul(lp, mask)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / n as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_miou: Option<f64>,
}

pub struct TrainOutcome {
    /// Parameters of the selected checkpoint.
    pub params: ParameterStore,
    pub best_epoch: usize,
    pub log: Vec<EpochMetrics>,
    /// Optimizer steps taken over the whole run.
    pub steps: u64,
}

/// mIoU of the network over labeled blocks of exactly `block_size` points.
pub fn evaluate_blocks(spec: &NetworkSpec, params: &ParameterStore, blocks: &[&PointCloud]) -> Result<f64> {
    let eval_one = |b: &&PointCloud| -> Result<ConfusionMatrix> {
        let logits = predict_block(spec, params, b)?;
        let preds = argmax_rows(&logits, spec.n_classes);
        let mut cm = ConfusionMatrix::new(spec.n_classes);
        let truth = b.labels.as_ref().ok_or_else(|| Error::invalid("validation block is unlabeled"))?;
        cm.accumulate(truth, &preds)?;
        Ok(cm)
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<ConfusionMatrix> = {
        use rayon::prelude::*;
        blocks.par_iter().map(eval_one).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<ConfusionMatrix> = blocks.iter().map(eval_one).collect::<Result<_>>()?;
    let mut cm = ConfusionMatrix::new(spec.n_classes);
    for p in &parts {
        cm.merge(p)?;
    }
    Ok(cm.miou()?.1)
}

pub fn argmax_rows(logits: &[f64], n_classes: usize) -> Vec<u32> {
    logits
        .chunks(n_classes)
        .map(|row| {
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect()
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step(
    params: &mut ParameterStore,
    spec: &NetworkSpec,
    batch: &[&PointCloud],
    class_weights: &[f64],
    lr: f64,
) -> Result<f64> {
    let labels: Vec<u32> = batch
        .iter()
        .map(|b| b.labels.as_deref().ok_or_else(|| Error::invalid("training block is unlabeled")))
        .collect::<Result<Vec<_>>>()?
        .concat();
    let (loss, grads, updates) = {
        let mut ctx = ForwardCtx::new(params, Mode::Train);
        let logits = forward(&mut ctx, spec, batch)?;
        let loss = wce_loss(&mut ctx.graph, logits, &labels, class_weights)?;
        let value = ctx.graph.value(loss).data()[0];
        if !value.is_finite() {
            return Ok(value);
        }
        ctx.graph.backward(loss)?;
        let grads = params.gradients(&ctx.graph, &ctx.bindings);
        (value, grads, ctx.running_updates().to_vec())
    };
    params.adam_step(&grads, lr, AdamConfig::default())?;
    for (name, v) in updates {
        params.set(&name, &v)?;
    }
    Ok(loss)
}

/// Full training run. `validation` blocks drive checkpoint selection; without
/// them the last epoch is kept.
pub fn train(
    dataset: &[TrainingSample],
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    validation: &[TrainingSample],
) -> Result<TrainOutcome> {
    train_from(init_params(spec, cfg.seed)?, dataset, spec, cfg, validation)
}

/// Like [`train`], starting from existing parameters.
pub fn train_from(
    mut params: ParameterStore,
    dataset: &[TrainingSample],
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    validation: &[TrainingSample],
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    spec.validate()?;
    cfg.validate(spec.block_size)?;
    if cfg.class_weights.len() != spec.n_classes {
        return Err(Error::invalid(format!(
            "{} class weights for {} classes",
            cfg.class_weights.len(),
            spec.n_classes
        )));
    }
    let val_blocks: Vec<&PointCloud> = validation.iter().map(|s| &s.block).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, u64::MAX, 1));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParameterStore)> = None;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<TrainingSample> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        augment(&dataset[i], mix_seed(cfg.seed, epoch as u64 + 1, i as u64))
                    } else {
                        dataset[i].clone()
                    }
                })
                .collect();
            let batch: Vec<&PointCloud> = samples.iter().map(|s| &s.block).collect();
            let loss = train_step(&mut params, spec, &batch, &cfg.class_weights, lr)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    lr,
                });
            }
            total += loss;
            batches += 1;
        }
        let train_loss = total / batches as f64;
        let val_miou = if val_blocks.is_empty() {
            None
        } else {
            Some(evaluate_blocks(spec, &params, &val_blocks)?)
        };
        log::info!(
            "epoch {epoch}: lr {lr:.2e}, loss {train_loss:.5}, val mIoU {}",
            val_miou.map_or("-".to_string(), |m| format!("{m:.4}"))
        );
        log.push(EpochMetrics {
            epoch,
            lr,
            train_loss,
            val_miou,
        });
        let eligible = cfg.checkpoint_window.is_none_or(|w| epoch + w >= cfg.epochs);
        let score = val_miou.unwrap_or(f64::NEG_INFINITY);
        if eligible && best.as_ref().is_none_or(|(s, _, _)| score > *s || val_miou.is_none()) {
            best = Some((score, epoch, params.snapshot()));
        }
    }
    let steps = params.adam_steps();
    let (params, best_epoch) = match best {
        Some((_, e, p)) => (p, e),
        None => (params, cfg.epochs.saturating_sub(1)),
    };
    Ok(TrainOutcome {
        params,
        best_epoch,
        log,
        steps,
    })
}

/// Metrics log as CSV with header `epoch,lr,train_loss,val_miou`.
pub fn metrics_csv(log: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,lr,train_loss,val_miou\n");
    for m in log {
        out.push_str(&format!(
            "{},{},{},{}\n",
            m.epoch,
            m.lr,
            m.train_loss,
            m.val_miou.map_or(String::new(), |v| v.to_string())
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let c = [rng.random(), rng.random(), rng.random()];
            let back = hsv_to_rgb(rgb_to_hsv(c));
            for k in 0..3 {
                assert!((back[k] - c[k]).abs() < 1e-12);
            }
        }
        assert_eq!(rgb_to_hsv([1.0, 0.0, 0.0]), [0.0, 1.0, 1.0]);
        assert_eq!(rgb_to_hsv([0.5, 0.5, 0.5]), [0.0, 0.0, 0.5]);
    }

    #[test]
    fn schedule_floor() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 1e-3);
        assert!((c.lr_at(1) - 9.5e-4).abs() < 1e-15);
        assert_eq!(c.lr_at(60), 1e-4);
    }

    #[test]
    fn config_defaults_and_overrides() {
        let c = TrainConfig::for_block_size(8192);
        assert_eq!((c.min_object_points, c.class_weights.clone()), (1500, vec![0.5, 1.5]));
        let cfg = KvConfig::parse("[train]\nalpha_obj = 1.1\nmin_fruit_pts = 10\nepochs = 3\n").unwrap();
        let c = TrainConfig::from_config(&cfg, 4096).unwrap();
        assert_eq!((c.class_weights[1], c.min_object_points, c.epochs), (1.1, 10, 3));
        let mut out = KvConfig::default();
        c.write_config(&mut out);
        assert_eq!(TrainConfig::from_config(&out, 4096).unwrap(), c);
        let bad = KvConfig::parse("[train]\nalpha_obj = 2.5\n").unwrap();
        assert!(TrainConfig::from_config(&bad, 4096).is_err());
        let bad = KvConfig::parse("[train]\nmin_fruit_pts = 4096\n").unwrap();
        assert!(TrainConfig::from_config(&bad, 4096).is_err());
    }
}
