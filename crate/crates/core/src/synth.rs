//! Deterministic synthetic orchard scenes: a ground patch, a trunk with
//! branches, a canopy of small leaf discs, and spherical fruits. Fruit points
//! carry label 1, everything else label 0.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::{dist2, PointCloud, Point3};

pub const MAX_POINTS: usize = 1_000_000;
/// Depth noise coefficient of [`generate_rgbd_like`], in m per m² of distance.
pub const RGBD_SIGMA0: f64 = 0.002;

const LEAF_RADIUS: f64 = 0.015;
const TRUNK_RADIUS: f64 = 0.06;
const BRANCH_RADIUS: f64 = 0.02;
const N_BRANCHES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorMode {
    /// Red fruit, green canopy.
    Separable,
    /// Every point draws its color from the same distribution.
    GeometryOnly,
    /// Half the fruits are unripe green and some leaves are reddish.
    Ambiguous,
}

impl FromStr for ColorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separable" => Ok(ColorMode::Separable),
            "geometry-only" => Ok(ColorMode::GeometryOnly),
            "ambiguous" => Ok(ColorMode::Ambiguous),
            _ => Err(Error::invalid(format!("unknown color mode `{s}`"))),
        }
    }
}

impl fmt::Display for ColorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColorMode::Separable => "separable",
            ColorMode::GeometryOnly => "geometry-only",
            ColorMode::Ambiguous => "ambiguous",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecipe {
    /// Width (x), height (z), depth (y) in meters.
    pub extent: [f64; 3],
    pub fruit_count: usize,
    pub fruit_radius: f64,
    pub leaf_count: usize,
    /// Surface sampling density in points per m².
    pub point_density: f64,
    pub color_mode: ColorMode,
    /// Std of the isotropic position noise, truncated at three sigma.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneRecipe {
    fn default() -> Self {
        Self {
            extent: [2.5, 3.0, 2.0],
            fruit_count: 40,
            fruit_radius: 0.04,
            leaf_count: 6000,
            point_density: 12_000.0,
            color_mode: ColorMode::Separable,
            noise_sigma: 0.001,
            seed: 0,
        }
    }
}

struct Layout {
    ground: f64,
    trunk_height: f64,
    canopy_center: Point3,
    canopy_axes: Point3,
}

impl SceneRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.extent.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::invalid("scene extent must be positive"));
        }
        if !(self.fruit_radius > 0.0) || !(self.point_density > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("fruit radius and density must be positive, noise non-negative"));
        }
        let n = self.expected_points();
        if n > MAX_POINTS as f64 {
            return Err(Error::invalid(format!(
                "recipe would produce about {n:.0} points (limit {MAX_POINTS})"
            )));
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let [w, h, d] = self.extent;
        Layout {
            ground: 0.0,
            trunk_height: 0.4 * h,
            canopy_center: [w / 2.0, d / 2.0, 0.62 * h],
            canopy_axes: [0.42 * w, 0.42 * d, 0.3 * h],
        }
    }

    fn areas(&self) -> [f64; 4] {
        let l = self.layout();
        let [w, _, d] = self.extent;
        let branch_len = 0.5 * l.canopy_axes[0];
        [
            w * d,
            TAU * TRUNK_RADIUS * l.trunk_height + N_BRANCHES as f64 * TAU * BRANCH_RADIUS * branch_len,
            self.leaf_count as f64 * PI * LEAF_RADIUS * LEAF_RADIUS,
            self.fruit_count as f64 * 4.0 * PI * self.fruit_radius * self.fruit_radius,
        ]
    }

    /// Point count implied by the surface areas and the density.
    pub fn expected_points(&self) -> f64 {
        self.areas().iter().sum::<f64>() * self.point_density
    }

    /// Fraction of fruit points implied by the surface areas.
    pub fn expected_fruit_fraction(&self) -> f64 {
        let a = self.areas();
        a[3] / a.iter().sum::<f64>()
    }
}

fn poisson_count(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    let whole = mean.floor();
    whole as usize + usize::from(rng.random::<f64>() < mean - whole)
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Point3 {
    let z: f64 = rng.random_range(-1.0..1.0);
    let phi = rng.random_range(0.0..TAU);
    let r = (1.0 - z * z).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

fn in_ellipsoid(rng: &mut ChaCha8Rng, c: Point3, a: Point3) -> Point3 {
    loop {
        let u: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        if u.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            return [c[0] + u[0] * a[0], c[1] + u[1] * a[1], c[2] + u[2] * a[2]];
        }
    }
}

/// Two unit vectors orthogonal to `n` and to each other.
fn basis(n: Point3) -> (Point3, Point3) {
    let t = if n[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let cross = |a: Point3, b: Point3| [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    let u = cross(n, t);
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let u = u.map(|v| v / norm);
    (u, cross(n, u))
}

#[derive(Clone, Copy)]
enum Part {
    Ground,
    Wood,
    Leaf,
    Fruit { ripe: bool },
}

struct Palette {
    base: [f64; 3],
    spread: f64,
}

const GROUND: Palette = Palette { base: [0.45, 0.37, 0.27], spread: 0.05 };
const WOOD: Palette = Palette { base: [0.38, 0.27, 0.18], spread: 0.04 };
const LEAF: Palette = Palette { base: [0.22, 0.52, 0.16], spread: 0.06 };
const DRY_LEAF: Palette = Palette { base: [0.55, 0.30, 0.15], spread: 0.06 };
const RIPE: Palette = Palette { base: [0.78, 0.14, 0.12], spread: 0.06 };
const UNRIPE: Palette = Palette { base: [0.40, 0.60, 0.18], spread: 0.06 };

fn draw_color(rng: &mut ChaCha8Rng, p: &Palette) -> [f64; 3] {
    let shade = rng.random_range(0.7..1.0);
    let mut c = [0.0; 3];
    for (ch, b) in c.iter_mut().zip(p.base) {
        let n: f64 = StandardNormal.sample(rng);
        *ch = ((b + n * p.spread) * shade).clamp(0.0, 1.0);
    }
    c
}

fn color_for(rng: &mut ChaCha8Rng, mode: ColorMode, part: Part) -> [f64; 3] {
    let palette = match mode {
        ColorMode::GeometryOnly => {
            let u: f64 = rng.random();
            if u < 0.5 {
                &LEAF
            } else if u < 0.8 {
                &RIPE
            } else {
                &GROUND
            }
        }
        ColorMode::Separable => match part {
            Part::Ground => &GROUND,
            Part::Wood => &WOOD,
            Part::Leaf => &LEAF,
            Part::Fruit { .. } => &RIPE,
        },
        ColorMode::Ambiguous => match part {
            Part::Ground => &GROUND,
            Part::Wood => &WOOD,
            Part::Leaf => {
                if rng.random::<f64>() < 0.15 {
                    &DRY_LEAF
                } else {
                    &LEAF
                }
            }
            Part::Fruit { ripe: true } => &RIPE,
            Part::Fruit { ripe: false } => &UNRIPE,
        },
    };
    draw_color(rng, palette)
}

/// Generates one labeled, colored scene. Same recipe, same bits.
pub fn generate_scene(recipe: &SceneRecipe) -> Result<PointCloud> {
    recipe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let l = recipe.layout();
    let [w, _, d] = recipe.extent;
    let rho = recipe.point_density;
    let r_fruit = recipe.fruit_radius;

    let mut fruits: Vec<(Point3, bool)> = Vec::with_capacity(recipe.fruit_count);
    let min_gap2 = (2.0 * r_fruit + 0.01).powi(2);
    let mut attempts = 0;
    while fruits.len() < recipe.fruit_count {
        let c = in_ellipsoid(&mut rng, l.canopy_center, l.canopy_axes.map(|a| a * 0.95));
        attempts += 1;
        if attempts < 100_000 && fruits.iter().any(|(f, _)| dist2(f, &c) < min_gap2) {
            continue;
        }
        let ripe = rng.random::<f64>() < 0.5;
        fruits.push((c, ripe));
    }

    let mut pts: Vec<(Point3, Part)> = Vec::with_capacity(recipe.expected_points() as usize + 16);
    for _ in 0..poisson_count(&mut rng, w * d * rho) {
        pts.push(([rng.random_range(0.0..w), rng.random_range(0.0..d), l.ground], Part::Ground));
    }
    let cylinder = |rng: &mut ChaCha8Rng, pts: &mut Vec<(Point3, Part)>, a: Point3, axis: Point3, len: f64, r: f64| {
        let (u, v) = basis(axis);
        for _ in 0..poisson_count(rng, TAU * r * len * rho) {
            let t = rng.random_range(0.0..len);
            let phi = rng.random_range(0.0..TAU);
            let (s, c) = phi.sin_cos();
            let p = std::array::from_fn(|k| a[k] + axis[k] * t + r * (c * u[k] + s * v[k]));
            pts.push((p, Part::Wood));
        }
    };
    let base = [l.canopy_center[0], l.canopy_center[1], l.ground];
    cylinder(&mut rng, &mut pts, base, [0.0, 0.0, 1.0], l.trunk_height, TRUNK_RADIUS);
    let top = [base[0], base[1], l.trunk_height];
    for _ in 0..N_BRANCHES {
        let mut dir = unit_vector(&mut rng);
        dir[2] = dir[2].abs() * 0.6 + 0.3;
        let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dir = dir.map(|v| v / n);
        cylinder(&mut rng, &mut pts, top, dir, 0.5 * l.canopy_axes[0], BRANCH_RADIUS);
    }
    for _ in 0..recipe.leaf_count {
        let c = in_ellipsoid(&mut rng, l.canopy_center, l.canopy_axes);
        let (u, v) = basis(unit_vector(&mut rng));
        for _ in 0..poisson_count(&mut rng, PI * LEAF_RADIUS * LEAF_RADIUS * rho) {
            let rr = LEAF_RADIUS * rng.random::<f64>().sqrt();
            let (s, co) = rng.random_range(0.0..TAU).sin_cos();
            let p = std::array::from_fn(|k| c[k] + rr * (co * u[k] + s * v[k]));
            pts.push((p, Part::Leaf));
        }
    }
    // drop everything a fruit occludes from the inside
    let r2 = r_fruit * r_fruit;
    pts.retain(|(p, _)| fruits.iter().all(|(f, _)| dist2(f, p) >= r2));
    for &(c, ripe) in &fruits {
        for _ in 0..poisson_count(&mut rng, 4.0 * PI * r2 * rho) {
            let n = unit_vector(&mut rng);
            pts.push((std::array::from_fn(|k| c[k] + r_fruit * n[k]), Part::Fruit { ripe }));
        }
    }

    let mut positions = Vec::with_capacity(pts.len());
    let mut colors = Vec::with_capacity(pts.len());
    let mut labels = Vec::with_capacity(pts.len());
    let limit = 3.0 * recipe.noise_sigma;
    for (p, part) in pts {
        let mut q = p;
        if recipe.noise_sigma > 0.0 {
            let n: [f64; 3] = std::array::from_fn(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                recipe.noise_sigma * z
            });
            let len = n.iter().map(|v| v * v).sum::<f64>().sqrt();
            let f = if len > limit { limit / len } else { 1.0 };
            for k in 0..3 {
                q[k] += n[k] * f;
            }
        }
        positions.push(q);
        colors.push(color_for(&mut rng, recipe.color_mode, part));
        labels.push(u32::from(matches!(part, Part::Fruit { .. })));
    }
    log::debug!(
        "synthesized {} points, {} fruit",
        positions.len(),
        labels.iter().filter(|&&l| l == 1).count()
    );
    Ok(PointCloud::from_positions(positions).with_colors(colors).with_labels(labels))
}

/// The recipe's scene as seen by a stereo depth camera at `distance` meters:
/// Gaussian noise of std `RGBD_SIGMA0 · distance²` along the viewing (y) axis.
///
/// The noise draws are the same for every distance, only their scale changes.
pub fn generate_rgbd_like(recipe: &SceneRecipe, distance: f64) -> Result<PointCloud> {
    if !(distance >= 0.0) {
        return Err(Error::invalid("distance must be non-negative"));
    }
    let mut cloud = generate_scene(recipe)?;
    let sigma = RGBD_SIGMA0 * distance * distance;
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed ^ 0x5eed_0f_de97);
        let noise = Normal::new(0.0, sigma).expect("positive std");
        for p in &mut cloud.positions {
            p[1] += noise.sample(&mut rng);
        }
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneRecipe {
        SceneRecipe {
            leaf_count: 800,
            fruit_count: 10,
            point_density: 6000.0,
            ..SceneRecipe::default()
        }
    }

    #[test]
    fn default_recipe_lands_in_scene_band() {
        let r = SceneRecipe::default();
        let c = generate_scene(&r).unwrap();
        assert!((100_000..=200_000).contains(&c.len()), "{}", c.len());
        let frac = c.label_histogram(2)[1] as f64 / c.len() as f64;
        let target = r.expected_fruit_fraction();
        assert!((frac - target).abs() <= 0.2 * target, "{frac} vs {target}");
        assert!((0.01..=0.1).contains(&frac));
    }

    #[test]
    fn fruit_points_stay_near_centers() {
        let r = SceneRecipe { noise_sigma: 0.004, ..small() };
        let c = generate_scene(&r).unwrap();
        // recover centers independently: replay the fruit placement
        let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
        let l = r.layout();
        let mut centers: Vec<Point3> = Vec::new();
        while centers.len() < r.fruit_count {
            let p = in_ellipsoid(&mut rng, l.canopy_center, l.canopy_axes.map(|a| a * 0.95));
            if centers.iter().any(|f| dist2(f, &p) < (2.0 * r.fruit_radius + 0.01).powi(2)) {
                continue;
            }
            let _: f64 = rng.random();
            centers.push(p);
        }
        let bound = r.fruit_radius + 3.0 * r.noise_sigma + 1e-12;
        for (p, &lab) in c.positions.iter().zip(c.labels.as_ref().unwrap()) {
            if lab == 1 {
                assert!(centers.iter().any(|f| dist2(f, p).sqrt() <= bound));
            }
        }
    }

    #[test]
    fn no_fruit_no_label() {
        let c = generate_scene(&SceneRecipe { fruit_count: 0, ..small() }).unwrap();
        assert_eq!(c.label_histogram(2)[1], 0);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate_scene(&small()).unwrap();
        let b = generate_scene(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&SceneRecipe { seed: 1, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn oversized_recipes_rejected() {
        let r = SceneRecipe { point_density: 1e6, ..SceneRecipe::default() };
        assert!(generate_scene(&r).is_err());
        assert!(SceneRecipe { extent: [0.0, 1.0, 1.0], ..small() }.validate().is_err());
    }

    #[test]
    fn color_modes() {
        let mean_red = |c: &PointCloud, lab: u32| {
            let (mut s, mut n) = (0.0, 0.0);
            for (col, &l) in c.colors.as_ref().unwrap().iter().zip(c.labels.as_ref().unwrap()) {
                if l == lab {
                    s += col[0] - col[1];
                    n += 1.0;
                }
            }
            s / n
        };
        let sep = generate_scene(&small()).unwrap();
        assert!(mean_red(&sep, 1) > 0.3 && mean_red(&sep, 0) < 0.1);
        let geo = generate_scene(&SceneRecipe { color_mode: ColorMode::GeometryOnly, ..small() }).unwrap();
        assert!((mean_red(&geo, 1) - mean_red(&geo, 0)).abs() < 0.05);
        assert_eq!("geometry-only".parse::<ColorMode>().unwrap(), ColorMode::GeometryOnly);
        assert!("plaid".parse::<ColorMode>().is_err());
    }

    #[test]
    fn rgbd_noise_scales_with_square_distance() {
        let r = SceneRecipe { noise_sigma: 0.0, ..small() };
        let clean = generate_scene(&r).unwrap();
        assert_eq!(generate_rgbd_like(&r, 0.0).unwrap(), clean);
        let d1 = generate_rgbd_like(&r, 1.0).unwrap();
        let d2 = generate_rgbd_like(&r, 2.0).unwrap();
        for ((c, a), b) in clean.positions.iter().zip(&d1.positions).zip(&d2.positions) {
            let (da, db) = (a[1] - c[1], b[1] - c[1]);
            assert!((db - 4.0 * da).abs() < 1e-12);
            assert_eq!((a[0], a[2]), (c[0], c[2]));
        }
        let rms = (d1.positions.iter().zip(&clean.positions).map(|(a, c)| (a[1] - c[1]).powi(2)).sum::<f64>()
            / clean.len() as f64)
            .sqrt();
        assert!((rms - RGBD_SIGMA0).abs() < 0.1 * RGBD_SIGMA0);
    }
}
