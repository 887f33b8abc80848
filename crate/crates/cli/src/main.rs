use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use orchard_seg::autodiff::ParameterStore;
use orchard_seg::cloud::{read_cloud, remove_outliers, voxel_downsample, write_cloud, CloudFormat};
use orchard_seg::config::KvConfig;
use orchard_seg::fusion::{accumulate, colorize, read_calibration, read_ppm};
use orchard_seg::metrics::ConfusionMatrix;
use orchard_seg::octree::{build_partition, PartitionSpec};
use orchard_seg::segnet::{infer_scene, Fusion, NetworkSpec};
use orchard_seg::synth::{generate_rgbd_like, generate_scene, ColorMode, SceneRecipe};
use orchard_seg::train::{make_dataset, metrics_csv, train, TrainConfig, TrainingSample};
use orchard_seg::{Error, PointCloud, VoxelSpec};

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

const NETWORK_CONFIG: &str = "network.cfg";
const CHECKPOINT: &str = "model.fpn";
const MANIFEST: &str = "manifest.json";

#[derive(Parser)]
#[command(name = "orchard-seg", version, about = "Fruit segmentation on colorized point clouds")]
struct Cli {
    /// More progress output on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only warnings and errors on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BlockSize {
    #[value(name = "4096")]
    B4096,
    #[value(name = "8192")]
    B8192,
}

impl BlockSize {
    fn points(self) -> usize {
        match self {
            BlockSize::B4096 => 4096,
            BlockSize::B8192 => 8192,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Color LiDAR sweeps from a calibrated camera image.
    Colorize {
        /// Sweeps in the LiDAR frame (PLY or PCD); colored results are concatenated.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Voxel-grid downsampling followed by statistical outlier removal.
    Voxelize {
        input: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        cell: f64,
        /// Neighbours used by the outlier filter; 0 disables it.
        #[arg(long, default_value_t = 16)]
        outlier_k: usize,
        #[arg(long, default_value_t = 2.0)]
        outlier_std: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a scene into octree blocks written as separate PLY files.
    Partition {
        input: PathBuf,
        #[arg(long, value_enum, default_value = "4096")]
        blocks: BlockSize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Crop training blocks from labeled scenes.
    MakeDataset {
        #[arg(required = true)]
        scenes: Vec<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        min_fruit_pts: Option<usize>,
        #[arg(long)]
        seeds_per_scene: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network on a dataset directory.
    Train {
        /// Directory written by `make-dataset`.
        #[arg(long)]
        data: PathBuf,
        /// Validation dataset; without it every tenth sample is held out.
        #[arg(long)]
        val: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_parser = parse_fusion)]
        fusion: Option<Fusion>,
        #[arg(long)]
        alpha_nobj: Option<f64>,
        #[arg(long)]
        alpha_obj: Option<f64>,
        #[arg(long)]
        min_fruit_pts: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Output directory for the checkpoint, metrics log and config copy.
        #[arg(long)]
        out: PathBuf,
    },
    /// Label every point of a scene.
    Infer {
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Network config; defaults to `network.cfg` next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class IoU and mIoU of a prediction against ground truth, as CSV.
    Eval { truth: PathBuf, pred: PathBuf },
    /// Generate a labeled synthetic orchard scene.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "separable", value_parser = parse_mode)]
        mode: ColorMode,
        #[arg(long)]
        fruit_count: Option<usize>,
        #[arg(long)]
        leaf_count: Option<usize>,
        /// Surface density in points per square meter.
        #[arg(long)]
        density: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
        /// Emulate a depth camera at this distance (meters).
        #[arg(long)]
        distance: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct CommonArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    blocks: Option<BlockSize>,
}

fn parse_fusion(s: &str) -> Result<Fusion, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<ColorMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Data(Error::Io(e))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Data(Error::InvalidInput(format!("manifest: {e}")))
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn format_of(path: &Path) -> CliResult<CloudFormat> {
    CloudFormat::from_path(path)
        .ok_or_else(|| Failure::Usage(format!("{}: expected a .ply or .pcd file", path.display())))
}

fn load(path: &Path) -> CliResult<PointCloud> {
    let cloud = read_cloud(path, format_of(path)?)?;
    info!("read {} points from {}", cloud.len(), path.display());
    Ok(cloud)
}

fn save(cloud: &PointCloud, path: &Path) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_cloud(cloud, path, format_of(path)?)?;
    info!("wrote {} points to {}", cloud.len(), path.display());
    Ok(())
}

fn load_config(path: Option<&Path>) -> CliResult<KvConfig> {
    Ok(match path {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    })
}

#[derive(Serialize)]
struct BlockEntry {
    file: String,
    points: usize,
    depth: usize,
    oversized: bool,
    min: [f64; 3],
    max: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct SampleEntry {
    file: String,
    scene: usize,
    seed_point: usize,
    fruit_points: usize,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    block_size: usize,
    min_object_points: usize,
    seeds_per_scene: usize,
    seed: u64,
    scenes: Vec<String>,
    samples: Vec<SampleEntry>,
}

#[derive(Serialize)]
struct RecipeManifest {
    extent: [f64; 3],
    fruit_count: usize,
    fruit_radius: f64,
    leaf_count: usize,
    point_density: f64,
    color_mode: String,
    noise_sigma: f64,
    seed: u64,
    distance: Option<f64>,
    points: usize,
    fruit_points: usize,
}

#[derive(Serialize)]
struct InferSummary {
    points: usize,
    blocks: usize,
    class_counts: Vec<usize>,
    runtime_s: f64,
    output: String,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Colorize { inputs, image, calib, out } => {
            let (cam, ext) = read_calibration(BufReader::new(fs::File::open(&calib)?))?;
            let img = read_ppm(BufReader::new(fs::File::open(&image)?))?;
            let frames = inputs
                .iter()
                .map(|p| Ok(colorize(&load(p)?, &img, &cam, &ext)?))
                .collect::<CliResult<Vec<_>>>()?;
            let merged = accumulate(&frames)?;
            let total: usize = inputs.len();
            info!("{} of the points from {total} sweep(s) are visible", merged.len());
            save(&merged, &out)
        }
        Command::Voxelize { input, cell, outlier_k, outlier_std, out } => {
            let cloud = load(&input)?;
            let mut down = voxel_downsample(&cloud, VoxelSpec::new(cell)?)?;
            if outlier_k > 0 && down.len() > outlier_k {
                down = remove_outliers(&down, outlier_k, outlier_std)?;
            }
            save(&down, &out)
        }
        Command::Partition { input, blocks, out } => {
            let cloud = load(&input)?;
            let leaves = build_partition(&cloud, PartitionSpec::new(blocks.points()))?;
            fs::create_dir_all(&out)?;
            let mut entries = Vec::with_capacity(leaves.len());
            for (i, leaf) in leaves.iter().enumerate() {
                let file = format!("block_{i:05}.ply");
                write_cloud(&cloud.select(&leaf.indices), &out.join(&file), CloudFormat::PlyAscii)?;
                entries.push(BlockEntry {
                    file,
                    points: leaf.indices.len(),
                    depth: leaf.depth,
                    oversized: leaf.oversized,
                    min: leaf.aabb.min,
                    max: leaf.aabb.max,
                });
            }
            info!("{} leaves written to {}", entries.len(), out.display());
            write_json(&entries, &out.join(MANIFEST))
        }
        Command::MakeDataset { scenes, common, min_fruit_pts, seeds_per_scene, out } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(b) = common.blocks {
                cfg.set("network.block_size", b.points());
            }
            let block_size = cfg.get("network.block_size")?.unwrap_or(4096);
            let mut tc = TrainConfig::from_config(&cfg, block_size)?;
            if let Some(m) = min_fruit_pts {
                tc.min_object_points = m;
            }
            if let Some(s) = seeds_per_scene {
                tc.seeds_per_scene = s;
            }
            let seed = common.seed.unwrap_or(tc.seed);
            tc.validate(block_size)?;
            let clouds = scenes.iter().map(|p| load(p)).collect::<CliResult<Vec<_>>>()?;
            let samples = make_dataset(&clouds, block_size, tc.seeds_per_scene, tc.min_object_points, seed)?;
            info!(
                "kept {} of {} crops (min fruit points {})",
                samples.len(),
                tc.seeds_per_scene * clouds.len(),
                tc.min_object_points
            );
            fs::create_dir_all(&out)?;
            let mut entries = Vec::with_capacity(samples.len());
            for (i, s) in samples.iter().enumerate() {
                let file = format!("sample_{i:05}.ply");
                write_cloud(&s.block, &out.join(&file), CloudFormat::PlyAscii)?;
                entries.push(SampleEntry {
                    file,
                    scene: s.scene,
                    seed_point: s.seed_point,
                    fruit_points: s.object_points(),
                });
            }
            let manifest = DatasetManifest {
                block_size,
                min_object_points: tc.min_object_points,
                seeds_per_scene: tc.seeds_per_scene,
                seed,
                scenes: scenes.iter().map(|p| p.display().to_string()).collect(),
                samples: entries,
            };
            write_json(&manifest, &out.join(MANIFEST))
        }
        Command::Train { data, val, common, fusion, alpha_nobj, alpha_obj, min_fruit_pts, epochs, out } => {
            let mut cfg = load_config(common.config.as_deref())?;
            let (manifest, samples) = read_dataset(&data)?;
            if cfg.raw("network.block_size").is_none() {
                cfg.set("network.block_size", manifest.block_size);
            }
            if let Some(b) = common.blocks {
                cfg.set("network.block_size", b.points());
            }
            if let Some(f) = fusion {
                cfg.set("network.fusion", f);
            }
            if let Some(a) = alpha_nobj {
                cfg.set("train.alpha_nobj", a);
            }
            if let Some(a) = alpha_obj {
                cfg.set("train.alpha_obj", a);
            }
            if let Some(m) = min_fruit_pts {
                cfg.set("train.min_fruit_pts", m);
            }
            if let Some(e) = epochs {
                cfg.set("train.epochs", e);
            }
            if let Some(s) = common.seed {
                cfg.set("train.seed", s);
            }
            let spec = NetworkSpec::from_config(&cfg)?;
            let tc = TrainConfig::from_config(&cfg, spec.block_size)?;
            let kept: Vec<TrainingSample> = samples
                .into_iter()
                .filter(|s| s.object_points() >= tc.min_object_points)
                .collect();
            let (train_set, val_set) = match val {
                Some(v) => (kept, read_dataset(&v)?.1),
                None => {
                    let (mut t, mut v) = (Vec::new(), Vec::new());
                    for (i, s) in kept.into_iter().enumerate() {
                        if i % 10 == 9 {
                            v.push(s);
                        } else {
                            t.push(s);
                        }
                    }
                    (t, v)
                }
            };
            info!(
                "training {} on {} samples ({} validation), {} epochs",
                spec.fusion,
                train_set.len(),
                val_set.len(),
                tc.epochs
            );
            let outcome = train(&train_set, &spec, &tc, &val_set)?;
            fs::create_dir_all(&out)?;
            outcome.params.save(&out.join(CHECKPOINT))?;
            fs::write(out.join("metrics.csv"), metrics_csv(&outcome.log))?;
            let mut full = KvConfig::default();
            spec.write_config(&mut full);
            tc.write_config(&mut full);
            fs::write(out.join(NETWORK_CONFIG), full.to_text())?;
            info!("best epoch {}; checkpoint in {}", outcome.best_epoch, out.display());
            Ok(())
        }
        Command::Infer { input, checkpoint, config, seed, out } => {
            let cfg_path = config.unwrap_or_else(|| checkpoint.with_file_name(NETWORK_CONFIG));
            let spec = NetworkSpec::from_config(&KvConfig::load(&cfg_path)?)?;
            let params = ParameterStore::load(&checkpoint)?;
            let cloud = load(&input)?;
            let start = Instant::now();
            let partition = PartitionSpec::new(spec.block_size);
            let blocks: usize = build_partition(&cloud, partition)?
                .iter()
                .map(|l| l.indices.len().div_ceil(spec.block_size))
                .sum();
            let labels = infer_scene(&cloud, &spec, &params, partition, seed)?;
            let runtime_s = start.elapsed().as_secs_f64();
            let mut class_counts = vec![0; spec.n_classes];
            for &l in &labels {
                class_counts[l as usize] += 1;
            }
            let labeled = PointCloud { labels: Some(labels), ..cloud };
            save(&labeled, &out)?;
            let summary = InferSummary {
                points: labeled.len(),
                blocks,
                class_counts,
                runtime_s,
                output: out.display().to_string(),
            };
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
        Command::Eval { truth, pred } => {
            let t = load(&truth)?;
            let p = load(&pred)?;
            let (Some(tl), Some(pl)) = (t.labels.as_ref(), p.labels.as_ref()) else {
                return Err(Error::InvalidInput("both clouds need a label property".into()).into());
            };
            if tl.len() != pl.len() {
                return Err(Error::InvalidInput(format!("{} truth labels vs {} predictions", tl.len(), pl.len())).into());
            }
            let n = tl.iter().chain(pl).max().map_or(2, |m| (*m as usize + 1).max(2));
            let mut cm = ConfusionMatrix::new(n);
            cm.accumulate(tl, pl)?;
            let (per_class, mean) = cm.miou()?;
            let stdout = io::stdout();
            let mut w = stdout.lock();
            writeln!(w, "class,iou")?;
            for (c, iou) in per_class.iter().enumerate() {
                writeln!(w, "{c},{}", iou.map_or("absent".to_string(), |v| v.to_string()))?;
            }
            writeln!(w, "mean,{mean}")?;
            Ok(())
        }
        Command::Synth { seed, mode, fruit_count, leaf_count, density, noise, distance, out } => {
            let d = SceneRecipe::default();
            let recipe = SceneRecipe {
                seed,
                color_mode: mode,
                fruit_count: fruit_count.unwrap_or(d.fruit_count),
                leaf_count: leaf_count.unwrap_or(d.leaf_count),
                point_density: density.unwrap_or(d.point_density),
                noise_sigma: noise.unwrap_or(d.noise_sigma),
                ..d
            };
            let cloud = match distance {
                Some(dist) => generate_rgbd_like(&recipe, dist)?,
                None => generate_scene(&recipe)?,
            };
            save(&cloud, &out)?;
            let manifest = RecipeManifest {
                extent: recipe.extent,
                fruit_count: recipe.fruit_count,
                fruit_radius: recipe.fruit_radius,
                leaf_count: recipe.leaf_count,
                point_density: recipe.point_density,
                color_mode: recipe.color_mode.to_string(),
                noise_sigma: recipe.noise_sigma,
                seed,
                distance,
                points: cloud.len(),
                fruit_points: cloud.label_histogram(2)[1],
            };
            write_json(&manifest, &out.with_extension("json"))
        }
    }
}

fn read_dataset(dir: &Path) -> CliResult<(DatasetManifest, Vec<TrainingSample>)> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let samples = manifest
        .samples
        .iter()
        .map(|e| {
            let block = read_cloud(&dir.join(&e.file), CloudFormat::PlyAscii)?;
            if block.len() != manifest.block_size || !block.has_labels() {
                return Err(Error::InvalidInput(format!(
                    "{}: expected {} labeled points",
                    e.file, manifest.block_size
                ))
                .into());
            }
            Ok(TrainingSample {
                block,
                scene: e.scene,
                seed_point: e.seed_point,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    info!("loaded {} samples from {}", samples.len(), dir.display());
    Ok((manifest, samples))
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("ORCHARD_SEG_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| format!("ORCHARD_SEG_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("ORCHARD_SEG_LOG")
        .format_timestamp_millis()
        .init();
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
