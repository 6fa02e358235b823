//! Command-line front end: scene simulation, sequence labeling, IoU
//! evaluation, clean-map building, and PLY export.
//!
//! Exit codes: 0 success, 1 validation or format error, 2 filesystem error.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dols_core::eval::{compute_iou, measure_throughput};
use dols_core::io::{self, IoError, SequenceLayout, SequenceManifest};
use dols_core::mapping::{build_clean_map, DEFAULT_MAP_DOWNSAMPLE, DEFAULT_MAP_RANGE};
use dols_core::pipeline::{run_two_pass, DirectoryScans, ScanProvider, SequenceConfig};
use dols_core::sim::{self, SceneSpec};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "dols",
    version,
    about = "Offline dynamic-object labeling for organized LiDAR sequences"
)]
struct Cli {
    /// Worker threads for scan-parallel stages (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Seed override for every stochastic component of the subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene into a sequence directory.
    Simulate(SimulateArgs),
    /// Label the dynamic points of a sequence.
    Label(LabelArgs),
    /// Score predicted label rasters against ground truth.
    Eval(EvalArgs),
    /// Aggregate labeled scans into a cleaned static map.
    CleanMap(CleanMapArgs),
    /// Convert one scan (optionally with labels) to a PLY point cloud.
    ExportPly(ExportPlyArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Preset name (static-room, movers-mixed, stop-and-go, crowd) or a
    /// scene TOML path.
    #[arg(long)]
    scene: String,
    /// Output sequence directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LabelArgs {
    /// Sequence directory holding scans/ and trajectory.txt.
    #[arg(long)]
    input: PathBuf,
    /// Where labels/ and labels_manifest.json go (default: the input dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// key=value config file applied over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single key=value override; repeatable, applied after --config and
    /// --seed.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Also write the per-stage throughput report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted labels_NNNNNN.bin rasters.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth labels_NNNNNN.bin rasters.
    #[arg(long)]
    truth: PathBuf,
    /// Report path; a .json suffix selects JSON, anything else text.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct CleanMapArgs {
    /// Sequence directory holding scans/ and trajectory.txt.
    #[arg(long)]
    input: PathBuf,
    /// Label directory (default: labels/ under the input dir).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Output PLY for the static map.
    #[arg(long)]
    out: PathBuf,
    /// Optional PLY for the dynamic layer.
    #[arg(long)]
    dynamic_out: Option<PathBuf>,
    /// Sensor-range cutoff, metres.
    #[arg(long, default_value_t = DEFAULT_MAP_RANGE)]
    max_range: f64,
    /// Downsample voxel edge, metres.
    #[arg(long, default_value_t = DEFAULT_MAP_DOWNSAMPLE)]
    downsample: f64,
}

#[derive(Args)]
struct ExportPlyArgs {
    /// Scan file to convert.
    #[arg(long)]
    scan: PathBuf,
    /// Matching label raster; omitted means all points labeled 0.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Output PLY path.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are not errors.
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(exit_code(&e));
    }
}

/// 2 for filesystem trouble, 1 for everything else (validation, formats,
/// misalignment).
fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if let Some(io_err) = cause.downcast_ref::<IoError>() {
            if io_err.is_filesystem() {
                return 2;
            }
            return 1;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("thread pool")?;
    match cli.command {
        Command::Simulate(args) => simulate(args, cli.seed),
        Command::Label(args) => label(args, cli.seed),
        Command::Eval(args) => eval(args),
        Command::CleanMap(args) => clean_map(args),
        Command::ExportPly(args) => export_ply(args),
    }
}

fn simulate(args: SimulateArgs, seed: Option<u64>) -> Result<()> {
    let mut spec = load_scene(&args.scene)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    std::fs::create_dir_all(&args.out)
        .map_err(IoError::Io)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let manifest = sim::generate_sequence(&spec, &args.out)
        .with_context(|| format!("rendering scene {}", spec.name))?;
    println!(
        "wrote {} scans ({}x{}) to {}",
        manifest.scan_count,
        manifest.rows,
        manifest.cols,
        args.out.display()
    );
    Ok(())
}

fn load_scene(scene: &str) -> Result<SceneSpec> {
    if sim::PRESET_NAMES.contains(&scene) {
        return Ok(sim::preset(scene)?);
    }
    let path = Path::new(scene);
    if path.exists() {
        return SceneSpec::load(path).with_context(|| format!("loading {}", path.display()));
    }
    bail!(
        "{scene:?} is neither a preset ({}) nor an existing file",
        sim::PRESET_NAMES.join(", ")
    );
}

fn label(args: LabelArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = SequenceConfig::default();
    if let Some(path) = &args.config {
        let pairs = io::read_config_file(path)
            .with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_pairs(&pairs).context("config file")?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("--set {kv:?}: expected KEY=VALUE"))?;
        cfg.apply(k.trim(), v.trim())
            .with_context(|| format!("--set {kv:?}"))?;
    }
    cfg.validate()?;

    let out_root = args.out.as_deref().unwrap_or(&args.input).to_path_buf();
    let in_layout = SequenceLayout::new(&args.input);
    let out_layout = SequenceLayout::new(&out_root);
    std::fs::create_dir_all(out_layout.label_dir())
        .map_err(IoError::Io)
        .with_context(|| format!("creating {}", out_layout.label_dir().display()))?;

    let provider = DirectoryScans::open(&args.input)
        .with_context(|| format!("opening sequence {}", args.input.display()))?;
    let traj = io::read_trajectory(&in_layout.trajectory_path())
        .with_context(|| format!("reading {}", in_layout.trajectory_path().display()))?;

    let mut files = BTreeMap::new();
    let mut dims: Option<(usize, usize)> = None;
    let summary = run_two_pass(&provider, &traj, &cfg, |i, scan, labels, _| {
        dims.get_or_insert((scan.rows(), scan.cols()));
        let path = out_layout.label_path(i);
        io::write_labels(&path, labels)?;
        files.insert(format!("labels/labels_{i:06}.bin"), io::digest_file(&path)?);
        Ok(())
    })?;

    let (rows, cols) = dims.unwrap_or((0, 0));
    // The input manifest is optional; fall back to the directory name.
    let source = io::read_manifest(&in_layout.manifest_path()).ok();
    let name = source.as_ref().map(|m| m.name.clone()).unwrap_or_else(|| {
        args.input
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sequence".to_string())
    });
    let extra: BTreeMap<String, String> = cfg.to_pairs().into_iter().collect();
    let manifest = SequenceManifest {
        name,
        scan_count: provider.len(),
        rows,
        cols,
        rate_hz: source.map(|m| m.rate_hz).unwrap_or(0.0),
        files,
        extra,
    };
    io::write_manifest(&out_root.join("labels_manifest.json"), &manifest)?;

    let throughput = measure_throughput(&summary.stats);
    print!("{}", throughput.to_text());
    println!(
        "free-space pass: {:.2} s total",
        summary.free_pass_seconds
    );
    let dynamic: usize = summary.stats.iter().map(|s| s.dynamic_points).sum();
    println!(
        "labeled {} scans, {} dynamic points",
        provider.len(),
        dynamic
    );
    if let Some(report) = &args.report {
        let json = serde_json::to_string_pretty(&throughput)?;
        std::fs::write(report, json + "\n").map_err(IoError::Io)?;
    }
    Ok(())
}

/// labels_NNNNNN.bin rasters in `dir`, sorted and contiguity-checked.
fn read_label_dir(dir: &Path) -> Result<Vec<Vec<u32>>> {
    let mut indexed = Vec::new();
    let entries = std::fs::read_dir(dir)
        .map_err(IoError::Io)
        .with_context(|| format!("listing {}", dir.display()))?;
    for entry in entries {
        let name = entry.map_err(IoError::Io)?.file_name();
        let name = name.to_string_lossy();
        if let Some(num) = name
            .strip_prefix("labels_")
            .and_then(|s| s.strip_suffix(".bin"))
        {
            let idx: usize = num
                .parse()
                .map_err(|_| anyhow!("unexpected label file name {name}"))?;
            indexed.push(idx);
        }
    }
    indexed.sort_unstable();
    for (want, &got) in indexed.iter().enumerate() {
        if want != got {
            bail!("label files in {} skip index {want}", dir.display());
        }
    }
    indexed
        .iter()
        .map(|&i| {
            let path = dir.join(format!("labels_{i:06}.bin"));
            io::read_labels(&path).with_context(|| format!("reading {}", path.display()))
        })
        .collect()
}

fn eval(args: EvalArgs) -> Result<()> {
    let pred = read_label_dir(&args.pred)?;
    let truth = read_label_dir(&args.truth)?;
    let report = compute_iou(&pred, &truth)?;
    println!(
        "sequence iou {:.6}, mean per-scan iou {:.6} ({} scans, tp {} fp {} fn {})",
        report.sequence_iou,
        report.mean_scan_iou,
        report.per_scan.len(),
        report.true_pos,
        report.false_pos,
        report.false_neg
    );
    if let Some(path) = &args.report {
        let body = if path.extension().is_some_and(|e| e == "json") {
            serde_json::to_string_pretty(&report)? + "\n"
        } else {
            report.to_text()
        };
        std::fs::write(path, body)
            .map_err(IoError::Io)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn clean_map(args: CleanMapArgs) -> Result<()> {
    let layout = SequenceLayout::new(&args.input);
    let provider = DirectoryScans::open(&args.input)
        .with_context(|| format!("opening sequence {}", args.input.display()))?;
    let traj = io::read_trajectory(&layout.trajectory_path())?;
    let label_dir = args
        .labels
        .clone()
        .unwrap_or_else(|| layout.label_dir());
    let labels = read_label_dir(&label_dir)?;

    let mut scans = Vec::with_capacity(provider.len());
    for i in 0..provider.len() {
        scans.push(provider.load(i)?);
    }
    let map = build_clean_map(&scans, &labels, &traj, args.max_range, args.downsample)?;

    let to_ply = |points: &[dols_core::mapping::MapPoint]| -> Vec<io::PlyPoint> {
        points
            .iter()
            .map(|p| io::PlyPoint {
                x: p.position.x as f32,
                y: p.position.y as f32,
                z: p.position.z as f32,
                intensity: p.intensity,
                label: p.label,
            })
            .collect()
    };
    io::write_ply(&args.out, &to_ply(&map.static_points))?;
    println!(
        "static map: {} points -> {}",
        map.static_points.len(),
        args.out.display()
    );
    if let Some(path) = &args.dynamic_out {
        io::write_ply(path, &to_ply(&map.dynamic_points))?;
        println!(
            "dynamic layer: {} points -> {}",
            map.dynamic_points.len(),
            path.display()
        );
    }
    Ok(())
}

fn export_ply(args: ExportPlyArgs) -> Result<()> {
    let scan = io::read_scan(&args.scan)?;
    let labels = match &args.labels {
        Some(path) => {
            let l = io::read_labels(path)?;
            if l.len() != scan.len() {
                bail!(
                    "{} labels but the scan has {} pixels",
                    l.len(),
                    scan.len()
                );
            }
            l
        }
        None => vec![0; scan.len()],
    };
    let points: Vec<io::PlyPoint> = scan
        .iter_valid()
        .map(|(idx, p)| io::PlyPoint {
            x: p.x,
            y: p.y,
            z: p.z,
            intensity: p.intensity,
            label: labels[idx],
        })
        .collect();
    io::write_ply(&args.out, &points)?;
    println!("{} points -> {}", points.len(), args.out.display());
    Ok(())
}
