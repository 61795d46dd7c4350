//! Command-line pipeline: synthesize shell datasets, precompute operator
//! caches, train/evaluate models, verify gradients, extract Grad-CAM
//! heatmaps, and inspect meshes or caches.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. A flat
//! `key=value` config file can seed any flag; explicit flags win.
//! `TETCNN_THREADS` bounds the worker pool.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use tetcnn::cache::load_cache;
use tetcnn::coarsen::build_hierarchy;
use tetcnn::dataset::{
    generate_dataset, load_samples, precompute, read_manifest, DatasetKind, GenConfig,
};
use tetcnn::gradcam::{export_heatmap_text, export_heatmap_vtk, gradcam_heatmap};
use tetcnn::lbo::{assemble_operator, Lumping, OperatorKind};
use tetcnn::network::{
    build_model, evaluate, gradcheck::run_gradcheck, load_checkpoint, save_checkpoint, train,
    AdamConfig, Faults, MeshSample, ModelConfig, Target, Task, TrainConfig,
};
use tetcnn::rng::{subseed, Purpose};
use tetcnn::tetmesh::{jittered_box_mesh, parse_tetgen_with_id, Edge, TetMesh, TET_EDGES};

#[derive(Parser)]
#[command(name = "tetcnn", about = "Spectral CNNs on tetrahedral meshes", version)]
struct Cli {
    /// Flat key=value config file; explicit flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shell dataset (meshes + manifest).
    Synth(SynthArgs),
    /// Assemble operators and coarsening hierarchies into cache files.
    Precompute(PrecomputeArgs),
    /// Cross-validated training; writes checkpoints, a log, and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest split.
    Eval(EvalArgs),
    /// Finite-difference verification of the backward pass.
    Gradcheck(GradcheckArgs),
    /// Grad-CAM heatmap extraction for one mesh.
    Gradcam(GradcamArgs),
    /// Print statistics for a mesh or an operator cache.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// classify or regress.
    #[arg(long)]
    task: Option<String>,
    /// Classification cohort flavor: thickness or anomaly.
    #[arg(long)]
    kind: Option<String>,
    /// Meshes per class (classification) or total meshes (regression).
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    subdivision: Option<usize>,
    #[arg(long)]
    thickness_noise: Option<f64>,
    /// Smooth radial warp amplitude (shape confounder).
    #[arg(long)]
    warp: Option<f64>,
    /// Class mean thicknesses as fractions of the radius, e.g. 0.15,0.25.
    #[arg(long)]
    class_thickness: Option<String>,
    /// Meshes per class held out as split=test.
    #[arg(long)]
    holdout_per_class: Option<usize>,
    #[arg(long)]
    anomaly_multiplier: Option<f64>,
    #[arg(long)]
    anomaly_volume_fraction: Option<f64>,
}

#[derive(Args)]
struct PrecomputeArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// lbo or graph.
    #[arg(long)]
    operator: Option<String>,
    /// fem-quarter or paper-literal.
    #[arg(long)]
    lumping: Option<String>,
    /// Graclus stages to build.
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Chebyshev order K.
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    operator: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Decoupled weight decay.
    #[arg(long)]
    wd: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Conv widths, e.g. 16,32,64,128,128.
    #[arg(long)]
    widths: Option<String>,
    #[arg(long)]
    fc_hidden: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// cv, test, or all.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Relative-error tolerance.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args)]
struct GradcamArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Mesh path prefix: reads <mesh>.node and <mesh>.ele.
    #[arg(long)]
    mesh: Option<PathBuf>,
    /// Optional existing operator cache; rebuilt from the mesh otherwise.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    class: Option<usize>,
    #[arg(long)]
    knn: Option<usize>,
    /// Output VTK path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional two-column text output path.
    #[arg(long)]
    text: Option<PathBuf>,
    /// Max-normalize the heatmap to [0, 1].
    #[arg(long)]
    normalize: bool,
    /// Hierarchy stages when rebuilding without a cache.
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct InspectArgs {
    /// Mesh path prefix: reads <mesh>.node and <mesh>.ele.
    #[arg(long)]
    mesh: Option<PathBuf>,
    /// Operator cache path.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Locality probe "vertex,power": prints hop support of L^k delta_i.
    #[arg(long)]
    locality: Option<String>,
}

/// Flat key=value settings from --config; '#' lines are comments.
struct FileConfig {
    values: HashMap<String, String>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self, String> {
        let mut values = HashMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("config {}: {e}", path.display()))?;
            for (ln, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| format!("config line {}: expected key=value", ln + 1))?;
                values.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(FileConfig { values })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, String> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| format!("config key '{key}': cannot parse '{raw}'")),
        }
    }
}

/// Flag wins, then config file, then the default.
fn pick<T: FromStr + Clone>(
    flag: Option<T>,
    config: &FileConfig,
    key: &str,
    default: T,
) -> Result<T, String> {
    Ok(flag.or(config.get::<T>(key)?).unwrap_or(default))
}

fn pick_required<T: FromStr + Clone>(
    flag: Option<T>,
    config: &FileConfig,
    key: &str,
) -> Result<T, String> {
    flag.or(config.get::<T>(key).ok().flatten())
        .ok_or_else(|| format!("missing required option --{}", key.replace('_', "-")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(threads) = std::env::var("TETCNN_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let config = match FileConfig::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args, &config),
        Command::Precompute(args) => cmd_precompute(args, &config),
        Command::Train(args) => cmd_train(args, &config),
        Command::Eval(args) => cmd_eval(args, &config),
        Command::Gradcheck(args) => cmd_gradcheck(args, &config),
        Command::Gradcam(args) => cmd_gradcam(args, &config),
        Command::Inspect(args) => cmd_inspect(args, &config),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn runtime(err: impl std::fmt::Display) -> Failure {
    Failure::Runtime(err.to_string())
}

fn cmd_synth(args: SynthArgs, config: &FileConfig) -> Result<ExitCode, Failure> {
    let task = pick_required::<String>(args.task, config, "task").map_err(usage)?;
    let per_class = pick_required::<usize>(args.per_class, config, "per_class").map_err(usage)?;
    let out = pick_required::<PathBuf>(args.out, config, "out").map_err(usage)?;
    let seed = pick(args.seed, config, "seed", 0u64).map_err(usage)?;
    let kind = match task.as_str() {
        "regress" => DatasetKind::Regression,
        "classify" => {
            let kind = pick(args.kind, config, "kind", "thickness".to_string()).map_err(usage)?;
            DatasetKind::parse(&kind)
                .filter(|k| *k != DatasetKind::Regression)
                .ok_or_else(|| usage(format!("unknown kind '{kind}'")))?
        }
        other => return Err(usage(format!("unknown task '{other}'"))),
    };
    let mut gen = GenConfig::standard(kind, per_class, seed);
    gen.subdivision =
        pick(args.subdivision, config, "subdivision", gen.subdivision).map_err(usage)?;
    gen.thickness_noise =
        pick(args.thickness_noise, config, "thickness_noise", gen.thickness_noise)
            .map_err(usage)?;
    gen.vertex_perturbation =
        pick(args.warp, config, "warp", gen.vertex_perturbation).map_err(usage)?;
    gen.holdout_per_class =
        pick(args.holdout_per_class, config, "holdout_per_class", gen.holdout_per_class)
            .map_err(usage)?;
    gen.anomaly_multiplier =
        pick(args.anomaly_multiplier, config, "anomaly_multiplier", gen.anomaly_multiplier)
            .map_err(usage)?;
    gen.anomaly_volume_fraction = pick(
        args.anomaly_volume_fraction,
        config,
        "anomaly_volume_fraction",
        gen.anomaly_volume_fraction,
    )
    .map_err(usage)?;
    if let Some(ct) = args.class_thickness.or(config.values.get("class_thickness").cloned()) {
        let parts: Vec<f64> = ct
            .split(',')
            .map(|p| p.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| usage(format!("bad --class-thickness '{ct}'")))?;
        if parts.len() != 2 {
            return Err(usage("--class-thickness needs two comma-separated values"));
        }
        gen.class_thickness = [parts[0], parts[1]];
    }
    let manifest = generate_dataset(&gen, &out).map_err(runtime)?;
    println!(
        "synth: wrote {} meshes and manifest to {}",
        manifest.records.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_precompute(args: PrecomputeArgs, config: &FileConfig) -> Result<ExitCode, Failure> {
    let manifest_path =
        pick_required::<PathBuf>(args.manifest, config, "manifest").map_err(usage)?;
    let operator =
        parse_operator(pick(args.operator, config, "operator", "lbo".into()).map_err(usage)?)?;
    let lumping = parse_lumping(
        pick(args.lumping, config, "lumping", "fem-quarter".into()).map_err(usage)?,
    )?;
    let levels = pick(args.levels, config, "levels", 8usize).map_err(usage)?;
    let seed = pick(args.seed, config, "seed", 0u64).map_err(usage)?;
    let manifest = read_manifest(&manifest_path).map_err(runtime)?;
    let summary = precompute(&manifest, operator, lumping, levels, seed).map_err(runtime)?;
    println!(
        "precompute: {} built, {} skipped, {} failed",
        summary.built,
        summary.skipped,
        summary.failed.len()
    );
    for (id, detail) in &summary.failed {
        eprintln!("  failed {id}: {detail}");
    }
    if summary.failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}

fn parse_operator(s: String) -> Result<OperatorKind, Failure> {
    OperatorKind::parse(&s).ok_or_else(|| usage(format!("unknown operator '{s}'")))
}

fn parse_lumping(s: String) -> Result<Lumping, Failure> {
    Lumping::parse(&s).ok_or_else(|| usage(format!("unknown lumping '{s}'")))
}

fn parse_widths(s: &str) -> Result<Vec<usize>, Failure> {
    s.split(',')
        .map(|p| p.parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| usage(format!("bad widths '{s}'")))
}

fn cmd_train(args: TrainArgs, config: &FileConfig) -> Result<ExitCode, Failure> {
    let manifest_path =
        pick_required::<PathBuf>(args.manifest, config, "manifest").map_err(usage)?;
    let out = pick_required::<PathBuf>(args.out, config, "out").map_err(usage)?;
    let manifest = read_manifest(&manifest_path).map_err(runtime)?;
    let task = manifest.task();
    let seed = pick(args.seed, config, "seed", 0u64).map_err(usage)?;
    let order = pick(args.order, config, "order", 1usize).map_err(usage)?;
    let mut train_config = TrainConfig::standard(task, order, seed);
    train_config.operator =
        parse_operator(pick(args.operator, config, "operator", "lbo".into()).map_err(usage)?)?;
    train_config.epochs =
        pick(args.epochs, config, "epochs", train_config.epochs).map_err(usage)?;
    train_config.folds = pick(args.folds, config, "folds", train_config.folds).map_err(usage)?;
    train_config.batch_size =
        pick(args.batch_size, config, "batch_size", train_config.batch_size).map_err(usage)?;
    train_config.val_fraction =
        pick(args.val_fraction, config, "val_fraction", train_config.val_fraction)
            .map_err(usage)?;
    train_config.fc_hidden =
        pick(args.fc_hidden, config, "fc_hidden", train_config.fc_hidden).map_err(usage)?;
    train_config.adam = AdamConfig {
        lr: pick(args.lr, config, "lr", 1e-3).map_err(usage)?,
        weight_decay: pick(args.wd, config, "wd", 1e-4).map_err(usage)?,
        ..AdamConfig::default()
    };
    if let Some(w) = args.widths.or(config.values.get("widths").cloned()) {
        train_config.widths = parse_widths(&w)?;
    }

    std::fs::create_dir_all(&out).map_err(runtime)?;
    let loaded = load_samples(&manifest, train_config.operator).map_err(runtime)?;
    let cv: Vec<MeshSample> = loaded
        .iter()
        .filter(|l| l.record.split == "cv")
        .map(|l| l.sample.clone())
        .collect();
    if cv.is_empty() {
        return Err(Failure::Runtime("manifest has no split=cv records".into()));
    }
    let outcome = train(&cv, &train_config).map_err(runtime)?;

    // Training log: one line per (fold, epoch).
    let mut log = String::new();
    for r in &outcome.records {
        let _ = writeln!(
            log,
            "fold={} epoch={} train_loss={:.17e} val_loss={:.17e}",
            r.fold, r.epoch, r.train_loss, r.val_loss
        );
    }
    std::fs::write(out.join("train_log.txt"), log).map_err(runtime)?;

    // Checkpoints and metrics.
    let mut metrics = String::new();
    metrics.push_str("tetcnn-metrics v1\n");
    let _ = writeln!(metrics, "task {}", task.as_str());
    let _ = writeln!(metrics, "operator {}", train_config.operator.as_str());
    let _ = writeln!(metrics, "order {order}");
    let _ = writeln!(metrics, "folds {}", train_config.folds);
    for (k, fold) in outcome.folds.iter().enumerate() {
        let path = out.join(format!("fold_{k}.ckpt"));
        save_checkpoint(&fold.model, &path).map_err(runtime)?;
        match fold.metrics {
            tetcnn::network::EvalMetrics::Classification { acc, sen, spe } => {
                let _ = writeln!(
                    metrics,
                    "fold={k} best_epoch={} acc={acc:.17e} sen={sen:.17e} spe={spe:.17e}",
                    fold.best_epoch
                );
            }
            tetcnn::network::EvalMetrics::Regression { rmse } => {
                let _ = writeln!(
                    metrics,
                    "fold={k} best_epoch={} rmse={rmse:.17e}",
                    fold.best_epoch
                );
            }
        }
    }
    for (name, summary) in &outcome.summary {
        let _ = writeln!(
            metrics,
            "summary {name} mean={:.17e} sd={:.17e}",
            summary.mean, summary.sd
        );
    }
    std::fs::write(out.join("metrics.txt"), &metrics).map_err(runtime)?;
    for (name, summary) in &outcome.summary {
        println!("{name}: {:.4} +/- {:.4}", summary.mean, summary.sd);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs, config: &FileConfig) -> Result<ExitCode, Failure> {
    let checkpoint =
        pick_required::<PathBuf>(args.checkpoint, config, "checkpoint").map_err(usage)?;
    let manifest_path =
        pick_required::<PathBuf>(args.manifest, config, "manifest").map_err(usage)?;
    let split = pick(args.split, config, "split", "all".to_string()).map_err(usage)?;
    if !checkpoint.exists() {
        return Err(usage(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let model = load_checkpoint(&checkpoint).map_err(runtime)?;
    let manifest = read_manifest(&manifest_path).map_err(runtime)?;
    let loaded = load_samples(&manifest, model.config.operator).map_err(runtime)?;
    let samples: Vec<MeshSample> = loaded
        .iter()
        .filter(|l| split == "all" || l.record.split == split)
        .map(|l| l.sample.clone())
        .collect();
    if samples.is_empty() {
        return Err(Failure::Runtime(format!("no samples in split '{split}'")));
    }
    let idx: Vec<usize> = (0..samples.len()).collect();
    let (metrics, _) = evaluate(&model, &samples, &idx).map_err(runtime)?;
    match metrics {
        tetcnn::network::EvalMetrics::Classification { acc, sen, spe } => {
            println!("ACC {acc:.6}");
            println!("SEN {sen:.6}");
            println!("SPE {spe:.6}");
        }
        tetcnn::network::EvalMetrics::Regression { rmse } => println!("RMSE {rmse:.6}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs, config: &FileConfig) -> Result<ExitCode, Failure> {
    let seed = pick(args.seed, config, "seed", 0u64).map_err(usage)?;
    let tol = pick(args.tol, config, "tol", 1e-5).map_err(usage)?;
    // Toy instance: ~27-vertex jittered grid, two-block model.
    let mesh =
        jittered_box_mesh(3, 3, 3, [1.0, 1.0, 1.0], 0.15, subseed(seed, Purpose::Test, 0));
    let op = assemble_operator(&mesh, OperatorKind::Lbo, Lumping::FemQuarter).map_err(runtime)?;
    let hierarchy =
        Arc::new(build_hierarchy(&op, 2, subseed(seed, Purpose::Test, 1)).map_err(runtime)?);
    let feats = mesh.min_max_normalize();
    let features = Array2::from_shape_fn((mesh.n_vertices(), 3), |(i, c)| feats[i][c]);
    let sample = MeshSample::new("gradcheck", features.view(), hierarchy, Target::Label(1))
        .map_err(runtime)?;
    let model_config = ModelConfig {
        task: Task::Classify,
        order: 1,
        in_features: 3,
        widths: vec![4, 8],
        fc_hidden: 8,
        operator: OperatorKind::Lbo,
        lumping: Lumping::FemQuarter,
    };
    let model = build_model(&model_config, subseed(seed, Purpose::Init, 0));
    let report = run_gradcheck(&model, &sample, &Faults::default()).map_err(runtime)?;
    for (name, err) in &report.per_tensor {
        println!("{name}: max relative error {err:.3e}");
    }
    println!("input features: max relative error {:.3e}", report.input_features);
    println!(
        "overall max relative error {:.3e} (tolerance {tol:.1e})",
        report.max_relative_error
    );
    if report.passes(tol) {
        println!("gradcheck PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradcheck FAIL");
        Ok(ExitCode::from(1))
    }
}

fn read_mesh_pair(prefix: &Path) -> Result<TetMesh, Failure> {
    let node_path = prefix.with_extension("node");
    let ele_path = prefix.with_extension("ele");
    for p in [&node_path, &ele_path] {
        if !p.exists() {
            return Err(usage(format!("mesh file {} does not exist", p.display())));
        }
    }
    let node = std::fs::read_to_string(&node_path).map_err(runtime)?;
    let ele = std::fs::read_to_string(&ele_path).map_err(runtime)?;
    parse_tetgen_with_id(&node, &ele, &prefix.display().to_string()).map_err(runtime)
}

fn cmd_gradcam(args: GradcamArgs, config: &FileConfig) -> Result<ExitCode, Failure> {
    let checkpoint =
        pick_required::<PathBuf>(args.checkpoint, config, "checkpoint").map_err(usage)?;
    let mesh_prefix = pick_required::<PathBuf>(args.mesh, config, "mesh").map_err(usage)?;
    let out = pick_required::<PathBuf>(args.out, config, "out").map_err(usage)?;
    let class = pick(args.class, config, "class", 1usize).map_err(usage)?;
    let knn = pick(args.knn, config, "knn", 3usize).map_err(usage)?;
    let levels = pick(args.levels, config, "levels", 8usize).map_err(usage)?;
    let seed = pick(args.seed, config, "seed", 0u64).map_err(usage)?;
    if !checkpoint.exists() {
        return Err(usage(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let model = load_checkpoint(&checkpoint).map_err(runtime)?;
    let mesh = read_mesh_pair(&mesh_prefix)?;
    let hierarchy = match &args.cache {
        Some(path) => Arc::new(load_cache(path).map_err(runtime)?.hierarchy),
        None => {
            let op = assemble_operator(&mesh, model.config.operator, model.config.lumping)
                .map_err(runtime)?;
            Arc::new(
                build_hierarchy(&op, levels, subseed(seed, Purpose::Matching, 0))
                    .map_err(runtime)?,
            )
        }
    };
    let feats = mesh.min_max_normalize();
    let features = Array2::from_shape_fn((mesh.n_vertices(), 3), |(i, c)| feats[i][c]);
    let sample = MeshSample::new("gradcam", features.view(), hierarchy, Target::Label(1))
        .map_err(runtime)?;
    let heatmap =
        gradcam_heatmap(&model, &sample, &mesh, class, knn, args.normalize).map_err(runtime)?;
    export_heatmap_vtk(&heatmap, &mesh, &out).map_err(runtime)?;
    if let Some(text) = &args.text {
        export_heatmap_text(&heatmap, text).map_err(runtime)?;
    }
    let mass: f64 = heatmap.values.iter().sum();
    println!(
        "gradcam: class {class}, {} vertices, total mass {mass:.6e}, wrote {}",
        heatmap.values.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_inspect(args: InspectArgs, config: &FileConfig) -> Result<ExitCode, Failure> {
    let mesh_prefix: Option<PathBuf> = args.mesh.or(config.get("mesh").map_err(usage)?);
    let cache_path: Option<PathBuf> = args.cache.or(config.get("cache").map_err(usage)?);
    if mesh_prefix.is_none() && cache_path.is_none() {
        return Err(usage("inspect needs --mesh or --cache"));
    }
    if let Some(prefix) = mesh_prefix {
        let mesh = read_mesh_pair(&prefix)?;
        let report = mesh.validate();
        let total: f64 = (0..mesh.n_tets())
            .map(|t| mesh.tet_volume(t).unwrap_or(0.0))
            .sum();
        println!("mesh {}", prefix.display());
        println!("  vertices {}", mesh.n_vertices());
        println!("  tets {}", mesh.n_tets());
        println!("  volume {total:.9e}");
        println!("  components {}", report.component_count);
        println!("  orientation_fixes {}", report.orientation_fixes);
        println!("  degenerate_tets {}", report.degenerate_tets.len());
        // Dihedral angle histogram over 12 bins of (0, pi).
        let mut bins = [0usize; 12];
        for (t, tet) in mesh.tets.iter().enumerate() {
            for &(a, b) in &TET_EDGES {
                let e = Edge::new(tet[a], tet[b]);
                if let Ok(angle) = mesh.dihedral_angle(t, e) {
                    let bin = ((angle / std::f64::consts::PI) * 12.0).floor() as usize;
                    bins[bin.min(11)] += 1;
                }
            }
        }
        println!("  dihedral histogram (12 bins over (0, pi)):");
        for (i, count) in bins.iter().enumerate() {
            let lo = 180.0 * i as f64 / 12.0;
            let hi = 180.0 * (i + 1) as f64 / 12.0;
            println!("    {lo:6.1}-{hi:6.1} deg: {count}");
        }
        if let Some(spec) = args.locality.or(config.get("locality").map_err(usage)?) {
            let (v, k) = spec
                .split_once(',')
                .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
                .ok_or_else(|| {
                    usage(format!("bad --locality '{spec}', expected vertex,power"))
                })?;
            locality_probe(&mesh, v, k)?;
        }
    }
    if let Some(path) = cache_path {
        let cache = load_cache(&path).map_err(runtime)?;
        println!("cache {}", path.display());
        println!("  operator {}", cache.operator.as_str());
        println!("  lumping {}", cache.lumping.as_str());
        println!("  levels {}", cache.hierarchy.n_stages());
        for (l, level) in cache.hierarchy.levels.iter().enumerate() {
            println!(
                "  level {l}: n_real {} padded {} nnz {} lambda_max {:.9e}",
                level.n_real,
                level.padded_n(),
                level.op.s.nnz_stored(),
                cache.hierarchy.lambda_max[l]
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn locality_probe(mesh: &TetMesh, vertex: usize, power: usize) -> Result<(), Failure> {
    if vertex >= mesh.n_vertices() {
        return Err(usage(format!("vertex {vertex} out of range")));
    }
    let op = assemble_operator(mesh, OperatorKind::Lbo, Lumping::FemQuarter).map_err(runtime)?;
    let n = op.dim();
    let adj = mesh.adjacency();
    let mut dist = vec![usize::MAX; n];
    dist[vertex] = 0;
    let mut queue = std::collections::VecDeque::from([vertex]);
    while let Some(v) = queue.pop_front() {
        for &w in adj.neighbors(v) {
            if dist[w] == usize::MAX {
                dist[w] = dist[v] + 1;
                queue.push_back(w);
            }
        }
    }
    let mut x = vec![0.0; n];
    x[vertex] = 1.0;
    for k in 1..=power {
        let mut y = vec![0.0; n];
        op.apply_l_vec(&x, &mut y);
        x = y;
        let support: Vec<usize> = (0..n).filter(|&v| x[v] != 0.0).collect();
        let max_hop = support.iter().map(|&v| dist[v]).max().unwrap_or(0);
        let outside = support.iter().filter(|&&v| dist[v] > k).count();
        println!(
            "L^{k} delta_{vertex}: support {} vertices, max hop {max_hop}, outside {k}-ball {outside}",
            support.len()
        );
    }
    Ok(())
}
