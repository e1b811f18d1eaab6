//! `sfcv`: preprocessing, synthetic datasets, training, evaluation,
//! inference, and self-verification for surface convolutional networks.
//!
//! Exit codes: 0 success, 1 operational error, 2 verification failure.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use sfcv::cache::{cached_source_hash, hash_bytes, preprocess_mesh, read_cache, write_cache, PreprocessCache};
use sfcv::config::{Precision, RunConfig};
use sfcv::convops::ReduceMode;
use sfcv::geom::Vec3;
use sfcv::meshio;
use sfcv::network::{Network, NetworkDescription, Output};
use sfcv::synth;
use sfcv::training::{
    evaluate, load_checkpoint, save_checkpoint, train, Adam, Sample, Target, TrainConfig,
};
use sfcv::verify;

#[derive(Parser)]
#[command(name = "sfcv", version, about = "Surface CNN toolchain")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags mirroring RunConfig fields; set ones override the config file.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Path to a TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset_dir: Option<String>,
    #[arg(long)]
    cache_dir: Option<String>,
    /// Network description JSON.
    #[arg(long)]
    network: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    /// Frame symmetry order.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Comma-separated vertex targets for coarser levels, finest first.
    #[arg(long, value_delimiter = ',')]
    level_targets: Option<Vec<usize>>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    /// max | average
    #[arg(long)]
    reduce_mode: Option<String>,
    /// max | average
    #[arg(long)]
    pool_mode: Option<String>,
    /// double | single
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build preprocess caches for meshes (all dataset meshes by default).
    Preprocess {
        /// Explicit mesh files; defaults to every .obj/.off in dataset_dir.
        meshes: Vec<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Generate a synthetic dataset.
    Synth {
        /// classification | segmentation | regression
        kind: String,
        #[arg(long, default_value_t = 90)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train a network on preprocessed caches.
    Train {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run a checkpoint on one mesh and write predictions.
    Infer {
        mesh: PathBuf,
        /// Output prefix; writes <out>.obj and <out>.txt.
        #[arg(long, default_value = "prediction")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run self-check suites.
    Verify {
        /// Suite name, or "all".
        #[arg(long, default_value = "all")]
        suite: String,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {:#}", e);
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Preprocess { meshes, overrides } => {
            let cfg = resolve_config(&overrides)?;
            cmd_preprocess(&meshes, &cfg)
        }
        Cmd::Synth {
            kind,
            count,
            out,
            overrides,
        } => {
            let cfg = resolve_config(&overrides)?;
            cmd_synth(&kind, count, cfg.seed, &out)
        }
        Cmd::Train { overrides } => {
            let cfg = resolve_config(&overrides)?;
            cmd_train(&cfg)
        }
        Cmd::Eval { overrides } => {
            let cfg = resolve_config(&overrides)?;
            cmd_eval(&cfg)
        }
        Cmd::Infer {
            mesh,
            out,
            overrides,
        } => {
            let cfg = resolve_config(&overrides)?;
            cmd_infer(&mesh, &out, &cfg)
        }
        Cmd::Verify { suite, .. } => cmd_verify(&suite),
    }
}

fn resolve_config(o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = &o.$field {
                cfg.$field = v.clone();
            }
        };
    }
    set!(dataset_dir);
    set!(cache_dir);
    set!(network);
    set!(checkpoint);
    set!(n);
    set!(lambda);
    set!(level_targets);
    set!(learning_rate);
    set!(epochs);
    set!(seed);
    set!(batch);
    if let Some(v) = &o.reduce_mode {
        cfg.reduce_mode = parse_mode(v)?;
    }
    if let Some(v) = &o.pool_mode {
        cfg.pool_mode = parse_mode(v)?;
    }
    if let Some(v) = &o.precision {
        cfg.precision = match v.as_str() {
            "double" => Precision::Double,
            "single" => Precision::Single,
            other => bail!("unknown precision '{}' (expected double or single)", other),
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_mode(s: &str) -> Result<ReduceMode> {
    match s {
        "max" => Ok(ReduceMode::Max),
        "average" => Ok(ReduceMode::Average),
        other => bail!("unknown mode '{}' (expected max or average)", other),
    }
}

fn thread_count() -> usize {
    if let Ok(v) = std::env::var("SFCV_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                return n;
            }
        }
        eprintln!("warning: ignoring invalid SFCV_THREADS='{}'", v);
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

// ------------------------------------------------------------- preprocess

/// Coarser-level targets that fit this mesh: strictly below the vertex
/// count, keeping the configured strictly-decreasing order.
fn fit_targets(targets: &[usize], vertices: usize) -> Vec<usize> {
    targets
        .iter()
        .copied()
        .filter(|&t| t + 1 < vertices && t >= 4)
        .collect()
}

fn cache_path(cache_dir: &str, mesh_path: &Path) -> PathBuf {
    let stem = mesh_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "mesh".into());
    Path::new(cache_dir).join(format!("{}.sfcv", stem))
}

fn cmd_preprocess(meshes: &[PathBuf], cfg: &RunConfig) -> Result<i32> {
    let mut paths: Vec<PathBuf> = meshes.to_vec();
    if paths.is_empty() {
        let dir = Path::new(&cfg.dataset_dir);
        let mut found = Vec::new();
        for entry in std::fs::read_dir(dir)
            .with_context(|| format!("cannot list dataset dir {}", dir.display()))?
        {
            let p = entry?.path();
            match p.extension().and_then(|e| e.to_str()) {
                Some("obj") | Some("off") => found.push(p),
                _ => {}
            }
        }
        found.sort();
        paths = found;
    }
    if paths.is_empty() {
        bail!("no meshes to preprocess");
    }
    std::fs::create_dir_all(&cfg.cache_dir)
        .with_context(|| format!("cannot create cache dir {}", cfg.cache_dir))?;

    let opts = cfg.rosy_options();
    let next = AtomicUsize::new(0);
    let reports: Mutex<Vec<(usize, String, bool)>> = Mutex::new(Vec::new());
    let workers = thread_count().min(paths.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= paths.len() {
                    break;
                }
                let path = &paths[i];
                let (line, ok) = preprocess_one(path, cfg, &opts);
                reports.lock().unwrap().push((i, line, ok));
            });
        }
    });
    let mut lines = reports.into_inner().unwrap();
    lines.sort_by_key(|(i, _, _)| *i);
    let mut failures = 0;
    for (_, line, ok) in lines {
        println!("{}", line);
        if !ok {
            failures += 1;
        }
    }
    if failures > 0 {
        eprintln!("{} mesh(es) skipped or failed", failures);
    }
    Ok(0)
}

fn preprocess_one(path: &Path, cfg: &RunConfig, opts: &sfcv::frames::RosyOptions) -> (String, bool) {
    let run = || -> Result<String> {
        let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
        let hash = hash_bytes(&bytes);
        let out = cache_path(&cfg.cache_dir, path);
        if let Ok(existing) = cached_source_hash(&out) {
            if existing == hash {
                return Ok(format!("{}: up to date", path.display()));
            }
        }
        let mesh = meshio::load_mesh(path)?;
        let targets = fit_targets(&cfg.level_targets, mesh.vertex_count());
        let cache = preprocess_mesh(mesh, &targets, opts, hash)?;
        write_cache(&cache, &out)?;
        Ok(format!(
            "{}: wrote {}\n{}",
            path.display(),
            out.display(),
            cache.report().trim_end()
        ))
    };
    match run() {
        Ok(line) => (line, true),
        Err(e) => (format!("{}: skipped ({:#})", path.display(), e), false),
    }
}

// ------------------------------------------------------------------ synth

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    seed: u64,
    entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    mesh: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    /// Sidecar file with one per-vertex label per line.
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<String>,
    /// Sidecar file with six per-vertex values (rest position + normal).
    #[serde(skip_serializing_if = "Option::is_none")]
    target: Option<String>,
}

fn cmd_synth(kind: &str, count: usize, seed: u64, out: &Path) -> Result<i32> {
    std::fs::create_dir_all(out)?;
    let mut entries = Vec::with_capacity(count);
    match kind {
        "classification" => {
            for (i, (mesh, label)) in synth::generate_classification(count, seed).iter().enumerate() {
                let name = format!("mesh_{:03}.obj", i);
                meshio::write_obj(&out.join(&name), mesh)?;
                entries.push(ManifestEntry {
                    mesh: name,
                    label: Some(*label),
                    labels: None,
                    target: None,
                });
            }
        }
        "segmentation" => {
            for (i, (mesh, labels)) in synth::generate_segmentation(count, seed).iter().enumerate() {
                let name = format!("mesh_{:03}.obj", i);
                let label_name = format!("mesh_{:03}.labels", i);
                meshio::write_obj(&out.join(&name), mesh)?;
                let text: String = labels.iter().map(|l| format!("{}\n", l)).collect();
                std::fs::write(out.join(&label_name), text)?;
                entries.push(ManifestEntry {
                    mesh: name,
                    label: None,
                    labels: Some(label_name),
                    target: None,
                });
            }
        }
        "regression" => {
            let (template, samples) = synth::generate_regression(count, seed);
            meshio::write_obj(&out.join("template.obj"), &template)?;
            for (i, (mesh, target)) in samples.iter().enumerate() {
                let name = format!("mesh_{:03}.obj", i);
                let target_name = format!("mesh_{:03}.target", i);
                meshio::write_obj(&out.join(&name), mesh)?;
                let text: String = target
                    .iter()
                    .map(|row| {
                        format!(
                            "{} {} {} {} {} {}\n",
                            row[0], row[1], row[2], row[3], row[4], row[5]
                        )
                    })
                    .collect();
                std::fs::write(out.join(&target_name), text)?;
                entries.push(ManifestEntry {
                    mesh: name,
                    label: None,
                    labels: None,
                    target: Some(target_name),
                });
            }
        }
        other => bail!(
            "unknown dataset kind '{}' (expected classification, segmentation, or regression)",
            other
        ),
    }
    let manifest = Manifest {
        kind: kind.into(),
        seed,
        entries,
    };
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    println!("wrote {} meshes to {}", count, out.display());
    Ok(0)
}

// ----------------------------------------------------------- train / eval

fn load_manifest(dataset_dir: &str) -> Result<Manifest> {
    let path = Path::new(dataset_dir).join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("cannot read manifest {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn load_samples(cfg: &RunConfig) -> Result<Vec<Sample>> {
    let manifest = load_manifest(&cfg.dataset_dir)?;
    let dir = Path::new(&cfg.dataset_dir);
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let mesh_path = dir.join(&entry.mesh);
        let cache_file = cache_path(&cfg.cache_dir, &mesh_path);
        let cache = read_cache(&cache_file).with_context(|| {
            format!(
                "missing or unreadable cache for mesh {} (expected {}); run `sfcv preprocess` first",
                entry.mesh,
                cache_file.display()
            )
        })?;
        let target = if let Some(label) = entry.label {
            Target::Class(label)
        } else if let Some(labels_file) = &entry.labels {
            let text = std::fs::read_to_string(dir.join(labels_file))?;
            let labels: Vec<i64> = text
                .lines()
                .map(|l| l.trim().parse::<i64>())
                .collect::<Result<_, _>>()?;
            Target::VertexLabels(labels)
        } else if let Some(target_file) = &entry.target {
            let text = std::fs::read_to_string(dir.join(target_file))?;
            let mut positions = Vec::new();
            let mut normals = Vec::new();
            for line in text.lines() {
                let row: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<Result<_, _>>()?;
                if row.len() != 6 {
                    bail!("target rows must have 6 values, got {}", row.len());
                }
                positions.push([row[0], row[1], row[2]]);
                normals.push([row[3], row[4], row[5]]);
            }
            Target::Rest { positions, normals }
        } else {
            bail!("manifest entry {} has no supervision", entry.mesh);
        };
        samples.push(Sample {
            ctx: cache.context(),
            target,
        });
    }
    Ok(samples)
}

fn load_description(cfg: &RunConfig) -> Result<NetworkDescription> {
    let text = std::fs::read_to_string(&cfg.network)
        .with_context(|| format!("cannot read network description {}", cfg.network))?;
    Ok(NetworkDescription::from_json(&text)?)
}

fn cmd_train(cfg: &RunConfig) -> Result<i32> {
    let desc = load_description(cfg)?;
    let samples = load_samples(cfg)?;
    if samples.is_empty() {
        bail!("dataset is empty");
    }
    let levels = samples[0].ctx.levels();
    let ckpt_path = Path::new(&cfg.checkpoint);

    let (mut net, mut opt, start_epoch) = if ckpt_path.exists() {
        let ckpt = load_checkpoint(ckpt_path, Some(desc.content_hash()))?;
        println!("resuming from {} at epoch {}", ckpt_path.display(), ckpt.epoch);
        (ckpt.network, ckpt.optimizer, ckpt.epoch)
    } else {
        (
            Network::init(desc.clone(), levels, cfg.seed)?,
            Adam::new(cfg.learning_rate),
            0,
        )
    };

    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
        batch: cfg.batch,
        single_precision: cfg.precision == Precision::Single,
    };
    for epoch in start_epoch..cfg.epochs {
        let mut one = train_cfg.clone();
        one.epochs = epoch + 1;
        let log = train(&mut net, &mut opt, &samples, &one, epoch)?;
        for record in &log {
            println!("{}", record.to_line());
        }
        save_checkpoint(ckpt_path, &mut net, &opt, epoch + 1)?;
    }
    println!("saved {}", ckpt_path.display());
    Ok(0)
}

fn cmd_eval(cfg: &RunConfig) -> Result<i32> {
    let desc = load_description(cfg)?;
    let ckpt = load_checkpoint(Path::new(&cfg.checkpoint), Some(desc.content_hash()))?;
    let samples = load_samples(cfg)?;
    let metrics = evaluate(&ckpt.network, &samples)?;
    match metrics.accuracy {
        Some(acc) => println!(
            "meshes={} loss={:.6} accuracy={:.4}",
            samples.len(),
            metrics.mean_loss,
            acc
        ),
        None => println!("meshes={} loss={:.6}", samples.len(), metrics.mean_loss),
    }
    Ok(0)
}

// ------------------------------------------------------------------ infer

/// Distinct label colors for the prediction OBJ.
const PALETTE: [Vec3; 8] = [
    [0.894, 0.102, 0.110],
    [0.216, 0.494, 0.722],
    [0.302, 0.686, 0.290],
    [0.596, 0.306, 0.639],
    [1.000, 0.498, 0.000],
    [0.651, 0.337, 0.157],
    [0.969, 0.506, 0.749],
    [0.600, 0.600, 0.600],
];

fn cmd_infer(mesh_path: &Path, out: &Path, cfg: &RunConfig) -> Result<i32> {
    let desc = load_description(cfg)?;
    let ckpt = load_checkpoint(Path::new(&cfg.checkpoint), Some(desc.content_hash()))?;

    let bytes =
        std::fs::read(mesh_path).with_context(|| format!("cannot read {}", mesh_path.display()))?;
    let mesh = meshio::load_mesh(mesh_path)?;
    let positions = mesh.positions.clone();
    let triangles = mesh.triangles.clone();
    let cache_file = cache_path(&cfg.cache_dir, mesh_path);
    let cache: PreprocessCache = match cached_source_hash(&cache_file) {
        Ok(h) if h == hash_bytes(&bytes) => read_cache(&cache_file)?,
        _ => {
            let targets = fit_targets(&cfg.level_targets, mesh.vertex_count());
            preprocess_mesh(mesh, &targets, &cfg.rosy_options(), hash_bytes(&bytes))?
        }
    };
    let ctx = cache.context();
    let (output, _) = ckpt.network.forward(&ctx, false)?;

    let display_mesh = sfcv::mesh::TriMesh::new(positions, triangles);
    let obj_path = out.with_extension("obj");
    let table_path = out.with_extension("txt");
    let mut table = String::new();
    match &output {
        Output::Scores(scores) => {
            let pred = sfcv::training::argmax(scores);
            table.push_str("# mesh-level class scores\n");
            table.push_str(&format!(
                "predicted {}\nscores {}\n",
                pred,
                scores.iter().map(|s| format!("{:.6}", s)).collect::<Vec<_>>().join(" ")
            ));
            let colors = vec![PALETTE[pred % PALETTE.len()]; display_mesh.vertex_count()];
            meshio::write_obj_with_colors(&obj_path, &display_mesh, Some(&colors))?;
        }
        Output::Dense(map) => {
            table.push_str("# vertex, per-channel values, argmax\n");
            let mut colors = Vec::with_capacity(map.vertices);
            for v in 0..map.vertices {
                let row: Vec<f64> = (0..map.channels).map(|c| map.get(c, v)).collect();
                let pred = sfcv::training::argmax(&row);
                table.push_str(&format!(
                    "{} {} {}\n",
                    v,
                    row.iter().map(|x| format!("{:.6}", x)).collect::<Vec<_>>().join(" "),
                    pred
                ));
                colors.push(PALETTE[pred % PALETTE.len()]);
            }
            meshio::write_obj_with_colors(&obj_path, &display_mesh, Some(&colors))?;
        }
        Output::Grouped(_) => bail!("network output is grouped; add a reduce layer before inference"),
    }
    std::fs::write(&table_path, table)?;
    println!("wrote {} and {}", obj_path.display(), table_path.display());
    Ok(0)
}

// ----------------------------------------------------------------- verify

fn cmd_verify(suite: &str) -> Result<i32> {
    let results = if suite == "all" {
        verify::run_all()?
    } else {
        verify::run_suite(suite)?
    };
    let mut failed = false;
    for r in &results {
        println!("{}", r.line());
        if !r.passed {
            failed = true;
        }
    }
    if failed {
        Ok(2)
    } else {
        println!("all {} checks passed", results.len());
        Ok(0)
    }
}
