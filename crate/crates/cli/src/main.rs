//! `landtune`: train a base model, generate scenes, run the offline grid and
//! the random-labeler simulation, export label densities, or serve the UI.

mod settings;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use landtune::eval::label_density_surface;
use landtune::finetune::{FineTuneConfig, Method};
use landtune::harness::{
    manifest, run_offline_grid, simulate_random_labeler, table_at, target_areas, train_source_model, write_csv,
    BaseRecipe, GridSpec, NamedArea, SimConfig,
};
use landtune::kv::KvDoc;
use landtune::model::{Checkpoint, Provenance};
use landtune::palette::Palette;
use landtune::query::{QueryKind, QuerySchedule};
use landtune::session::{Service, SessionConfig};
use landtune::synth::{export_raster, generate_scene, import_raster, SceneConfig};
use landtune::{Extent, LabelPoint};

use settings::{list, Settings};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] landtune::Error),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Usage(String),
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "landtune", version, about = "Point-label fine-tuning of land-cover models")]
struct Cli {
    /// `key = value` file; keys are `<verb>.<option>` and lose to flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source-domain base model and write a checkpoint.
    TrainBase(TrainBaseArgs),
    /// Write synthetic scenes as raster files.
    GenScenes(GenScenesArgs),
    /// Run every method × query × seed over the schedule and write CSV.
    OfflineGrid(GridArgs),
    /// Simulate a random labeler with periodic retraining.
    SimRandom(SimArgs),
    /// Serve the HTTP API and the web UI bundle.
    Serve(ServeArgs),
    /// Kernel density of label positions as CSV.
    ExportDensity(DensityArgs),
}

#[derive(Args)]
struct TrainBaseArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patches: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated source scene seeds.
    #[arg(long)]
    scene_seeds: Option<String>,
}

#[derive(Args)]
struct GenScenesArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    first_seed: Option<u64>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    /// Domain shift; defaults to the calibrated target shift.
    #[arg(long)]
    shift: Option<f32>,
    /// Add the overlay-painted `wetlands` class.
    #[arg(long)]
    wetlands: bool,
}

#[derive(Args, Clone)]
struct AreaArgs {
    /// Raster files with ground truth; generated target areas otherwise.
    #[arg(long, num_args = 1..)]
    scenes: Vec<PathBuf>,
    #[arg(long)]
    areas: Option<usize>,
    #[arg(long)]
    first_seed: Option<u64>,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    areas: AreaArgs,
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    queries: Option<String>,
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    pool_size: Option<usize>,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    areas: AreaArgs,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    session_seconds: Option<u64>,
    #[arg(long)]
    seconds_per_label: Option<u64>,
    #[arg(long)]
    retrain_interval: Option<u64>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    base: PathBuf,
    /// Raster files to offer; demo scenes are generated when none are given.
    #[arg(long, num_args = 1..)]
    scenes: Vec<PathBuf>,
    #[arg(long)]
    addr: Option<String>,
    #[arg(long = "static")]
    static_dir: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    patch: Option<usize>,
}

#[derive(Args)]
struct DensityArgs {
    /// CSV with a `row,col,class` header.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `row0,col0,rows,cols`.
    #[arg(long)]
    extent: String,
    #[arg(long)]
    bandwidth: Option<f64>,
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::File {
        path: path.to_path_buf(),
        source,
    }
}

fn write_manifest(out: &Path, doc: &KvDoc) -> Result<PathBuf> {
    let mut path = out.as_os_str().to_owned();
    path.push(".manifest");
    let path = PathBuf::from(path);
    std::fs::write(&path, doc.to_string()).map_err(file_err(&path))?;
    Ok(path)
}

fn load_areas(args: &AreaArgs, s: &Settings) -> Result<Vec<NamedArea>> {
    if !args.scenes.is_empty() {
        return args
            .scenes
            .iter()
            .map(|p| {
                let name = p
                    .file_stem()
                    .map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
                Ok(NamedArea::from_scene(name, &import_raster(p)?)?)
            })
            .collect();
    }
    let count = s.get("areas", args.areas, 4)?;
    let first = s.get("first_seed", args.first_seed, 200)?;
    Ok(target_areas(count, first)?)
}

fn train_base_cmd(a: TrainBaseArgs, s: &Settings) -> Result<()> {
    let mut recipe = BaseRecipe::default();
    recipe.train.epochs = s.get("epochs", a.epochs, recipe.train.epochs)?;
    recipe.train.seed = s.get("seed", a.seed, recipe.train.seed)?;
    recipe.patches = s.get("patches", a.patches, recipe.patches)?;
    if let Some(seeds) = s.text("scene_seeds", a.scene_seeds) {
        recipe.scene_seeds = list(&seeds, |x| x.parse().map_err(|_| format!("bad seed `{x}`")))?;
    }
    let out = train_source_model(&recipe)?;
    let ck = Checkpoint {
        params: out.params,
        palette: Palette::land_cover(),
        provenance: Provenance {
            seed: recipe.train.seed,
            epochs: recipe.train.epochs,
        },
    };
    ck.save(&a.out)?;
    let last = out.history.last().map_or(out.initial_monitor_loss, |h| h.monitor_loss);
    let m = manifest(
        "train-base",
        &[
            ("seed", recipe.train.seed.to_string()),
            ("epochs", recipe.train.epochs.to_string()),
            ("patches", recipe.patches.to_string()),
            ("scene_seeds", join(&recipe.scene_seeds)),
            ("initial_loss", out.initial_monitor_loss.to_string()),
            ("final_loss", last.to_string()),
        ],
    );
    write_manifest(&a.out, &m)?;
    println!(
        "wrote {} (monitor loss {:.4} -> {last:.4})",
        a.out.display(),
        out.initial_monitor_loss
    );
    Ok(())
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn gen_scenes_cmd(a: GenScenesArgs, s: &Settings) -> Result<()> {
    std::fs::create_dir_all(&a.out).map_err(file_err(&a.out))?;
    let count = s.get("count", a.count, 4)?;
    let first = s.get("first_seed", a.first_seed, 200)?;
    let wetlands = a.wetlands || s.get("wetlands", None, false)?;
    for i in 0..count {
        let seed = first + i as u64;
        let mut cfg = if wetlands {
            SceneConfig::wetlands(seed)
        } else {
            SceneConfig::target(seed)
        };
        cfg.rows = s.get("rows", a.rows, cfg.rows)?;
        cfg.cols = s.get("cols", a.cols, cfg.cols)?;
        cfg.shift = s.get("shift", a.shift, cfg.shift)?;
        let scene = generate_scene(&cfg)?;
        let path = a.out.join(format!("scene-{seed}.lcr"));
        export_raster(&scene, &path)?;
        let kv = a.out.join(format!("scene-{seed}.kv"));
        std::fs::write(&kv, cfg.to_kv().to_string()).map_err(file_err(&kv))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn grid_cmd(a: GridArgs, s: &Settings) -> Result<()> {
    let base = Checkpoint::load(&a.base)?;
    let areas = load_areas(&a.areas, s)?;
    let methods = list(
        &s.text("methods", a.methods)
            .unwrap_or("last-1,last-2,group-params".into()),
        |m| Method::parse(m).map_err(|e| e.to_string()),
    )?;
    let queries = list(
        &s.text("queries", a.queries)
            .unwrap_or("random,entropy,min-margin,mistakes".into()),
        |q| QueryKind::parse(q).map_err(|e| e.to_string()),
    )?;
    let schedule = match s.text("schedule", a.schedule) {
        Some(t) => QuerySchedule::new(list(&t, |x| x.parse().map_err(|_| format!("bad count `{x}`")))?)?,
        None => QuerySchedule::standard(),
    };
    let seeds: Vec<u64> = list(&s.text("seeds", a.seeds).unwrap_or("0,1,2,3,4".into()), |x| {
        x.parse().map_err(|_| format!("bad seed `{x}`"))
    })?;
    let mut grid = GridSpec::new(methods.clone(), queries.clone(), schedule.clone(), seeds.clone());
    grid.pool_size = s.get("pool_size", a.pool_size, grid.pool_size)?;
    let rows = run_offline_grid(&base.params, &areas, &grid)?;
    let file = std::fs::File::create(&a.out).map_err(file_err(&a.out))?;
    write_csv(&rows, std::io::BufWriter::new(file))?;
    let m = manifest(
        "offline-grid",
        &[
            ("base", a.base.display().to_string()),
            (
                "areas",
                areas.iter().map(|a| a.name.as_str()).collect::<Vec<_>>().join(","),
            ),
            (
                "methods",
                methods.iter().map(Method::as_str).collect::<Vec<_>>().join(","),
            ),
            (
                "queries",
                queries.iter().map(|q| q.as_str()).collect::<Vec<_>>().join(","),
            ),
            ("schedule", join(schedule.checkpoints())),
            ("seeds", join(&seeds)),
            ("pool_size", grid.pool_size.to_string()),
        ],
    );
    write_manifest(&a.out, &m)?;
    let last = *schedule.checkpoints().last().expect("schedule is non-empty");
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "method\tquery\taccuracy\tmean_iou\truns (at {last} labels)");
    for c in table_at(&rows, last) {
        let _ = writeln!(
            stdout,
            "{}\t{}\t{:.4}\t{:.4}\t{}",
            c.method, c.query, c.accuracy, c.mean_iou, c.runs
        );
    }
    Ok(())
}

fn sim_cmd(a: SimArgs, s: &Settings) -> Result<()> {
    let base = Checkpoint::load(&a.base)?;
    let areas = load_areas(&a.areas, s)?;
    let method = Method::parse(&s.text("method", a.method).unwrap_or("last-1".into()))?;
    let seeds: Vec<u64> = list(&s.text("seeds", a.seeds).unwrap_or("0,1,2,3,4,5,6,7,8,9".into()), |x| {
        x.parse().map_err(|_| format!("bad seed `{x}`"))
    })?;
    let defaults = SimConfig::default();
    let mut sim = SimConfig {
        session_seconds: s.get("session_seconds", a.session_seconds, defaults.session_seconds)?,
        seconds_per_label: s.get("seconds_per_label", a.seconds_per_label, defaults.seconds_per_label)?,
        retrain_interval: s.get("retrain_interval", a.retrain_interval, defaults.retrain_interval)?,
        seed: 0,
    };
    let config = FineTuneConfig::new(method);
    let file = std::fs::File::create(&a.out).map_err(file_err(&a.out))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record([
        "area",
        "method",
        "seed",
        "elapsed",
        "label_count",
        "accuracy",
        "mean_iou",
    ])?;
    for area in &areas {
        for &seed in &seeds {
            sim.seed = seed;
            let trace = simulate_random_labeler(area, &base.params, &config, &sim)?;
            for e in &trace.events {
                w.write_record([
                    area.name.clone(),
                    method.as_str(),
                    seed.to_string(),
                    e.elapsed.to_string(),
                    e.label_count.to_string(),
                    e.report.accuracy.to_string(),
                    e.report.mean_iou.to_string(),
                ])?;
            }
            println!(
                "{} seed {seed}: {} retrains, accuracy {:.4} -> {:.4}",
                area.name,
                trace.retrains,
                trace.events[0].report.accuracy,
                trace.final_report().accuracy
            );
        }
    }
    w.flush().map_err(file_err(&a.out))?;
    let m = manifest(
        "sim-random",
        &[
            ("base", a.base.display().to_string()),
            (
                "areas",
                areas.iter().map(|a| a.name.as_str()).collect::<Vec<_>>().join(","),
            ),
            ("method", method.as_str()),
            ("seeds", join(&seeds)),
            ("session_seconds", sim.session_seconds.to_string()),
            ("seconds_per_label", sim.seconds_per_label.to_string()),
            ("retrain_interval", sim.retrain_interval.to_string()),
        ],
    );
    write_manifest(&a.out, &m)?;
    Ok(())
}

fn serve_cmd(a: ServeArgs, s: &Settings) -> Result<()> {
    let base = Checkpoint::load(&a.base)?;
    let mut config = SessionConfig::default();
    if let Some(m) = s.text("method", a.method) {
        config.default_method = Method::parse(&m)?;
    }
    config.default_patch = s.get("patch", a.patch, config.default_patch)?;
    if let Some(ms) = s.get::<Option<u64>>("retrain_delay_ms", None, None)? {
        config.retrain_delay = Some(Duration::from_millis(ms));
    }
    let service = Service::new(base, config)?;
    if a.scenes.is_empty() {
        for (i, seed) in (200..204).enumerate() {
            service.add_scene(format!("area{i}"), generate_scene(&SceneConfig::target(seed))?)?;
        }
        service.add_scene("wetlands", generate_scene(&SceneConfig::wetlands(211))?)?;
    }
    for p in &a.scenes {
        let id = p
            .file_stem()
            .map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
        service.add_scene(id, import_raster(p)?)?;
    }
    let addr = s
        .text("addr", a.addr)
        .unwrap_or("127.0.0.1:8080".into())
        .parse()
        .map_err(|e| CliError::Usage(format!("bad listen address: {e}")))?;
    let static_dir = a
        .static_dir
        .or_else(|| s.text("static", None).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("web/dist"));
    let rt = tokio::runtime::Runtime::new().map_err(file_err(Path::new("tokio runtime")))?;
    rt.block_on(landtune_server::serve(Arc::new(service), static_dir, addr))
        .map_err(file_err(Path::new("server")))
}

fn density_cmd(a: DensityArgs, s: &Settings) -> Result<()> {
    let mut rd = csv::Reader::from_path(&a.labels)?;
    let mut points = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let field = |i: usize| -> Result<usize> {
            rec.get(i)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| CliError::Usage(format!("{}: bad label row {:?}", a.labels.display(), rec)))
        };
        points.push(LabelPoint::new(field(0)?, field(1)?, field(2)?));
    }
    let e: Vec<usize> = list(&a.extent, |x| x.parse().map_err(|_| format!("bad extent value `{x}`")))?;
    let [row0, col0, rows, cols] = e[..] else {
        return Err(CliError::Usage("extent is `row0,col0,rows,cols`".into()));
    };
    let extent = Extent::new(row0, col0, rows, cols);
    let h = s.get("bandwidth", a.bandwidth, 10.0)?;
    let surface = label_density_surface(&points, extent, h)?;
    let mut w = csv::Writer::from_path(&a.out)?;
    w.write_record(["row", "col", "density"])?;
    for (i, v) in surface.data().iter().enumerate() {
        w.write_record([
            (row0 + i / cols).to_string(),
            (col0 + i % cols).to_string(),
            v.to_string(),
        ])?;
    }
    w.flush().map_err(file_err(&a.out))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let doc = match &cli.config {
        Some(p) => KvDoc::parse(&std::fs::read_to_string(p).map_err(file_err(p))?)?,
        None => KvDoc::new(),
    };
    match cli.command {
        Command::TrainBase(a) => train_base_cmd(a, &Settings::new(&doc, "train-base")),
        Command::GenScenes(a) => gen_scenes_cmd(a, &Settings::new(&doc, "gen-scenes")),
        Command::OfflineGrid(a) => grid_cmd(a, &Settings::new(&doc, "offline-grid")),
        Command::SimRandom(a) => sim_cmd(a, &Settings::new(&doc, "sim-random")),
        Command::Serve(a) => serve_cmd(a, &Settings::new(&doc, "serve")),
        Command::ExportDensity(a) => density_cmd(a, &Settings::new(&doc, "export-density")),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
