//! The `uagc` command line: pipeline stages from road data to trained
//! forecasters and scenario simulation.
//!
//! Exit codes: 0 success, 2 usage, 3 input format, 4 numeric failure.
//! Every command writes a manifest (`<output>.manifest.json`) recording the
//! resolved flags, input digests and seed; equal manifests reproduce
//! byte-identical outputs.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::activity::{
    build_histogram, normalize_activity, parse_survey_csv, smooth_histogram,
    ActivityTable, BINS_PER_DAY,
};
use crate::diffengine::Tensor;
use crate::geodata::{
    parse_edge_csv, parse_osm_xml, parse_sensor_csv, snap_sensors, write_edge_csv, RoadGraph,
    SnappedSensor,
};
use crate::graphbuild::{
    betweenness_centrality, combine_adjacency, cooccurrence_matrix, distance_adjacency,
    DEFAULT_KAPPA_MILES, DEFAULT_SIGMA_MILES,
};
use crate::models::{
    load_checkpoint, save_checkpoint, Architecture, BatchInputs, EmbeddingMode, Forecaster,
    GraphOperators, ModelConfig,
};
use crate::pathgen::{generate_path_set, make_grid, PathSet};
use crate::sparse::SparseMatrix;
use crate::training::{
    evaluate, load_traffic_csv, make_synthetic_dataset, train, trainer, write_traffic_csv,
    DatasetSplit, DatasetView, TrainConfig,
};
use crate::{Real, Tape};

const EXIT_USAGE: i32 = 2;
const EXIT_INPUT: i32 = 3;
const EXIT_NUMERIC: i32 = 4;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Input(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Input(_) => EXIT_INPUT,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Input(m) | CliError::Numeric(m) => m,
        }
    }
}

macro_rules! input_error_from {
    ($($ty:ty),*) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Input(e.to_string())
            }
        })*
    };
}

input_error_from!(
    std::io::Error,
    crate::geodata::GeoError,
    crate::pathgen::PathGenError,
    crate::sparse::SparseError,
    crate::activity::ActivityError,
    crate::models::ModelError
);

impl From<crate::training::TrainError> for CliError {
    fn from(e: crate::training::TrainError) -> Self {
        use crate::training::TrainError::*;
        match e {
            NonFiniteLoss { .. } | ZeroStd | EmptyTrainRange | Optim(_) => {
                CliError::Numeric(e.to_string())
            }
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<crate::graphbuild::GraphBuildError> for CliError {
    fn from(e: crate::graphbuild::GraphBuildError) -> Self {
        CliError::Input(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "uagc",
    version,
    about = "Traffic forecasting on a travel-path sensor similarity graph"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic ring-road fixture bundle.
    SynthData(SynthDataArgs),
    /// Generate the travel-path set with freeway-weighted A*.
    GenPaths(GenPathsArgs),
    /// Build the distance, co-occurrence and combined adjacency matrices.
    BuildGraph(BuildGraphArgs),
    /// Bin and smooth a travel survey into the weekly activity table.
    BuildActivity(BuildActivityArgs),
    /// Train a forecaster.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a data split.
    Eval(EvalArgs),
    /// Emit de-standardized predictions from a start timestamp.
    Predict(PredictArgs),
    /// Compare model reactions to two activity scenarios.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct RoadInputs {
    /// Nodes CSV (`node_id,lat,lon`).
    #[arg(long)]
    nodes: Option<PathBuf>,
    /// Edges CSV (`edge_id,from_node,to_node,length_miles,is_freeway`).
    #[arg(long)]
    edges: Option<PathBuf>,
    /// OSM XML extract (alternative to --nodes/--edges).
    #[arg(long)]
    osm: Option<PathBuf>,
    /// Highway tag values kept during OSM import.
    #[arg(
        long,
        default_value = "motorway,motorway_link,trunk,trunk_link,primary,primary_link,secondary,secondary_link,tertiary,residential,unclassified"
    )]
    highway_filter: String,
}

impl RoadInputs {
    fn load(&self) -> Result<RoadGraph, CliError> {
        match (&self.nodes, &self.edges, &self.osm) {
            (Some(nodes), Some(edges), None) => Ok(parse_edge_csv(
                BufReader::new(File::open(nodes)?),
                BufReader::new(File::open(edges)?),
            )?),
            (None, None, Some(osm)) => {
                let filter: HashSet<String> = self
                    .highway_filter
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
                Ok(parse_osm_xml(BufReader::new(File::open(osm)?), &filter)?)
            }
            _ => Err(CliError::Usage(
                "provide either --nodes and --edges, or --osm".into(),
            )),
        }
    }

    fn digest_paths(&self) -> Vec<&PathBuf> {
        [self.nodes.as_ref(), self.edges.as_ref(), self.osm.as_ref()]
            .into_iter()
            .flatten()
            .collect()
    }
}

#[derive(Args)]
struct SynthDataArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 20)]
    sensors: usize,
    #[arg(long, default_value_t = 28)]
    days: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct GenPathsArgs {
    #[command(flatten)]
    roads: RoadInputs,
    #[arg(long)]
    sensors: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    cell_miles: f64,
    #[arg(long, default_value_t = 2.0)]
    padding_miles: f64,
    /// Freeway cost coefficients, comma separated.
    #[arg(long, default_value = "1.0,0.9,0.8")]
    coeffs: String,
    /// Endpoint redraws per cell pair.
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = default_threads())]
    threads: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildGraphArgs {
    #[command(flatten)]
    roads: RoadInputs,
    #[arg(long)]
    sensors: PathBuf,
    /// Reuse an existing path-set file instead of generating one.
    #[arg(long)]
    paths: Option<PathBuf>,
    #[arg(long, default_value_t = 2.0)]
    cell_miles: f64,
    #[arg(long, default_value_t = 2.0)]
    padding_miles: f64,
    #[arg(long, default_value = "1.0,0.9,0.8")]
    coeffs: String,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Gaussian kernel bandwidth in miles.
    #[arg(long, default_value_t = DEFAULT_SIGMA_MILES)]
    sigma: f64,
    /// Distance cutoff in miles.
    #[arg(long, default_value_t = DEFAULT_KAPPA_MILES)]
    kappa: f64,
    #[arg(long, default_value_t = default_threads())]
    threads: usize,
    /// Output prefix: writes `<prefix>.dist.csv`, `<prefix>.cooc.csv`,
    /// `<prefix>.adj.csv`.
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Args)]
struct BuildActivityArgs {
    /// Survey CSV (`category,weekday,start_minute`).
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Gaussian smoothing bandwidth in 5-minute bins.
    #[arg(long, default_value_t = 2.0)]
    sigma: f64,
    #[arg(long, default_value_t = 9)]
    categories: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    traffic: PathBuf,
    /// Sensors CSV; when given, traffic columns are checked against it.
    #[arg(long)]
    sensors: Option<PathBuf>,
    /// Combined adjacency file from build-graph (`<prefix>.adj.csv`).
    #[arg(long)]
    adjacency: Option<PathBuf>,
    /// Weekly activity table from build-activity.
    #[arg(long)]
    activity: Option<PathBuf>,
    #[arg(long, default_value = "gcrn")]
    arch: Architecture,
    #[arg(long, default_value = "ae")]
    embedding: EmbeddingMode,
    #[arg(long)]
    no_sensor_embedding: bool,
    /// Skip mean-centering when normalizing activity rows.
    #[arg(long)]
    no_center: bool,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 12)]
    p: usize,
    #[arg(long, default_value_t = 12)]
    q: usize,
    /// Diffusion steps of the dual-walk convolution.
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    layers: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    d_key: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    /// Non-improving epochs before the learning rate drops to 1/10.
    #[arg(long, default_value_t = 2)]
    lr_trials: usize,
    /// Inverse-sigmoid scheduled-sampling decay constant (recurrent
    /// decoders only); teacher forcing when absent.
    #[arg(long)]
    scheduled_sampling: Option<f64>,
    /// Treat zero speeds as real observations instead of sensor failures.
    #[arg(long)]
    keep_zeros: bool,
    #[arg(long, default_value_t = 0.7)]
    train_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = default_threads())]
    threads: usize,
    /// Log wall-clock seconds per epoch (off makes logs byte-reproducible).
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    log_timing: bool,
    #[arg(long)]
    out: PathBuf,
    /// Training log (JSON lines); defaults to `<out>.log`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    traffic: PathBuf,
    /// Sensors CSV; when given, traffic columns are checked against it.
    #[arg(long)]
    sensors: Option<PathBuf>,
    #[arg(long)]
    adjacency: Option<PathBuf>,
    #[arg(long)]
    activity: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Also report the last-value baseline.
    #[arg(long)]
    baseline: Option<String>,
    #[arg(long)]
    keep_zeros: bool,
    #[arg(long, default_value_t = 0.7)]
    train_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = default_threads())]
    threads: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    traffic: PathBuf,
    /// Sensors CSV; when given, traffic columns are checked against it.
    #[arg(long)]
    sensors: Option<PathBuf>,
    #[arg(long)]
    adjacency: Option<PathBuf>,
    #[arg(long)]
    activity: Option<PathBuf>,
    /// Timestamp of the first predicted step (ISO-8601).
    #[arg(long)]
    start: String,
    #[arg(long)]
    keep_zeros: bool,
    #[arg(long, default_value_t = 0.7)]
    train_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    adjacency: Option<PathBuf>,
    #[arg(long)]
    activity: Option<PathBuf>,
    /// Sensors CSV for id labels (indices used when absent).
    #[arg(long)]
    sensors: Option<PathBuf>,
    /// Constant speed filled into the history window, mph.
    #[arg(long, default_value_t = 30.0)]
    speed: f64,
    /// Weekday of both scenarios (0 = Monday).
    #[arg(long, default_value_t = 2)]
    weekday: usize,
    /// First scenario window start (HH:MM).
    #[arg(long, default_value = "06:35")]
    window1: String,
    /// Second scenario window start (HH:MM).
    #[arg(long, default_value = "16:45")]
    window2: String,
    /// Horizon step reported (5-minute units ahead).
    #[arg(long, default_value_t = 3)]
    horizon_step: usize,
    #[arg(long)]
    out: PathBuf,
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Entry point; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::SynthData(args) => cmd_synth_data(args),
        Command::GenPaths(args) => cmd_gen_paths(args),
        Command::BuildGraph(args) => cmd_build_graph(args),
        Command::BuildActivity(args) => cmd_build_activity(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Simulate(args) => cmd_simulate(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.message());
            e.code()
        }
    }
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    artifact_version: String,
    seed: Option<u64>,
    flags: BTreeMap<String, String>,
    input_digests: BTreeMap<String, String>,
}

impl RunManifest {
    fn new(command: &str, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            flags: BTreeMap::new(),
            input_digests: BTreeMap::new(),
        }
    }

    fn flag(&mut self, name: &str, value: impl ToString) -> &mut Self {
        self.flags.insert(name.to_string(), value.to_string());
        self
    }

    fn digest(&mut self, path: &Path) -> Result<&mut Self, CliError> {
        let bytes = std::fs::read(path)?;
        let hash = Sha256::digest(&bytes);
        let hex: String = hash.iter().map(|b| format!("{b:02x}")).collect();
        self.input_digests.insert(path.display().to_string(), hex);
        Ok(self)
    }

    /// Writes `<output>.manifest.json` next to the named artifact.
    fn write_for(&self, output: &Path) -> Result<(), CliError> {
        let mut path = output.as_os_str().to_owned();
        path.push(".manifest.json");
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(PathBuf::from(path), json + "\n")?;
        Ok(())
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path)?))
}

fn parse_coeffs(spec: &str) -> Result<Vec<f64>, CliError> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("bad coefficient `{s}`")))
        })
        .collect()
}

fn load_snapped(graph: &RoadGraph, sensors_path: &Path) -> Result<Vec<SnappedSensor>, CliError> {
    let sensors = parse_sensor_csv(BufReader::new(File::open(sensors_path)?))?;
    Ok(snap_sensors(graph, &sensors)?)
}

/// Traffic columns must list the same sensors in the same order as the
/// sensors CSV the graph was built from.
fn verify_sensor_order(
    series: &crate::training::TrafficSeries,
    sensors_path: &Option<PathBuf>,
) -> Result<(), CliError> {
    let Some(path) = sensors_path else {
        return Ok(());
    };
    let sensors = parse_sensor_csv(BufReader::new(File::open(path)?))?;
    if sensors.len() != series.sensor_ids.len() {
        return Err(CliError::Input(format!(
            "traffic file has {} sensor columns, sensors CSV lists {}",
            series.sensor_ids.len(),
            sensors.len()
        )));
    }
    for (i, (s, col)) in sensors.iter().zip(&series.sensor_ids).enumerate() {
        if &s.sensor_id != col {
            return Err(CliError::Input(format!(
                "sensor column {i} is `{col}`, sensors CSV has `{}` there",
                s.sensor_id
            )));
        }
    }
    Ok(())
}

fn cmd_synth_data(args: SynthDataArgs) -> Result<(), CliError> {
    if args.sensors < 4 {
        return Err(CliError::Usage("--sensors must be at least 4".into()));
    }
    std::fs::create_dir_all(&args.out_dir)?;
    let bundle = make_synthetic_dataset(args.sensors, args.days, args.seed);

    let mut nodes = create(&args.out_dir.join("nodes.csv"))?;
    let mut edges = create(&args.out_dir.join("edges.csv"))?;
    write_edge_csv(&bundle.graph, &mut nodes, &mut edges)?;
    nodes.flush()?;
    edges.flush()?;

    let mut sensors = create(&args.out_dir.join("sensors.csv"))?;
    writeln!(sensors, "sensor_id,lat,lon")?;
    for s in &bundle.sensors {
        writeln!(sensors, "{},{},{}", s.sensor_id, s.lat, s.lon)?;
    }
    sensors.flush()?;

    let mut traffic = create(&args.out_dir.join("traffic.csv"))?;
    write_traffic_csv(&bundle.series, &mut traffic)?;
    traffic.flush()?;

    let mut survey = create(&args.out_dir.join("survey.csv"))?;
    writeln!(survey, "category,weekday,start_minute")?;
    for row in &bundle.survey {
        writeln!(survey, "{},{},{}", row.category, row.weekday, row.start_minute)?;
    }
    survey.flush()?;

    let mut manifest = RunManifest::new("synth-data", Some(args.seed));
    manifest
        .flag("sensors", args.sensors)
        .flag("days", args.days)
        .flag("out_dir", args.out_dir.display());
    manifest.write_for(&args.out_dir.join("bundle"))?;
    println!(
        "wrote ring fixture: {} sensors, {} steps, {} survey rows",
        args.sensors,
        bundle.series.n_steps(),
        bundle.survey.len()
    );
    Ok(())
}

fn cmd_gen_paths(args: GenPathsArgs) -> Result<(), CliError> {
    let coeffs = parse_coeffs(&args.coeffs)?;
    let graph = args.roads.load()?;
    let snapped = load_snapped(&graph, &args.sensors)?;
    let grid = make_grid(&graph, &snapped, args.cell_miles, args.padding_miles)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads.max(1))
        .build()
        .expect("thread pool");
    let paths = pool.install(|| {
        generate_path_set(&graph, &grid, &snapped, &coeffs, args.reps, args.seed)
    })?;
    let mut out = create(&args.out)?;
    paths.write(&graph, &mut out)?;
    out.flush()?;

    let mut manifest = RunManifest::new("gen-paths", Some(args.seed));
    manifest
        .flag("cell_miles", args.cell_miles)
        .flag("padding_miles", args.padding_miles)
        .flag("coeffs", &args.coeffs)
        .flag("reps", args.reps)
        .flag("threads", args.threads)
        .flag("out", args.out.display());
    for p in args.roads.digest_paths() {
        manifest.digest(p)?;
    }
    manifest.digest(&args.sensors)?;
    manifest.write_for(&args.out)?;
    println!(
        "grid {}x{} ({} mi), {} paths written",
        grid.n_rows(),
        grid.n_cols(),
        args.cell_miles,
        paths.records.len()
    );
    Ok(())
}

fn cmd_build_graph(args: BuildGraphArgs) -> Result<(), CliError> {
    let coeffs = parse_coeffs(&args.coeffs)?;
    let graph = args.roads.load()?;
    let snapped = load_snapped(&graph, &args.sensors)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads.max(1))
        .build()
        .expect("thread pool");

    let paths = match &args.paths {
        Some(path) => PathSet::read(BufReader::new(File::open(path)?), &graph, &snapped)?,
        None => {
            let grid = make_grid(&graph, &snapped, args.cell_miles, args.padding_miles)?;
            println!("grid {}x{} ({} mi cells)", grid.n_rows(), grid.n_cols(), args.cell_miles);
            pool.install(|| generate_path_set(&graph, &grid, &snapped, &coeffs, args.reps, args.seed))?
        }
    };

    let a_dist = pool.install(|| distance_adjacency(&graph, &snapped, args.sigma, args.kappa))?;
    let a_cooc = cooccurrence_matrix(&paths, snapped.len())?;
    let adjacency = combine_adjacency(a_dist, a_cooc, args.sigma, args.kappa)?;

    let prefix = args.out_prefix.display();
    let writes = [
        (format!("{prefix}.dist.csv"), &adjacency.a_dist),
        (format!("{prefix}.cooc.csv"), &adjacency.a_cooc),
        (format!("{prefix}.adj.csv"), &adjacency.a),
    ];
    for (path, matrix) in &writes {
        let mut out = create(Path::new(path))?;
        matrix.write(&mut out)?;
        out.flush()?;
    }

    let n = adjacency.n_sensors();
    let (_, mean_bc) = betweenness_centrality(&adjacency.a);
    println!("sensors: {n}");
    println!(
        "adjacency nnz: {} ({:.1}%)",
        adjacency.a.nnz(),
        100.0 * adjacency.a.nnz() as f64 / (n * n) as f64
    );
    println!("mean betweenness centrality: {mean_bc:.3e}");

    let mut manifest = RunManifest::new("build-graph", Some(args.seed));
    manifest
        .flag("sigma", args.sigma)
        .flag("kappa", args.kappa)
        .flag("cell_miles", args.cell_miles)
        .flag("padding_miles", args.padding_miles)
        .flag("coeffs", &args.coeffs)
        .flag("reps", args.reps)
        .flag("threads", args.threads)
        .flag("out_prefix", &prefix);
    for p in args.roads.digest_paths() {
        manifest.digest(p)?;
    }
    manifest.digest(&args.sensors)?;
    if let Some(p) = &args.paths {
        manifest.digest(p)?;
        manifest.flag("paths", p.display());
    }
    manifest.write_for(&args.out_prefix)?;
    Ok(())
}

fn cmd_build_activity(args: BuildActivityArgs) -> Result<(), CliError> {
    let rows = parse_survey_csv(BufReader::new(File::open(&args.input)?))?;
    let raw: ActivityTable<Real> = build_histogram(rows.iter().copied(), args.categories)?;
    let smoothed = smooth_histogram(&raw, args.sigma)?;
    let mut out = create(&args.out)?;
    smoothed.write_csv(&mut out)?;
    out.flush()?;

    let mut manifest = RunManifest::new("build-activity", None);
    manifest
        .flag("sigma", args.sigma)
        .flag("categories", args.categories)
        .flag("out", args.out.display());
    manifest.digest(&args.input)?;
    manifest.write_for(&args.out)?;
    println!(
        "binned {} survey rows into {} categories",
        rows.len(),
        args.categories
    );
    Ok(())
}

/// Loads and normalizes the activity table when the embedding mode needs
/// one.
fn load_activity(
    path: &Option<PathBuf>,
    mode: EmbeddingMode,
    center: bool,
) -> Result<Option<ActivityTable<Real>>, CliError> {
    if mode != EmbeddingMode::Activity {
        return Ok(None);
    }
    let path = path
        .as_ref()
        .ok_or_else(|| CliError::Usage("--activity is required for activity embedding".into()))?;
    let table = ActivityTable::<Real>::read_csv(BufReader::new(File::open(path)?))?;
    Ok(Some(normalize_activity(&table, center)))
}

fn load_graph_operators(
    path: &Option<PathBuf>,
    arch: Architecture,
) -> Result<Option<GraphOperators>, CliError> {
    if !arch.uses_graph() {
        return Ok(None);
    }
    let path = path.as_ref().ok_or_else(|| {
        CliError::Usage("--adjacency is required for graph-convolutional architectures".into())
    })?;
    let a = SparseMatrix::<Real>::read(BufReader::new(File::open(path)?))?;
    Ok(Some(GraphOperators::from_combined(&a)))
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let series = load_traffic_csv(BufReader::new(File::open(&args.traffic)?), !args.keep_zeros)?;
    verify_sensor_order(&series, &args.sensors)?;
    let split = DatasetSplit::with_fractions(&series, args.train_frac, args.val_frac)?;
    let activity = load_activity(&args.activity, args.embedding, !args.no_center)?;
    let graph = load_graph_operators(&args.adjacency, args.arch)?;

    let cfg = ModelConfig {
        n_sensors: series.n_sensors(),
        dim: args.dim,
        p_steps: args.p,
        q_steps: args.q,
        k_diffusion: args.k,
        n_layers: args.layers,
        n_heads: args.heads,
        d_key: args.d_key,
        embedding: args.embedding,
        use_sensor_embedding: !args.no_sensor_embedding,
        architecture: args.arch,
        n_activity_categories: activity.as_ref().map(|a| a.n_categories()).unwrap_or(0),
        center_activity: !args.no_center,
    };
    let mut model = Forecaster::new(cfg, graph, args.seed)?;
    println!("parameters: {}", model.n_parameters());

    let view = DatasetView {
        series: &series,
        split: &split,
        activity: activity.as_ref(),
    };
    let train_cfg = TrainConfig {
        batch_size: args.batch,
        learning_rate: args.lr,
        max_epochs: args.epochs,
        patience: args.patience,
        lr_reduce_trials: args.lr_trials,
        lr_factor: 0.1,
        seed: args.seed,
        threads: args.threads,
        scheduled_sampling_tau: args.scheduled_sampling,
        log_timing: args.log_timing,
    };
    let outcome = train(&mut model, &view, &train_cfg)?;
    for log in &outcome.logs {
        eprintln!(
            "epoch {:>3}: train_mae {:.4} val_mae {:.4} lr {}",
            log.epoch, log.train_mae, log.val_mae, log.lr
        );
    }

    save_checkpoint(&args.out, &model)?;
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.log", args.out.display())));
    let mut log_out = create(&log_path)?;
    for entry in &outcome.logs {
        writeln!(log_out, "{}", serde_json::to_string(entry).expect("log serializes"))?;
    }
    log_out.flush()?;

    let mut manifest = RunManifest::new("train", Some(args.seed));
    manifest
        .flag("arch", format!("{:?}", args.arch).to_lowercase())
        .flag("embedding", format!("{:?}", args.embedding).to_lowercase())
        .flag("dim", args.dim)
        .flag("p", args.p)
        .flag("q", args.q)
        .flag("k", args.k)
        .flag("layers", args.layers)
        .flag("heads", args.heads)
        .flag("d_key", args.d_key)
        .flag("batch", args.batch)
        .flag("lr", args.lr)
        .flag("epochs", args.epochs)
        .flag("patience", args.patience)
        .flag("lr_trials", args.lr_trials)
        .flag("sensor_embedding", !args.no_sensor_embedding)
        .flag("center_activity", !args.no_center)
        .flag("keep_zeros", args.keep_zeros)
        .flag("train_frac", args.train_frac)
        .flag("val_frac", args.val_frac)
        .flag("threads", args.threads)
        .flag("log_timing", args.log_timing)
        .flag("out", args.out.display());
    if let Some(tau) = args.scheduled_sampling {
        manifest.flag("scheduled_sampling", tau);
    }
    manifest.digest(&args.traffic)?;
    if let Some(p) = &args.adjacency {
        manifest.digest(p)?;
    }
    if let Some(p) = &args.activity {
        manifest.digest(p)?;
    }
    manifest.write_for(&args.out)?;
    println!(
        "best val mae {:.4} mph at epoch {} ({} epochs run)",
        outcome.best_val_mae, outcome.best_epoch, outcome.epochs_run
    );
    Ok(())
}

/// Rebuilds a checkpointed model plus the dataset view pieces it needs.
fn load_model_and_view(
    checkpoint: &Path,
    adjacency: &Option<PathBuf>,
    activity_path: &Option<PathBuf>,
) -> Result<(Forecaster, Option<ActivityTable<Real>>), CliError> {
    let (cfg, _) = load_checkpoint(checkpoint)?;
    let graph = load_graph_operators(adjacency, cfg.architecture)?;
    let model = Forecaster::from_checkpoint(checkpoint, graph)?;
    let activity = load_activity(activity_path, model.cfg.embedding, model.cfg.center_activity)?;
    Ok((model, activity))
}

fn format_metric(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v}"),
        None => "nan".to_string(),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let (model, activity) = load_model_and_view(&args.checkpoint, &args.adjacency, &args.activity)?;
    let series = load_traffic_csv(BufReader::new(File::open(&args.traffic)?), !args.keep_zeros)?;
    verify_sensor_order(&series, &args.sensors)?;
    let split = DatasetSplit::with_fractions(&series, args.train_frac, args.val_frac)?;
    let view = DatasetView {
        series: &series,
        split: &split,
        activity: activity.as_ref(),
    };
    let range = trainer::split_range(&split, &args.split)?;
    let windows = split.windows_in(range, model.cfg.p_steps, model.cfg.q_steps);
    if windows.is_empty() {
        return Err(CliError::Input(format!(
            "split `{}` has no complete windows",
            args.split
        )));
    }
    if let Some(name) = &args.baseline {
        if name != "last-repeat" {
            return Err(CliError::Usage(format!("unknown baseline `{name}`")));
        }
    }

    let acc = evaluate(&model, &view, &windows, args.batch, args.threads)?;
    let mut out = create(&args.out)?;
    writeln!(
        out,
        "# uagc-eval v1 split={:.2}/{:.2}/{:.2} range={} loss=masked-mae-standardized windows={}",
        args.train_frac,
        args.val_frac,
        1.0 - args.train_frac - args.val_frac,
        args.split,
        windows.len()
    )?;
    let baseline_acc = args
        .baseline
        .as_ref()
        .map(|_| trainer::evaluate_last_repeat(&view, &windows, model.cfg.p_steps, model.cfg.q_steps));
    if baseline_acc.is_some() {
        writeln!(out, "model,horizon_step,mae,rmse,mape_percent")?;
    } else {
        writeln!(out, "horizon_step,mae,rmse,mape_percent")?;
    }
    let write_rows = |label: Option<&str>,
                          acc: &crate::training::MetricAccumulator,
                          out: &mut BufWriter<File>|
     -> Result<(), CliError> {
        for step in acc.report_steps() {
            let m = acc.step_metrics(step);
            let (mae, rmse, mape) = match m {
                Some(m) => (Some(m.mae), Some(m.rmse), m.mape_percent),
                None => (None, None, None),
            };
            match label {
                Some(l) => writeln!(
                    out,
                    "{l},{step},{},{},{}",
                    format_metric(mae),
                    format_metric(rmse),
                    format_metric(mape)
                )?,
                None => writeln!(
                    out,
                    "{step},{},{},{}",
                    format_metric(mae),
                    format_metric(rmse),
                    format_metric(mape)
                )?,
            }
        }
        Ok(())
    };
    let model_label = baseline_acc.is_some().then_some("model");
    write_rows(model_label, &acc, &mut out)?;
    if let Some(base) = &baseline_acc {
        write_rows(Some("last-repeat"), base, &mut out)?;
    }
    out.flush()?;

    let mut manifest = RunManifest::new("eval", None);
    manifest
        .flag("split", &args.split)
        .flag("batch", args.batch)
        .flag("threads", args.threads)
        .flag("train_frac", args.train_frac)
        .flag("val_frac", args.val_frac)
        .flag("keep_zeros", args.keep_zeros)
        .flag("out", args.out.display());
    if let Some(b) = &args.baseline {
        manifest.flag("baseline", b);
    }
    manifest.digest(&args.checkpoint)?;
    manifest.digest(&args.traffic)?;
    if let Some(p) = &args.adjacency {
        manifest.digest(p)?;
    }
    if let Some(p) = &args.activity {
        manifest.digest(p)?;
    }
    manifest.write_for(&args.out)?;

    for step in acc.report_steps() {
        if let Some(m) = acc.step_metrics(step) {
            println!(
                "step {step}: mae {:.4} rmse {:.4} mape {}",
                m.mae,
                m.rmse,
                m.mape_percent
                    .map(|v| format!("{v:.2}%"))
                    .unwrap_or_else(|| "nan".into())
            );
        }
    }
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<(), CliError> {
    let (model, activity) = load_model_and_view(&args.checkpoint, &args.adjacency, &args.activity)?;
    let series = load_traffic_csv(BufReader::new(File::open(&args.traffic)?), !args.keep_zeros)?;
    verify_sensor_order(&series, &args.sensors)?;
    if series.n_sensors() != model.cfg.n_sensors {
        return Err(CliError::Input(format!(
            "traffic file has {} sensors, model expects {}",
            series.n_sensors(),
            model.cfg.n_sensors
        )));
    }
    let split = DatasetSplit::with_fractions(&series, args.train_frac, args.val_frac)?;
    let start = NaiveDateTime::parse_from_str(&args.start, "%Y-%m-%dT%H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(&args.start, "%Y-%m-%d %H:%M:%S"))
        .map_err(|_| CliError::Input(format!("bad timestamp `{}`", args.start)))?;
    let delta = start - series.timestamp(0);
    let minutes = delta.num_minutes();
    if minutes < 0 || minutes % 5 != 0 {
        return Err(CliError::Input(format!(
            "start `{}` is not on the series' 5-minute grid",
            args.start
        )));
    }
    let first_pred_step = (minutes / 5) as usize;
    if first_pred_step < model.cfg.p_steps || first_pred_step > series.n_steps() {
        return Err(CliError::Input(format!(
            "need {} history steps before `{}` inside the series",
            model.cfg.p_steps, args.start
        )));
    }
    let window = first_pred_step - model.cfg.p_steps;

    let view = DatasetView {
        series: &series,
        split: &split,
        activity: activity.as_ref(),
    };
    view.validate_for(&model)?;
    let preds = trainer::predict_windows(&model, &view, &[window]);
    let mut out = create(&args.out)?;
    write!(out, "timestamp")?;
    for id in &series.sensor_ids {
        write!(out, ",{id}")?;
    }
    writeln!(out)?;
    let n = model.cfg.n_sensors;
    for step in 0..model.cfg.q_steps {
        let t = start + chrono::TimeDelta::minutes(5 * step as i64);
        write!(out, "{}", t.format("%Y-%m-%dT%H:%M:%S"))?;
        for s in 0..n {
            write!(out, ",{}", preds[0][step * n + s])?;
        }
        writeln!(out)?;
    }
    out.flush()?;

    let mut manifest = RunManifest::new("predict", None);
    manifest
        .flag("start", &args.start)
        .flag("keep_zeros", args.keep_zeros)
        .flag("out", args.out.display());
    manifest.digest(&args.checkpoint)?;
    manifest.digest(&args.traffic)?;
    if let Some(p) = &args.adjacency {
        manifest.digest(p)?;
    }
    if let Some(p) = &args.activity {
        manifest.digest(p)?;
    }
    manifest.write_for(&args.out)?;
    println!("wrote {} prediction steps", model.cfg.q_steps);
    Ok(())
}

fn parse_window_start(s: &str) -> Result<usize, CliError> {
    let (h, m) = s
        .split_once(':')
        .ok_or_else(|| CliError::Input(format!("bad window `{s}`, expected HH:MM")))?;
    let h: usize = h
        .parse()
        .map_err(|_| CliError::Input(format!("bad window `{s}`")))?;
    let m: usize = m
        .parse()
        .map_err(|_| CliError::Input(format!("bad window `{s}`")))?;
    if h > 23 || m > 59 {
        return Err(CliError::Input(format!("window `{s}` out of range")));
    }
    if m % 5 != 0 {
        return Err(CliError::Input(format!(
            "window `{s}` is not representable on the 5-minute grid"
        )));
    }
    Ok(h * 60 + m)
}

/// Embedding inputs for a scenario window starting at (weekday, minute).
fn scenario_embedding_rows(
    model: &Forecaster,
    activity: Option<&ActivityTable<Real>>,
    weekday: usize,
    start_minute: usize,
) -> Vec<Tensor<Real>> {
    let cfg = &model.cfg;
    let steps = cfg.p_steps + cfg.q_steps;
    let mut rows = Vec::with_capacity(steps);
    for i in 0..steps {
        let total = start_minute + 5 * i;
        let w = (weekday + total / 1440) % 7;
        let minute = total % 1440;
        let values: Vec<Real> = match cfg.embedding {
            EmbeddingMode::Activity => {
                let bin = w * BINS_PER_DAY + minute / 5;
                activity.expect("validated").bin_vector(bin)
            }
            EmbeddingMode::Timestamp => {
                let mut v = vec![0.0; crate::activity::TIMESTAMP_FEATURE_LEN];
                v[w] = 1.0;
                v[7 + minute / 5] = 1.0;
                v
            }
            EmbeddingMode::None => Vec::new(),
        };
        rows.push(Tensor::from_vec(&[1, values.len()], values));
    }
    rows
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let (model, activity) = load_model_and_view(&args.checkpoint, &args.adjacency, &args.activity)?;
    let cfg = &model.cfg;
    if args.weekday > 6 {
        return Err(CliError::Usage("--weekday must be 0..=6".into()));
    }
    if args.horizon_step == 0 || args.horizon_step > cfg.q_steps {
        return Err(CliError::Usage(format!(
            "--horizon-step must be in 1..={}",
            cfg.q_steps
        )));
    }
    if cfg.embedding == EmbeddingMode::None {
        return Err(CliError::Usage(
            "the checkpoint has no activity/timestamp embedding; scenarios cannot differ".into(),
        ));
    }
    let sensor_ids: Vec<String> = match &args.sensors {
        Some(path) => {
            let sensors = parse_sensor_csv(BufReader::new(File::open(path)?))?;
            if sensors.len() != cfg.n_sensors {
                return Err(CliError::Input(format!(
                    "sensors file has {} rows, model expects {}",
                    sensors.len(),
                    cfg.n_sensors
                )));
            }
            sensors.into_iter().map(|s| s.sensor_id).collect()
        }
        None => (0..cfg.n_sensors).map(|i| format!("sensor_{i}")).collect(),
    };

    let mean_id = model.store.id("scaler.mean").expect("scaler stored");
    let std_id = model.store.id("scaler.std").expect("scaler stored");
    let mean = model.store.get(mean_id).value.data()[0];
    let std = model.store.get(std_id).value.data()[0];
    // The constant history enters the model in standardized units.
    let standardized = (args.speed - mean) / std;

    let minute1 = parse_window_start(&args.window1)?;
    let minute2 = parse_window_start(&args.window2)?;

    let run_scenario = |start_minute: usize| -> Vec<Real> {
        let history = (0..cfg.p_steps)
            .map(|_| Tensor::filled(&[cfg.n_sensors, 1], standardized))
            .collect();
        let inputs = BatchInputs {
            batch: 1,
            history,
            embedding_rows: scenario_embedding_rows(&model, activity.as_ref(), args.weekday, start_minute),
        };
        let mut tape = Tape::new();
        let preds = model.forward(&mut tape, &inputs, None);
        let step = args.horizon_step - 1;
        (0..cfg.n_sensors)
            .map(|s| mean + std * tape.value(preds).data()[s * cfg.q_steps + step])
            .collect()
    };
    let pred1 = run_scenario(minute1);
    let pred2 = run_scenario(minute2);

    let mut out = create(&args.out)?;
    writeln!(out, "sensor_id,pred1_mph,pred2_mph,delta_mph")?;
    for (i, id) in sensor_ids.iter().enumerate() {
        writeln!(out, "{id},{},{},{}", pred1[i], pred2[i], pred1[i] - pred2[i])?;
    }
    out.flush()?;

    let mut manifest = RunManifest::new("simulate", None);
    manifest
        .flag("speed", args.speed)
        .flag("weekday", args.weekday)
        .flag("window1", &args.window1)
        .flag("window2", &args.window2)
        .flag("horizon_step", args.horizon_step)
        .flag("out", args.out.display());
    manifest.digest(&args.checkpoint)?;
    if let Some(p) = &args.adjacency {
        manifest.digest(p)?;
    }
    if let Some(p) = &args.activity {
        manifest.digest(p)?;
    }
    if let Some(p) = &args.sensors {
        manifest.digest(p)?;
    }
    manifest.write_for(&args.out)?;

    let max_delta = pred1
        .iter()
        .zip(&pred2)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("max |delta|: {max_delta:.3} mph");
    Ok(())
}
