use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use crossview_core::gmcp;
use crossview_core::metric::train_embedder;
use crossview_core::pipeline::io::{emit_records, read_records, read_results, write_results};
use crossview_core::pipeline::{
    bench_runtime, embed_records, group_queries, k_sweep, BenchRow, ImageIndex, DEFAULT_THRESHOLDS_M,
};
use crossview_core::synth::{make_pair_dataset, Split};
use crossview_core::{
    evaluate, AffinityParams, BuildingRecord, Embedder, EmbedderShape, GpsCoord, LocalizeConfig, Localizer, Method,
    Query, ReferenceIndex, SynthConfig, TrainConfig, View,
};
use thiserror::Error;

#[derive(Parser)]
#[command(
    name = "crossview",
    version,
    about = "Cross-view building matching and geo-localization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic city as JSONL records.
    Synth(SynthArgs),
    /// Fit an embedder on matched cross-view records.
    Train(TrainArgs),
    /// Fill record embeddings with a trained model.
    Embed(EmbedArgs),
    /// Localize queries and write per-query results.
    Localize(LocalizeArgs),
    /// Accuracy-versus-threshold curves from results.
    Eval(EvalArgs),
    /// Time the dominant-set and exact GMCP solvers on random graphs.
    Bench(BenchArgs),
    /// Domset accuracy at one threshold for several k.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; receives records.jsonl, train.jsonl and test.jsonl.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "synth")]
    city: String,
    #[arg(long, default_value_t = 400)]
    locations: usize,
    #[arg(long, default_value_t = 40.44, allow_negative_numbers = true)]
    origin_lat: f64,
    #[arg(long, default_value_t = -80.0, allow_negative_numbers = true)]
    origin_lon: f64,
    #[arg(long, default_value_t = 0.2)]
    train_fraction: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Records with match ids, both views.
    #[arg(long)]
    records: PathBuf,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    margin: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    learning_rate: f64,
    /// Unmatched pairs sampled per matched pair.
    #[arg(long, default_value_t = 20)]
    negatives: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Width of an optional ReLU hidden layer.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GmcpMode {
    /// Exact when within the enumeration budget, local search otherwise.
    Auto,
    /// Always exact; fails with exit code 3 beyond the budget.
    Exact,
}

#[derive(Args)]
struct QueryArgs {
    /// Reference records; only those of the view opposite to the queries are used.
    #[arg(long)]
    refs: PathBuf,
    /// Query records; only those of `--query-view` are used.
    #[arg(long)]
    queries: PathBuf,
    /// Model used to embed records lacking embeddings, and for full-image matching.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ViewArg::Street)]
    query_view: ViewArg,
    /// Images per query: 1 or 4.
    #[arg(long, default_value_t = 1)]
    views: usize,
    /// Neighbors per query building [default: 100 for street queries, 10 for bird].
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0.3)]
    sigma: f64,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ViewArg {
    Street,
    Bird,
}

impl From<ViewArg> for View {
    fn from(v: ViewArg) -> View {
        match v {
            ViewArg::Street => View::Street,
            ViewArg::Bird => View::Bird,
        }
    }
}

#[derive(Args)]
struct LocalizeArgs {
    #[command(flatten)]
    query: QueryArgs,
    /// Results CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Method to run; repeat for several [default: domset].
    #[arg(long = "method", value_parser = parse_method)]
    methods: Vec<Method>,
    #[arg(long, value_enum, default_value_t = GmcpMode::Auto)]
    gmcp: GmcpMode,
    /// Local-search restarts for GMCP beyond the enumeration budget.
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    /// Record per-query wall-clock time (makes the output run-dependent).
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    results: PathBuf,
    /// Curves CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated thresholds in meters.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_THRESHOLDS_M)]
    thresholds: Vec<f64>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 3, 4])]
    nc: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 3, 4, 5, 6, 7, 8, 9, 10])]
    k: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    query: QueryArgs,
    /// CSV with header `k,accuracy`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 10, 50, 100])]
    ks: Vec<usize>,
    #[arg(long, default_value_t = 300.0)]
    threshold: f64,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: crossview_core::Error| e.to_string())
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        source: crossview_core::Error,
    },
    #[error(transparent)]
    Core(#[from] crossview_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        let core = match self {
            CliError::Usage(_) => return 1,
            CliError::File { source, .. } => source,
            CliError::Core(e) => e,
        };
        match core {
            crossview_core::Error::Scale(_) => 3,
            crossview_core::Error::Config(_) => 1,
            _ => 2,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn at_path<T>(path: &Path, r: crossview_core::Result<T>) -> CliResult<T> {
    r.map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn open(path: &Path) -> CliResult<File> {
    at_path(path, File::open(path).map_err(Into::into))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    at_path(path, File::create(path).map(BufWriter::new).map_err(Into::into))
}

fn load_records(path: &Path) -> CliResult<Vec<BuildingRecord>> {
    at_path(path, read_records(open(path)?))
}

fn load_model(path: &Path) -> CliResult<Embedder> {
    at_path(path, Embedder::read_from(BufReader::new(open(path)?)))
}

fn synth(args: SynthArgs) -> CliResult<()> {
    let config = SynthConfig {
        city: args.city,
        origin: GpsCoord::new(args.origin_lat, args.origin_lon).map_err(|e| CliError::Usage(e.to_string()))?,
        n_locations: args.locations,
        train_fraction: args.train_fraction,
        seed: args.seed,
        ..SynthConfig::default()
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let city = crossview_core::generate(&config)?;
    at_path(&args.out, fs::create_dir_all(&args.out).map_err(Into::into))?;
    for (name, split) in [
        ("records.jsonl", Split::All),
        ("train.jsonl", Split::Train),
        ("test.jsonl", Split::Test),
    ] {
        let path = args.out.join(name);
        let records = city.all_records(split);
        at_path(&path, emit_records(&records, &path))?;
        log::info!("wrote {} records to {}", records.len(), path.display());
    }
    Ok(())
}

fn train(args: TrainArgs) -> CliResult<()> {
    let records = load_records(&args.records)?;
    let input_dim = records
        .first()
        .map(|r| r.raw_features.len())
        .ok_or_else(|| CliError::File {
            path: args.records.clone(),
            source: crossview_core::Error::InsufficientData("no records".into()),
        })?;
    let (street, bird): (Vec<BuildingRecord>, Vec<BuildingRecord>) =
        records.into_iter().partition(|r| r.view == View::Street);
    let pairs = make_pair_dataset(&street, &bird, args.negatives, args.seed)?;
    let config = TrainConfig {
        shape: EmbedderShape {
            input_dim,
            hidden: args.hidden,
            output_dim: args.dim,
        },
        margin: args.margin,
        epochs: args.epochs,
        learning_rate: args.learning_rate,
        seed: args.seed,
    };
    let outcome = train_embedder(&pairs, &config).map_err(|e| match e {
        crossview_core::Error::InvalidParameter(m) => CliError::Usage(m),
        other => other.into(),
    })?;
    log::info!(
        "{} pairs; loss {:.6} -> {:.6} (epoch {})",
        pairs.len(),
        outcome.loss_curve[0],
        outcome.loss_curve[outcome.best_epoch],
        outcome.best_epoch
    );
    at_path(&args.out, outcome.embedder.write_to(create(&args.out)?))
}

fn embed(args: EmbedArgs) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let mut records = load_records(&args.records)?;
    at_path(&args.records, embed_records(&mut records, &model))?;
    at_path(&args.out, emit_records(&records, &args.out))
}

/// Everything a localization run needs, loaded and embedded.
struct Loaded {
    index: ReferenceIndex,
    images: Option<ImageIndex>,
    model: Option<Embedder>,
    queries: Vec<Query>,
    config: LocalizeConfig,
}

fn ensure_embedded(records: &mut [BuildingRecord], model: Option<&Embedder>, path: &Path) -> CliResult<()> {
    if records.iter().all(|r| r.embedding.is_some()) {
        return Ok(());
    }
    let model = model.ok_or_else(|| CliError::File {
        path: path.to_path_buf(),
        source: crossview_core::Error::Retrieval("records lack embeddings and no --model was given".into()),
    })?;
    at_path(path, embed_records(records, model))
}

fn load_queries(args: &QueryArgs, need_images: bool) -> CliResult<Loaded> {
    let view: View = args.query_view.into();
    let affinity = AffinityParams {
        sigma: args.sigma,
        alpha: args.alpha,
        ..AffinityParams::default()
    };
    affinity.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if args.k == Some(0) {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    if args.views != 1 && args.views != 4 {
        return Err(CliError::Usage(format!("--views must be 1 or 4, got {}", args.views)));
    }
    let model = args.model.as_deref().map(load_model).transpose()?;
    if need_images && model.is_none() {
        return Err(CliError::Usage("full_image needs --model".into()));
    }

    let mut refs: Vec<BuildingRecord> = load_records(&args.refs)?
        .into_iter()
        .filter(|r| r.view == view.opposite())
        .collect();
    ensure_embedded(&mut refs, model.as_ref(), &args.refs)?;
    let images = match &model {
        Some(m) if need_images => Some(at_path(&args.refs, ImageIndex::new(&refs, m))?),
        _ => None,
    };
    let index = at_path(&args.refs, ReferenceIndex::new(refs))?;

    let mut records: Vec<BuildingRecord> = load_records(&args.queries)?
        .into_iter()
        .filter(|r| r.view == view)
        .collect();
    ensure_embedded(&mut records, model.as_ref(), &args.queries)?;
    let queries = at_path(&args.queries, group_queries(&records, view, args.views, args.seed))?;
    let config = LocalizeConfig {
        k: args.k,
        affinity,
        seed: args.seed,
        ..LocalizeConfig::default()
    };
    Ok(Loaded {
        index,
        images,
        model,
        queries,
        config,
    })
}

fn localize(args: LocalizeArgs) -> CliResult<()> {
    let methods = if args.methods.is_empty() {
        vec![Method::Domset]
    } else {
        args.methods
    };
    let mut loaded = load_queries(&args.query, methods.contains(&Method::FullImage))?;
    loaded.config.gmcp_restarts = args.restarts;
    loaded.config.timing = args.timing;
    if args.gmcp == GmcpMode::Exact && methods.contains(&Method::Gmcp) {
        check_gmcp_budget(&loaded)?;
    }
    let localizer = Localizer::new(&loaded.index, loaded.images.as_ref());
    let results = localizer.run(&loaded.queries, &methods, &loaded.config, loaded.model.as_ref())?;
    log::info!("{} queries, {} results", loaded.queries.len(), results.len());
    at_path(&args.out, write_results(&results, create(&args.out)?))
}

/// Fails with a scale error if any query's exact GMCP would exceed the
/// enumeration budget.
fn check_gmcp_budget(loaded: &Loaded) -> CliResult<()> {
    for q in &loaded.queries {
        let k = loaded.config.k_for(q.view).min(loaded.index.len()) as u64;
        let combos = k.saturating_pow(q.buildings.len() as u32);
        if combos > gmcp::ENUMERATION_BUDGET {
            return Err(crossview_core::Error::Scale(format!(
                "query {} needs {combos} GMCP combinations, over the budget of {}",
                q.id,
                gmcp::ENUMERATION_BUDGET
            ))
            .into());
        }
    }
    Ok(())
}

fn eval(args: EvalArgs) -> CliResult<()> {
    let results = at_path(&args.results, read_results(open(&args.results)?))?;
    let curve = evaluate(&results, &args.thresholds).map_err(|e| match e {
        crossview_core::Error::InvalidParameter(m) => CliError::Usage(m),
        other => CliError::File {
            path: args.results.clone(),
            source: other,
        },
    })?;
    at_path(&args.out, curve.write_csv(create(&args.out)?))
}

fn bench(args: BenchArgs) -> CliResult<()> {
    if args.nc.contains(&0) || args.k.contains(&0) || args.trials == 0 {
        return Err(CliError::Usage("--nc, --k and --trials must be at least 1".into()));
    }
    let rows = bench_runtime(&args.nc, &args.k, args.trials, args.seed)?;
    at_path(&args.out, BenchRow::write_csv(&rows, create(&args.out)?))
}

fn sweep(args: SweepArgs) -> CliResult<()> {
    if args.ks.contains(&0) {
        return Err(CliError::Usage("--ks entries must be at least 1".into()));
    }
    let loaded = load_queries(&args.query, false)?;
    let localizer = Localizer::new(&loaded.index, None);
    let points = k_sweep(&localizer, &loaded.queries, &args.ks, args.threshold, &loaded.config)?;
    let mut w = create(&args.out)?;
    let written = (|| {
        writeln!(w, "k,accuracy")?;
        for (k, a) in &points {
            writeln!(w, "{k},{a}")?;
        }
        w.flush()
    })();
    at_path(&args.out, written.map_err(Into::into))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Embed(a) => embed(a),
        Command::Localize(a) => localize(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
