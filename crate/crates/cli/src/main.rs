use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use elicit_core::analytics::{Corpus, Report};
use elicit_core::catalog::Catalog;
use elicit_core::choice::{
    choose_nrec, expected_utility, optimal_slate, Beliefs, GoodBelief, MonteCarlo, Outcomes, SignalModel, Truths,
    UtilityFunction,
};
use elicit_core::dataset::{self, validate_corpus, ElicitRequestRecord};
use elicit_core::pool::{build_pool_detailed, write_pool, Criterion, PoolConfig};
use elicit_core::sampler::{
    rank_top_picks, sample_batch, BatchId, ElicitationHistory, ItemMeanPredictor, SamplingContext, TOP_PICKS_WINDOW,
};
use elicit_core::simulator::{self, SimConfig};
use elicit_core::types::{date_of, end_of_day, parse_date, start_of_day, MovieId, UserId};
use elicit_service::{Service, ServiceConfig, SystemClock};

#[derive(Debug, Parser)]
#[command(name = "elicit", version, about = "Belief elicitation pipeline tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Monthly elicitation pool.
    #[command(subcommand)]
    Pool(PoolCommand),
    /// Draw one elicitation batch for a user from a catalog directory.
    Sample(SampleArgs),
    /// Expected-utility choice model.
    #[command(subcommand)]
    Choice(ChoiceCommand),
    /// Run the agent-based simulator and write its logs.
    Simulate(SimulateArgs),
    /// Compute the summary statistics report over a log directory.
    Analyze(AnalyzeArgs),
    /// Check every table in a log directory.
    Validate(ValidateArgs),
    /// Start the HTTP elicitation service.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
enum PoolCommand {
    Build(PoolBuildArgs),
}

#[derive(Debug, Args)]
struct PoolBuildArgs {
    #[arg(long, value_parser = parse_date_arg)]
    as_of: NaiveDate,
    #[arg(long, default_value_t = 11.0)]
    y: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Directory holding movies.csv and ratings.csv.
    #[arg(long, default_value = "data")]
    catalog: PathBuf,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    user: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory holding movies.csv, ratings.csv and optionally elicit_log.csv.
    #[arg(long, default_value = "data")]
    dir: PathBuf,
    /// Sampling instant; defaults to the day after the last rating.
    #[arg(long, value_parser = parse_date_arg)]
    as_of: Option<NaiveDate>,
    #[arg(long, default_value_t = 11.0)]
    y: f64,
}

#[derive(Debug, Args)]
struct GoodsArgs {
    /// Comma-separated belief means, one per good (ids 1..n).
    #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
    mean: Vec<f64>,
    /// Comma-separated belief standard deviations.
    #[arg(long, value_delimiter = ',', required = true)]
    sd: Vec<f64>,
    /// `linear`, `power:A` or `exp:A`.
    #[arg(long, default_value = "linear")]
    utility: UtilityFunction,
}

impl GoodsArgs {
    fn beliefs(&self) -> Result<Beliefs, String> {
        if self.mean.len() != self.sd.len() {
            return Err(format!("{} means but {} sds", self.mean.len(), self.sd.len()));
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.sd)
            .enumerate()
            .map(|(i, (m, s))| (MovieId(i as u32 + 1), GoodBelief::normal(*m, *s)))
            .collect())
    }
}

#[derive(Debug, Subcommand)]
enum ChoiceCommand {
    /// Expected utility of each good and the choice without recommendations.
    Eval(GoodsArgs),
    /// Exhaustive search for the most valuable k-slate.
    OptSlate(OptSlateArgs),
}

#[derive(Debug, Args)]
struct OptSlateArgs {
    #[command(flatten)]
    goods: GoodsArgs,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 1.0)]
    signal_sd: f64,
    #[arg(long, default_value_t = 2_000)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Known true values; without them, outcomes are drawn from the beliefs.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    truth: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// key=value configuration; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long)]
    dir: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "DATA_DIR", default_value = "data")]
    data: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
}

fn parse_date_arg(s: &str) -> Result<NaiveDate, String> {
    parse_date(s).ok_or_else(|| format!("expected YYYY-MM-DD, got {s:?}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pool(PoolCommand::Build(args)) => pool_build(&args),
        Command::Sample(args) => sample(&args),
        Command::Choice(ChoiceCommand::Eval(args)) => choice_eval(&args),
        Command::Choice(ChoiceCommand::OptSlate(args)) => choice_opt_slate(&args),
        Command::Simulate(args) => simulate(&args),
        Command::Analyze(args) => analyze(&args),
        Command::Validate(args) => return validate(&args),
        Command::Serve(args) => serve(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_catalog(dir: &Path) -> Result<Catalog, String> {
    Catalog::ingest(&dir.join(dataset::MOVIES_FILE), &dir.join(dataset::RATINGS_FILE)).map_err(|e| e.to_string())
}

fn pool_build(args: &PoolBuildArgs) -> Result<(), String> {
    let catalog = load_catalog(&args.catalog)?;
    let snapshot = catalog.snapshot(args.as_of);
    let shares = catalog.genre_shares().map_err(|e| e.to_string())?;
    let config = PoolConfig {
        y: args.y,
        rng_seed: args.seed,
        ..PoolConfig::default()
    };
    let build = build_pool_detailed(&snapshot, &shares, &config).map_err(|e| e.to_string())?;
    let file = File::create(&args.out).map_err(|e| format!("{}: {e}", args.out.display()))?;
    write_pool(&build.pool, BufWriter::new(file)).map_err(|e| format!("{}: {e}", args.out.display()))?;

    println!("month          {}", build.pool.month);
    println!("size           {}", build.pool.len());
    println!("bound          {}", (100.0 * args.y).ceil() as usize + 90);
    for c in Criterion::ALL {
        println!("{:<14} {}", c.name(), build.pool.count_with(c));
    }
    Ok(())
}

fn sample(args: &SampleArgs) -> Result<(), String> {
    let catalog = load_catalog(&args.dir)?;
    let as_of = match args.as_of {
        Some(d) => d,
        None => catalog
            .events()
            .iter()
            .map(|e| e.timestamp)
            .max()
            .map_or_else(|| chrono::Utc::now().date_naive(), |t| date_of(t).succ_opt().unwrap_or(date_of(t))),
    };
    let now = start_of_day(as_of);
    let user = UserId(args.user);
    let snapshot = catalog.snapshot(as_of);
    let shares = catalog.genre_shares().map_err(|e| e.to_string())?;
    let config = PoolConfig {
        y: args.y,
        rng_seed: args.seed,
        ..PoolConfig::default()
    };
    let pool = build_pool_detailed(&snapshot, &shares, &config)
        .map_err(|e| e.to_string())?
        .pool;

    let rated: BTreeSet<MovieId> = catalog
        .rated_by_user(end_of_day(as_of))
        .remove(&user)
        .unwrap_or_default();
    let mut history = ElicitationHistory::new();
    let log_path = args.dir.join(dataset::ELICIT_LOG_FILE);
    if log_path.exists() {
        let mut rows: Vec<ElicitRequestRecord> = dataset::read_table(&log_path).map_err(|e| e.to_string())?;
        rows.retain(|r| r.user_id == user && r.timestamp <= now);
        rows.sort_by_key(|r| r.timestamp);
        for r in rows {
            history
                .record_presentation(r.user_id, r.movie_id, r.timestamp, r.batch_id)
                .map_err(|e| e.to_string())?;
        }
    }
    let predictor = ItemMeanPredictor::from_snapshot(&snapshot);
    let released = catalog
        .movies()
        .filter(|m| m.release_date.is_none_or(|d| d <= as_of) && !rated.contains(&m.id))
        .map(|m| m.id);
    let top_picks = rank_top_picks(user, released, &predictor, TOP_PICKS_WINDOW);
    let recent = catalog.recent_releases(as_of, config.recent_threshold_months);
    let ctx = SamplingContext {
        pool: &pool,
        rated: &rated,
        history: &history,
        predictor: &predictor,
        top_picks: &top_picks,
        recent: &recent,
        now,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let batch = sample_batch(&ctx, user, BatchId(1), &mut rng);

    println!("user {} as of {} (pool {} movies)", user, as_of, pool.len());
    println!("{:<5} {:>8} {:<6} title", "slot", "movieId", "source");
    for (i, s) in batch.slots.iter().enumerate() {
        let title = catalog.movie(s.movie_id).map_or("", |m| m.title.as_str());
        println!("{:<5} {:>8} {:<6} {}", i + 1, s.movie_id.to_string(), s.source.to_string(), title);
    }
    if let Some(reason) = &batch.shortfall_reason {
        println!("shortfall: {reason}");
    }
    Ok(())
}

fn choice_eval(args: &GoodsArgs) -> Result<(), String> {
    let beliefs = args.beliefs()?;
    let choice = choose_nrec(&beliefs, &args.utility).map_err(|e| e.to_string())?;
    let mut out = io::stdout().lock();
    let _ = writeln!(out, "{:>4} {:>10} {:>10} {:>14}  chosen", "good", "mean", "sd", "expected_u");
    for (id, b) in &beliefs {
        let eu = expected_utility(b, &args.utility).map_err(|e| e.to_string())?;
        let mark = if *id == choice { "*" } else { "" };
        let _ = writeln!(out, "{:>4} {:>10.4} {:>10.4} {:>14.8}  {mark}", id.to_string(), b.mean(), b.sd(), eu);
    }
    Ok(())
}

fn choice_opt_slate(args: &OptSlateArgs) -> Result<(), String> {
    let beliefs = args.goods.beliefs()?;
    let signal = SignalModel::new(args.signal_sd).map_err(|e| e.to_string())?;
    let mc = MonteCarlo {
        draws: args.draws,
        seed: args.seed,
    };
    let truths: Option<Truths> = match &args.truth {
        None => None,
        Some(t) if t.len() != beliefs.len() => {
            return Err(format!("{} truths for {} goods", t.len(), beliefs.len()));
        }
        Some(t) => Some(beliefs.keys().copied().zip(t.iter().copied()).collect()),
    };
    let outcomes = match &truths {
        Some(t) => Outcomes::Known(t),
        None => Outcomes::PriorPredictive,
    };
    let candidates: Vec<MovieId> = beliefs.keys().copied().collect();
    let search = optimal_slate(&beliefs, outcomes, &signal, &args.goods.utility, args.k, &candidates, &mc)
        .map_err(|e| e.to_string())?;

    let mut out = io::stdout().lock();
    let _ = writeln!(
        out,
        "{:<16} {:>12} {:>10} {:>12} {:>8}",
        "slate", "u_star_rec", "std_err", "value", "switch"
    );
    for v in &search.evaluated {
        let ids: Vec<String> = v.slate.iter().map(ToString::to_string).collect();
        let _ = writeln!(
            out,
            "{:<16} {:>12.6} {:>10.6} {:>12.6} {:>8.4}",
            ids.join("|"),
            v.u_star_rec,
            v.std_err,
            v.value(),
            v.switch_rate
        );
    }
    let best: Vec<String> = search.best.slate.iter().map(ToString::to_string).collect();
    let _ = writeln!(out, "best {} u_star_nrec {:.6}", best.join("|"), search.best.u_star_nrec);
    Ok(())
}

fn simulate(args: &SimulateArgs) -> Result<(), String> {
    let config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            SimConfig::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?
        }
        None => SimConfig::default(),
    };
    let logs = simulator::run(&config).map_err(|e| e.to_string())?;
    logs.write(&args.out, &config).map_err(|e| e.to_string())?;
    println!("config_sha256 {}", config.digest());
    println!("ratings       {}", logs.ratings.len());
    println!("beliefs       {}", logs.beliefs.len());
    println!("requests      {}", logs.requests.len());
    println!("rec_log       {}", logs.rec_log.len());
    println!("consumption   {}", logs.consumption.len());
    Ok(())
}

fn analyze(args: &AnalyzeArgs) -> Result<(), String> {
    let corpus = Corpus::load(&args.dir).map_err(|e| e.to_string())?;
    let report = Report::compute(&corpus);
    report
        .write(&args.report)
        .map_err(|e| format!("{}: {e}", args.report.display()))?;
    print!("{report}");
    Ok(())
}

fn validate(args: &ValidateArgs) -> ExitCode {
    let report = validate_corpus(&args.dir);
    print!("{report}");
    if report.violations.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn serve(args: &ServeArgs) -> Result<(), String> {
    let mut config = ServiceConfig::from_env()?;
    config.data_dir = args.data.clone();
    let service = Service::open(config, Arc::new(SystemClock)).map_err(|e| e.to_string())?;
    let addr = SocketAddr::new(args.host, args.port);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    runtime
        .block_on(elicit_service::serve(Arc::new(service), addr))
        .map_err(|e| format!("{addr}: {e}"))
}
