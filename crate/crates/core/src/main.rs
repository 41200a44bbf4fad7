use std::fs::{self, File};
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use stream_qif::engine::default_q_grid;
use stream_qif::io::{self as sio, StateFile, StateLock};
use stream_qif::offline::{offline_fit, CumulativeData};
use stream_qif::sim::{self, SimDesign};
use stream_qif::{inference, q_grid, BasisSet, Error, Family, ModelSpec, QMode, Result, SolverConfig, StreamEngine};

#[derive(Parser)]
#[command(name = "stream-qif", version, about = "Streaming QIF estimation for longitudinal panels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation design; writes data.csv (replicate 0) and metrics.csv.
    Simulate {
        #[arg(long)]
        design: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Absorb one batch into a persisted engine state.
    FitStream(FitStreamArgs),
    /// Dense fit on the cumulative data.
    FitOffline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        q: f64,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Streaming AR(1) against working independence on the same replicates.
    Compare {
        #[arg(long)]
        design: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value = "gaussian")]
    family: Family,
    /// ar1 (identity plus AR(1) basis) or independence
    #[arg(long, default_value = "ar1", value_parser = parse_basis)]
    basis: BasisSet,
}

#[derive(Args)]
struct FitStreamArgs {
    #[arg(long)]
    state: PathBuf,
    #[arg(long)]
    batch: PathBuf,
    #[arg(long)]
    t: f64,
    /// Create a new state from this batch.
    #[arg(long)]
    init: bool,
    #[arg(long, conflicts_with = "q_grid")]
    q: Option<f64>,
    /// a_min,a_max,count for q = exp(-a B^0.3)
    #[arg(long, value_delimiter = ',', num_args = 3)]
    q_grid: Option<Vec<f64>>,
    /// B in the candidate grid formula.
    #[arg(long, default_value_t = 200)]
    horizon: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Report CSV; rows are appended across invocations.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_basis(s: &str) -> std::result::Result<BasisSet, String> {
    match s {
        "ar1" => Ok(BasisSet::Ar1),
        "independence" => Ok(BasisSet::Independence),
        _ => Err(format!("unknown basis '{s}' (expected ar1 or independence)")),
    }
}

fn read_design(path: &PathBuf) -> Result<SimDesign> {
    let d: SimDesign = serde_json::from_reader(File::open(path)?)?;
    d.validate()?;
    Ok(d)
}

fn simulate(design: PathBuf, out: PathBuf) -> Result<()> {
    let d = read_design(&design)?;
    fs::create_dir_all(&out)?;
    let data = sim::generate(&d, 0)?;
    sio::write_long_csv(File::create(out.join("data.csv"))?, &data.by_time)?;
    let res = sim::run_replicates(&d)?;
    info!("{} replicates completed, {} failed", res.completed, res.failures);
    sio::write_metrics(File::create(out.join("metrics.csv"))?, &res.rows)?;
    sio::write_metrics(io::stdout().lock(), &res.rows)
}

fn fit_stream(a: FitStreamArgs) -> Result<()> {
    let batches = sio::ingest(&a.batch, a.model.family)?;
    if batches.iter().any(|b| b.t != a.t) {
        return Err(Error::Validation(format!("batch file times do not match --t {}", a.t)));
    }
    let p = batches[0].p();
    let model = ModelSpec {
        family: a.model.family,
        p,
        basis: a.model.basis,
    };
    let q_mode = match (a.q, &a.q_grid) {
        (Some(q), _) => QMode::Fixed(q),
        (None, Some(g)) => {
            if g[2] < 1.0 || g[2].fract() != 0.0 {
                return Err(Error::Validation(format!("grid count must be a positive integer, got {}", g[2])));
            }
            QMode::Adaptive(q_grid(a.horizon, g[0], g[1], g[2] as usize)?)
        }
        (None, None) => QMode::Adaptive(default_q_grid(a.horizon)),
    };
    let config = SolverConfig::default();

    let _lock = StateLock::acquire(&a.state)?;
    let engine = if a.init {
        if a.state.exists() {
            return Err(Error::State(format!("{} already exists; remove it to start over", a.state.display())));
        }
        StreamEngine::init(&batches, a.t, model, q_mode, config)?
    } else {
        let state = StateFile::load(&a.state)?;
        let hash = sio::config_hash(&model, &q_mode, &config)?;
        if hash != state.config_hash {
            return Err(Error::State(
                "model, q or solver settings differ from those stored in the state file".into(),
            ));
        }
        let mut engine = state.engine;
        if a.t <= engine.t_prev {
            return Err(Error::Validation(format!(
                "t = {} must exceed the previous batch time {}",
                a.t, engine.t_prev
            )));
        }
        let summary = engine.update(&batches, a.t)?;
        info!("batch {}: q = {}, {} iterations", engine.batch_count, summary.q_used, summary.iterations);
        engine
    };
    let mut report = engine.report(a.level)?;
    report.batch_index = batches[0].batch_index;
    StateFile::new(engine)?.save(&a.state)?;
    let names = sio::covariate_names(p);
    match a.out {
        Some(path) => sio::append_report(&path, &report, &names),
        None => sio::write_report(io::stdout().lock(), &report, &names, true),
    }
}

fn fit_offline(data: PathBuf, q: f64, model: ModelArgs, level: f64, out: Option<PathBuf>) -> Result<()> {
    let by_time = sio::ingest_cumulative(&data, model.family)?;
    let cum = CumulativeData::from_batches(&by_time)?;
    let fit = offline_fit(&cum, q, model.family, model.basis, &SolverConfig::default())?;
    let last = by_time.last().expect("non-empty");
    let report = inference::confidence_intervals(
        &fit.beta.clone().into(),
        &fit.cov,
        level,
        last[0].batch_index,
        last[0].t,
        Some(q),
        fit.iterations,
    )?;
    let names = sio::covariate_names(cum.p());
    match out {
        Some(path) => sio::write_report(File::create(path)?, &report, &names, true),
        None => sio::write_report(io::stdout().lock(), &report, &names, true),
    }
}

fn compare(design: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let d = read_design(&design)?;
    let cmp = sim::compare(&d)?;
    let mut w: Box<dyn Write> = match out {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    writeln!(w, "coefficient,len_streaming,len_independence,ratio,cp_streaming,cp_independence")?;
    for (k, ratio) in cmp.length_ratio.iter().enumerate() {
        let (s, i) = (&cmp.streaming.rows[k], &cmp.independence.rows[k]);
        writeln!(w, "{},{},{},{},{},{}", s.coefficient, s.len, i.len, ratio, s.cp, i.cp)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { design, out } => simulate(design, out),
        Command::FitStream(a) => fit_stream(a),
        Command::FitOffline {
            data,
            q,
            model,
            level,
            out,
        } => fit_offline(data, q, model, level, out),
        Command::Compare { design, out } => compare(design, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
