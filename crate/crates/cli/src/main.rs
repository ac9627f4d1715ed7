//! `fpnsd`: forecasting runs for intraday particle size distribution curves.
//!
//! ```text
//! fpnsd ingest   --data counts.csv --mode weekday --out panels/
//! fpnsd backtest --data counts.csv --mode weekday:mon --methods mlfts,factor+mlfts --out runs/mon
//! fpnsd run      --config run.toml
//! ```

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;
mod pipeline;

use error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "fpnsd", version, about = "Functional time series forecasting of particle size distribution curves")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "FPNSD_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// mlfts or factor+mlfts
    #[arg(long, default_value = "mlfts")]
    pub model: String,
    /// Common-trend components.
    #[arg(long, default_value_t = 6)]
    pub k: usize,
    /// Size-specific components.
    #[arg(long, default_value_t = 6)]
    pub l: usize,
    /// Number of factors: auto or an integer.
    #[arg(long, default_value = "auto")]
    pub q: String,
    #[arg(long, default_value_t = 6)]
    pub q_max: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Read an hourly CSV, fill gaps and write segmented panels.
    Ingest {
        #[arg(long)]
        data: PathBuf,
        /// weekday, weekday:<day>, day or week
        #[arg(long, default_value = "weekday")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model to a panel and write a JSON summary.
    Fit {
        #[arg(long)]
        panel: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Output JSON file (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One-step-ahead forecast of the curve after the panel's last one.
    Forecast {
        #[arg(long)]
        panel: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-forecast the rest of a partially observed curve.
    Update {
        #[arg(long)]
        panel: PathBuf,
        /// bm, ols, ridge or pls
        #[arg(long, default_value = "ridge")]
        method: String,
        /// Number of observed points.
        #[arg(long)]
        m0: usize,
        /// auto or a value >= 0
        #[arg(long, default_value = "auto")]
        lambda: String,
        /// CSV with `size,hour,count` for hours 0..m0-1. Without it the
        /// panel's last curve is held out and its first m0 points are used.
        #[arg(long)]
        observed: Option<PathBuf>,
        /// Stacked components for the regression updates.
        #[arg(long, default_value_t = 6)]
        components: usize,
        /// Also build intervals at these levels.
        #[arg(long, value_delimiter = ',')]
        alpha: Vec<f64>,
        #[arg(long, default_value = "conformal")]
        interval: String,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibrate intervals on the panel's later half and apply them to the next curve.
    Intervals {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.05")]
        alpha: Vec<f64>,
        /// sd or conformal
        #[arg(long, default_value = "conformal")]
        method: String,
        /// size or point
        #[arg(long, default_value = "size")]
        pooling: String,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expanding-window backtest with report tables.
    Backtest {
        /// Raw hourly CSV (use with --mode).
        #[arg(long, conflicts_with = "panel")]
        data: Option<PathBuf>,
        /// Segmented panel CSV.
        #[arg(long)]
        panel: Option<PathBuf>,
        #[arg(long, default_value = "weekday")]
        mode: String,
        #[arg(long, value_delimiter = ',', default_value = "mlfts,factor+mlfts")]
        methods: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.05")]
        alphas: Vec<f64>,
        #[arg(long, default_value_t = 6)]
        k: usize,
        #[arg(long, default_value_t = 6)]
        l: usize,
        #[arg(long, default_value = "auto")]
        q: String,
        /// Observed points for the updating tables; empty disables updating.
        #[arg(long, value_delimiter = ',')]
        update_m0: Vec<usize>,
        /// Run directory (default: runs/backtest-<timestamp>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarise the tables of a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Full pipeline from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Ingest { data, mode, out } => commands::ingest(&data, &mode, &out),
        Command::Fit { panel, model, out } => commands::fit(&panel, &model, out.as_deref()),
        Command::Forecast { panel, model, out } => commands::forecast(&panel, &model, out.as_deref()),
        Command::Update {
            panel,
            method,
            m0,
            lambda,
            observed,
            components,
            alpha,
            interval,
            model,
            out,
        } => commands::update(&commands::UpdateArgs {
            panel,
            method,
            m0,
            lambda,
            observed,
            components,
            alpha,
            interval,
            model,
            out,
        }),
        Command::Intervals {
            panel,
            alpha,
            method,
            pooling,
            model,
            out,
        } => commands::intervals(&panel, &alpha, &method, &pooling, &model, &out),
        Command::Backtest {
            data,
            panel,
            mode,
            methods,
            alphas,
            k,
            l,
            q,
            update_m0,
            out,
        } => commands::backtest(&commands::BacktestArgs {
            data,
            panel,
            mode,
            methods,
            alphas,
            k,
            l,
            q,
            update_m0,
            out,
        }),
        Command::Report { run } => commands::report(&run),
        Command::Run { config } => commands::run(&config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            let err = CliError::Config("--threads must be at least 1".into());
            eprintln!("{}", serde_json::to_string(&err.record()).expect("record serialises"));
            return ExitCode::from(err.exit_code() as u8);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("global thread pool is configured once");
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", serde_json::to_string(&err.record()).expect("record serialises"));
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
