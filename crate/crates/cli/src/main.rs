use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use chronorag_cli::commands::{self, ForecastMode, QueryTarget};
use chronorag_cli::config::RunConfig;
use chronorag_cli::error::CliError;
use chronorag_cli::synth::BenchmarkConfig;

#[derive(Parser)]
#[command(name = "chronorag", version, about = "Retrieval-augmented time-series forecasting toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Every config key, overridable per invocation.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// `key = value` config file; flags override its entries
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    window: Option<String>,
    #[arg(long)]
    stride: Option<String>,
    #[arg(long)]
    cap: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    rho: Option<String>,
    #[arg(long)]
    probes: Option<String>,
    #[arg(long)]
    d: Option<String>,
    #[arg(long)]
    h: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// biased | unbiased
    #[arg(long)]
    estimator: Option<String>,
    /// positive number or median-heuristic
    #[arg(long)]
    bandwidth: Option<String>,
    #[arg(long)]
    horizon: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long = "batch_size", alias = "batch-size")]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let overrides = [
            ("window", &self.window),
            ("stride", &self.stride),
            ("cap", &self.cap),
            ("k", &self.k),
            ("rho", &self.rho),
            ("probes", &self.probes),
            ("d", &self.d),
            ("h", &self.h),
            ("lambda", &self.lambda),
            ("seed", &self.seed),
            ("estimator", &self.estimator),
            ("bandwidth", &self.bandwidth),
            ("horizon", &self.horizon),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Convert CSV files into a record store
    Ingest {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long)]
        domain: String,
        #[arg(long, default_value = "-")]
        freq: String,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Build a series tree from the windows of one or more stores
    Build {
        stores: Vec<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Retrieve the top-k windows for a target
    Query {
        #[arg(long)]
        tree: PathBuf,
        /// CSV whose first numeric column ends with the target window
        #[arg(long, conflicts_with = "values")]
        csv: Option<PathBuf>,
        /// Comma-separated target values
        #[arg(long, allow_hyphen_values = true)]
        values: Option<String>,
        #[arg(long)]
        domain: Option<String>,
        /// One `id,score,domain` line per hit
        #[arg(long)]
        machine: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Insert the windows of stores into an existing tree
    Insert {
        #[arg(long)]
        tree: PathBuf,
        #[arg(required = true)]
        stores: Vec<PathBuf>,
        /// Defaults to overwriting the input tree
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Recall and cost of tree retrieval against exhaustive search
    Eval {
        #[arg(long)]
        tree: PathBuf,
        /// Stores to draw query windows from
        #[arg(required = true)]
        stores: Vec<PathBuf>,
        #[arg(long, default_value_t = 100)]
        queries: usize,
        #[arg(long = "sweep-probes", default_value = "1,2,4,8,all")]
        sweep_probes: String,
        #[arg(long = "sweep-k", default_value = "8")]
        sweep_k: String,
        /// CSV report path (stdout when omitted)
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and score the forecaster on chronological splits
    Forecast {
        #[arg(long)]
        tree: Option<PathBuf>,
        #[arg(required = true)]
        stores: Vec<PathBuf>,
        /// Drop the retrieval path entirely
        #[arg(long = "ablate-rag", conflicts_with = "backend")]
        ablate_rag: bool,
        /// `external:<shell command>`: prompt on stdin, forecast on stdout
        #[arg(long)]
        backend: Option<String>,
        #[arg(long = "backend-timeout", default_value_t = 30.0)]
        backend_timeout: f64,
        /// CSV report path (stdout when omitted)
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Write the trained model checkpoint here
        #[arg(long = "model-out")]
        model_out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Summarize a store or a tree
    Stats { path: PathBuf },
    /// Write the shared-motif synthetic benchmark stores
    Synth {
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
    },
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| {
            CliError::Data(chronorag_core::Error::Io {
                path: path.to_path_buf(),
                source: e,
            })
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Ingest { csv, domain, freq, out } => {
            let n = commands::cmd_ingest(&csv, &domain, &freq, &out)?;
            println!("{n} records written");
        }
        Command::Build { stores, out, cfg } => {
            let cfg = cfg.resolve()?;
            print!("{}", commands::cmd_build(&stores, &cfg, &out)?);
        }
        Command::Query {
            tree,
            csv,
            values,
            domain,
            machine,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let target = match (csv, values) {
                (Some(p), None) => QueryTarget::Csv(p),
                (None, Some(v)) => QueryTarget::Values(commands::parse_values(&v)?),
                _ => return Err(CliError::Usage("give exactly one of --csv or --values".into())),
            };
            print!("{}", commands::cmd_query(&tree, &target, domain.as_deref(), &cfg, machine)?);
        }
        Command::Insert { tree, stores, out, cfg } => {
            let cfg = cfg.resolve()?;
            let out = out.unwrap_or_else(|| tree.clone());
            print!("{}", commands::cmd_insert(&tree, &stores, &cfg, &out)?);
        }
        Command::Eval {
            tree,
            stores,
            queries,
            sweep_probes,
            sweep_k,
            out,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let probes = commands::parse_probe_sweep(&sweep_probes)?;
            let ks = commands::parse_k_sweep(&sweep_k)?;
            let report = commands::cmd_eval(&tree, &stores, queries, &probes, &ks, &cfg)?;
            write_or_print(out.as_deref(), &report.to_csv())?;
        }
        Command::Forecast {
            tree,
            stores,
            ablate_rag,
            backend,
            backend_timeout,
            out,
            model_out,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let mode = match (ablate_rag, backend) {
                (true, _) => ForecastMode::Ablate,
                (false, Some(arg)) => {
                    if !(backend_timeout.is_finite() && backend_timeout > 0.0) {
                        return Err(CliError::Usage("backend timeout must be positive".into()));
                    }
                    ForecastMode::External(commands::parse_backend(
                        &arg,
                        Duration::from_secs_f64(backend_timeout),
                    )?)
                }
                (false, None) => ForecastMode::Rag,
            };
            let report = commands::cmd_forecast(tree.as_deref(), &stores, &cfg, &mode, model_out.as_deref())?;
            write_or_print(out.as_deref(), &report.to_csv())?;
        }
        Command::Stats { path } => print!("{}", commands::cmd_stats(&path)?),
        Command::Synth { out_dir, seed, noise } => {
            if !(noise.is_finite() && noise >= 0.0) {
                return Err(CliError::Usage("noise must be finite and >= 0".into()));
            }
            let cfg = BenchmarkConfig {
                seed,
                noise,
                ..BenchmarkConfig::default()
            };
            let (kb, targets) = commands::cmd_synth(&out_dir, &cfg)?;
            println!("wrote {} and {}", kb.display(), targets.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
