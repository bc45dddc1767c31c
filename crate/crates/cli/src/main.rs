//! `rdm`: batch driver for training, evaluating and sampling manifold
//! diffusion models.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rdm_core::checkpoint::Checkpoint;
use rdm_core::pipeline::{self, AblationMode, EvalOptions, RunConfig};
use rdm_core::rng::RngStream;
use rdm_core::sde::OdeTolerances;
use rdm_core::targets::{ingest_csv, CsvMapping};
use rdm_core::{Error, Result};

#[derive(Parser)]
#[command(name = "rdm", version, about = "Diffusion models on embedded Riemannian manifolds")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "RDM_THREADS")]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoint.json and metrics.tsv into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required = true)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Negative log-likelihood report (ELBO, KELBO and optionally exact ODE).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        kelbo_k: Option<usize>,
        /// Also compute exact likelihoods with the probability-flow ODE.
        #[arg(long)]
        ode: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw generative samples as CSV.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        /// λ ≤ 1 selects the member of the marginally equivalent family (1 is the ODE).
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        lambda: f64,
        /// Integration steps (defaults to the checkpoint's).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, required = true)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Model log-density on a quadrature grid as CSV.
    Density {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sphere `NTxNP`, torus `N` or `N1xN2`, hyperboloid `N:L`.
        #[arg(long)]
        grid: String,
        #[arg(long, default_value_t = 1e-3)]
        rtol: f64,
        #[arg(long, default_value_t = 1e-3)]
        atol: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimator ablations as TSV tables.
    Ablate {
        /// Trained checkpoint; when omitted the config is trained first.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Run config supplying the data distribution.
        #[arg(long)]
        config: PathBuf,
        /// int-steps, importance or hutchinson-vs-qr.
        #[arg(long)]
        mode: AblationMode,
        #[arg(long, default_value_t = 10_000)]
        draws: usize,
        #[arg(long, default_value_t = 256)]
        n_points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Run config whose target supplies held-out points.
    #[arg(long, conflicts_with = "data")]
    config: Option<PathBuf>,
    /// CSV file of evaluation points.
    #[arg(long, requires = "mapping")]
    data: Option<PathBuf>,
    /// latlon-to-sphere, angles-to-torus or ambient-raw.
    #[arg(long, value_parser = parse_mapping)]
    mapping: Option<CsvMapping>,
    /// Angle columns are in degrees.
    #[arg(long)]
    degrees: bool,
    /// Points drawn from the config target.
    #[arg(long)]
    n_points: Option<usize>,
}

fn parse_mapping(s: &str) -> std::result::Result<CsvMapping, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown mapping `{s}`"))
}

fn eval_points(ck: &Checkpoint, data: &DataArgs, seed: u64) -> Result<(Vec<Vec<f64>>, Option<RunConfig>)> {
    match (&data.config, &data.data) {
        (Some(c), None) => {
            let config = RunConfig::load(c)?;
            if config.manifold != ck.manifold {
                return Err(Error::Config("config manifold differs from the checkpoint's".into()));
            }
            let n = data.n_points.unwrap_or(config.eval.n_points);
            // Stream 7 keeps evaluation draws apart from training batches.
            let pts = config.target()?.sample(&mut RngStream::new(seed, 7).generator(), n);
            Ok((pts, Some(config)))
        }
        (None, Some(path)) => {
            let mapping = data.mapping.ok_or_else(|| Error::Config("--data needs --mapping".into()))?;
            Ok((ingest_csv(path, &ck.manifold, mapping, data.degrees)?, None))
        }
        _ => Err(Error::Config("eval needs exactly one of --config and --data".into())),
    }
}

fn with_output(out: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match out {
        Some(p) => {
            let mut w = std::io::BufWriter::new(std::fs::File::create(p)?);
            f(&mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock)?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Train { config, seed, out } => {
            let c = RunConfig::load(&config)?;
            let o = pipeline::cmd_train(&c, seed, &out)?;
            log::info!("wrote {} and {}", o.checkpoint.display(), o.metrics.display());
        }
        Command::Eval { checkpoint, data, kelbo_k, ode, seed, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (points, config) = eval_points(&ck, &data, seed)?;
            let eval = config.map(|c| c.eval).unwrap_or_default();
            let opts = EvalOptions { kelbo_k: kelbo_k.unwrap_or(eval.kelbo_k), ode, tolerances: eval.ode, seed };
            if opts.kelbo_k == 0 {
                return Err(Error::Config("--kelbo-k must be at least 1".into()));
            }
            let report = pipeline::evaluate(&ck, &points, &opts)?;
            let header = pipeline::header_line(&ck.config_hash, seed, &[("points", points.len().to_string())]);
            with_output(out.as_deref(), |w| pipeline::write_eval_report(w, &report, &header))?;
        }
        Command::Sample { checkpoint, n, lambda, steps, seed, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            pipeline::cmd_sample(&ck, n, lambda, steps, seed, &out)?;
        }
        Command::Density { checkpoint, grid, rtol, atol, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let tol = OdeTolerances { rtol, atol, ..OdeTolerances::default() };
            let mass = pipeline::cmd_density(&ck, &grid, tol, &out)?;
            log::info!("grid mass {mass:.6}");
        }
        Command::Ablate { checkpoint, config, mode, draws, n_points, seed, out } => {
            let c = RunConfig::load(&config)?;
            let ck = match checkpoint {
                Some(p) => Checkpoint::load(&p)?,
                None => pipeline::train_run(&c, seed, None, |_| {})?.checkpoint(),
            };
            if ck.manifold != c.manifold {
                return Err(Error::Config("config manifold differs from the checkpoint's".into()));
            }
            pipeline::cmd_ablate(&ck, &c.target()?, mode, draws, n_points, seed, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
