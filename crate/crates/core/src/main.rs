use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use cpe_core::bench::{cmd_curves, cmd_pool, cmd_run, PoolArgs};
use cpe_core::elicit::{LoopConfig, PoolKind, ProblemKind, ProblemParams, RunManifest};
use cpe_core::learning::UpdateRule;
use cpe_core::problems::{CatalogSpec, ConfigCatalog, DEFAULT_CATALOG_SEED};
use cpe_core::rng::{tags, RandomSource};
use cpe_core::selection::AcquisitionMode;
use cpe_core::service::{self, ServiceConfig};
use cpe_core::Error;

#[derive(Parser)]
#[command(name = "cpe", version, about = "Pool-based constructive preference elicitation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run simulated DMs through one experimental cell.
    Run(RunArgs),
    /// Generate a candidate pool and time it.
    Pool(PoolCmd),
    /// Emit the update-factor curves as CSV.
    Curves {
        /// Output file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the interactive session API.
    Serve(ServeArgs),
    /// Generate a synthetic configuration catalog.
    Catalog {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CATALOG_SEED)]
        seed: u64,
    },
}

#[derive(Args)]
struct ProblemArgs {
    #[arg(long, default_value = "pctsp")]
    problem: ProblemKind,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    pool: Option<PoolKind>,
    /// Catalog JSON for the configuration task.
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Pool JSONL to load instead of sampling.
    #[arg(long)]
    pool_file: Option<PathBuf>,
    #[arg(long)]
    exact_cap: Option<usize>,
}

impl ProblemArgs {
    fn params(&self) -> ProblemParams {
        let d = ProblemParams::default();
        ProblemParams {
            nodes: self.nodes.unwrap_or(d.nodes),
            pool: self.pool.unwrap_or(d.pool),
            catalog: self.catalog.clone().or(d.catalog),
            pool_file: self.pool_file.clone().or(d.pool_file),
            exact_cap: self.exact_cap.unwrap_or(d.exact_cap),
            ..d
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Replay a manifest; other flags are ignored.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    problem: ProblemArgs,
    #[arg(long)]
    acquisition: Option<AcquisitionMode>,
    #[arg(long)]
    update: Option<UpdateRule>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    train_instances: Option<usize>,
    #[arg(long)]
    test_instances: Option<usize>,
    #[arg(long)]
    ensemble_size: Option<usize>,
    /// Response sharpness on the normalized utility scale.
    #[arg(long)]
    beta: Option<f64>,
    /// Indifference threshold on the normalized utility scale.
    #[arg(long)]
    eps_ind: Option<f64>,
    #[arg(long, default_value_t = 20)]
    dms: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

#[derive(Args)]
struct PoolCmd {
    #[command(flatten)]
    problem: ProblemArgs,
    #[arg(long, default_value_t = 10_000)]
    pool_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also generate the other pool kind and report the time ratio.
    #[arg(long)]
    compare: bool,
    #[arg(long, default_value = "pool")]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Directory for persisted sessions.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Built UI bundle served at `/`.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    /// Maximum pool_size times instance count per session.
    #[arg(long, default_value_t = service::DEFAULT_POOL_BUDGET)]
    pool_budget: usize,
}

fn loop_overrides(a: &RunArgs) -> Value {
    let mut o = Map::new();
    let mut put = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            o.insert(k.into(), v);
        }
    };
    put("pool_size", a.pool_size.map(Value::from));
    put("clusters", a.clusters.map(Value::from));
    put("steps", a.steps.map(Value::from));
    put("eval_every", a.eval_every.map(Value::from));
    put("train_instances", a.train_instances.map(Value::from));
    put("test_instances", a.test_instances.map(Value::from));
    put("ensemble_size", a.ensemble_size.map(Value::from));
    put("acquisition", a.acquisition.map(|m| serde_json::to_value(m).expect("serializable")));
    let mut learner = Map::new();
    if let Some(r) = a.update {
        learner.insert("rule".into(), serde_json::to_value(r).expect("serializable"));
    }
    if let Some(lr) = a.learning_rate {
        learner.insert("learning_rate".into(), json!(lr));
    }
    if !learner.is_empty() {
        o.insert("learner".into(), Value::Object(learner));
    }
    let mut noise = Map::new();
    if let Some(b) = a.beta {
        noise.insert("beta".into(), json!(b));
    }
    if let Some(e) = a.eps_ind {
        noise.insert("eps_ind".into(), json!(e));
    }
    if !noise.is_empty() {
        o.insert("noise".into(), Value::Object(noise));
    }
    Value::Object(o)
}

fn run(a: &RunArgs) -> cpe_core::Result<()> {
    let manifest = match &a.manifest {
        Some(p) => RunManifest::from_json(&std::fs::read_to_string(p)?)?,
        None => {
            if a.dms == 0 {
                return Err(Error::Invalid("--dms must be at least 1".into()));
            }
            let kind = a.problem.problem;
            let params = a.problem.params();
            let cfg = LoopConfig::with_overrides(kind, &params, &loop_overrides(a))?;
            RunManifest::new(kind, params, cfg, a.seed, a.dms)
        }
    };
    let summary = cmd_run(&manifest, &a.out)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn pool(a: &PoolCmd) -> cpe_core::Result<()> {
    let m = cmd_pool(&PoolArgs {
        problem: a.problem.problem,
        params: a.problem.params(),
        pool_size: a.pool_size,
        seed: a.seed,
        out: a.out.clone(),
        compare: a.compare,
    })?;
    println!("{}", serde_json::to_string_pretty(&m)?);
    Ok(())
}

fn catalog(out: &PathBuf, seed: u64) -> cpe_core::Result<()> {
    let c = ConfigCatalog::synthetic(&CatalogSpec::default(), &mut RandomSource::derived(seed, &[tags::CATALOG]))?;
    std::fs::write(out, c.to_json()? + "\n")?;
    Ok(())
}

fn is_config_error(e: &Error) -> bool {
    matches!(e, Error::Invalid(_) | Error::Json(_) | Error::FormatVersion(_) | Error::DimensionMismatch { .. })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Run(a) => run(a),
        Cmd::Pool(a) => pool(a),
        Cmd::Curves { out } => match out {
            Some(p) => std::fs::File::create(p).map_err(Error::from).and_then(|f| cmd_curves(std::io::BufWriter::new(f))),
            None => cmd_curves(std::io::stdout().lock()),
        },
        Cmd::Catalog { out, seed } => catalog(out, *seed),
        Cmd::Serve(a) => {
            let cfg = ServiceConfig {
                data_dir: a.data_dir.clone(),
                static_dir: a.static_dir.clone().or_else(service::default_static_dir),
                pool_budget: a.pool_budget,
                ..ServiceConfig::default()
            };
            let rt = match tokio::runtime::Runtime::new() {
                Ok(rt) => rt,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::FAILURE;
                }
            };
            return match rt.block_on(service::serve(a.addr, cfg)) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::FAILURE
                }
            };
        }
    };
    let _ = std::io::stdout().flush();
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_config_error(&e) { 2 } else { 1 })
        }
    }
}
