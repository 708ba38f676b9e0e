//! Experiment runner behind the `cpe` command line.
//!
//! `run` writes, into the output directory:
//!
//! * `manifest.json`: the replayable run description,
//! * `roster.json`: the simulated DMs,
//! * `iterations.csv`: per-DM evaluation rows (deterministic),
//! * `timings.csv`: per-DM, per-iteration wall-clock timings,
//! * `summary.json`: aggregate metrics.
//!
//! Both CSV files start with a `# manifest_sha256=...` line.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::elicit::setup::{SetupHashes, SetupTimings};
use crate::elicit::{run_simulated, EvalRecord, PoolKind, ProblemKind, ProblemParams, ProblemSetup, RunManifest, TimingRecord};
use crate::error::{Error, Result};
use crate::learning::{update_factor_at, UpdateRule};
use crate::oracle::{queries_to_threshold_at, sample_dm_config, sample_dm_tsp, write_roster, SimulatedDM};
use crate::problems::pool::{write_pool_jsonl, PoolRecord};
use crate::rng::{stream_id, tags, RandomSource};

/// Environment variable holding the worker-thread count.
pub const WORKERS_ENV: &str = "CPE_WORKERS";
/// Regret level defining `#Q`.
pub const REGRET_THRESHOLD: f64 = 0.10;

/// DM `id` of a run seeded with `seed`.
pub fn roster_dm(kind: ProblemKind, dim: usize, manifest_seed: u64, id: usize, noise: crate::oracle::NoiseConfig) -> Result<SimulatedDM> {
    let mut rng = RandomSource::derived(manifest_seed, &[tags::DM, id as u64]);
    let w = match kind {
        ProblemKind::Config => sample_dm_config(&mut rng, dim)?,
        ProblemKind::Pctsp => sample_dm_tsp(&mut rng)?,
    };
    SimulatedDM::new(id, w, noise, stream_id(&[manifest_seed, tags::DM, id as u64]))
}

pub fn build_roster(manifest: &RunManifest, dim: usize) -> Result<Vec<SimulatedDM>> {
    (0..manifest.dms)
        .map(|id| roster_dm(manifest.problem, dim, manifest.seed, id, manifest.loop_config.noise))
        .collect()
}

/// Thread pool sized by [`WORKERS_ENV`] (all cores when unset).
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Invalid(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::Invalid(format!("{WORKERS_ENV} must be at least 1")));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Invalid(format!("thread pool: {e}")))
}

/// One DM's outcome.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DmResult {
    pub dm_id: usize,
    pub final_regret: f64,
    pub final_satisfied_frac: f64,
    pub satisfied: bool,
    pub exchanges: usize,
    pub indifferent: usize,
    pub evals: Vec<EvalRecord>,
    pub timings: Vec<TimingRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub manifest_sha256: String,
    pub problem: ProblemKind,
    pub dms: usize,
    pub final_regret_mean: f64,
    pub final_regret_stderr: f64,
    /// First iteration whose DM-mean regret drops below 10%.
    pub queries_to_threshold: Option<usize>,
    pub pct_dm_satisfied: f64,
    /// Indifferent answers over all answered queries.
    pub indifference_rate: f64,
    pub mean_update_ms: f64,
    pub mean_select_ms: f64,
    pub median_select_ms: f64,
    pub proxy_regret: bool,
    pub setup_timings: SetupTimings,
    /// `(iteration, DM-mean regret)` per evaluation tick.
    pub regret_curve: Vec<(usize, f64)>,
    pub per_dm: Vec<DmSummary>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DmSummary {
    pub dm_id: usize,
    pub final_regret: f64,
    pub satisfied: bool,
}

/// Outputs of [`execute_run`] before anything is written.
pub struct RunOutput {
    pub manifest: RunManifest,
    pub roster: Vec<SimulatedDM>,
    pub results: Vec<DmResult>,
    pub summary: RunSummary,
}

fn stats(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Builds the setup, checks recorded hashes and runs every DM.
pub fn execute_run(manifest: &RunManifest) -> Result<RunOutput> {
    let mut manifest = manifest.clone();
    let setup = Arc::new(ProblemSetup::build(
        manifest.problem,
        &manifest.problem_params,
        manifest.loop_config.pool_spec(),
        manifest.seed,
    )?);
    check_hashes(manifest.hashes.as_ref(), setup.hashes())?;
    manifest.hashes = Some(setup.hashes().clone());
    let manifest_sha256 = manifest.sha256()?;

    let roster = build_roster(&manifest, setup.feature_dim())?;
    let pool = worker_pool()?;
    let cfg = &manifest.loop_config;
    let seed = manifest.seed;
    let results: Vec<DmResult> = pool.install(|| {
        roster
            .par_iter()
            .map(|dm| {
                let s = run_simulated(Arc::clone(&setup), cfg, seed, dm)?;
                let last = s.evals().last().cloned().ok_or(Error::Invalid("run produced no evaluation".into()))?;
                Ok(DmResult {
                    dm_id: dm.id,
                    final_regret: last.regret_mean,
                    final_satisfied_frac: last.satisfied_frac,
                    satisfied: last.satisfied_frac >= 0.5,
                    exchanges: s.exchanges().len(),
                    indifferent: s.indifference_count(),
                    evals: s.evals().to_vec(),
                    timings: s.timings().to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let finals: Vec<f64> = results.iter().map(|r| r.final_regret).collect();
    let (final_regret_mean, final_regret_stderr) = stats(&finals);
    let ticks = results[0].evals.len();
    let regret_curve: Vec<(usize, f64)> = (0..ticks)
        .map(|i| {
            let it = results[0].evals[i].iteration;
            (it, results.iter().map(|r| r.evals[i].regret_mean).sum::<f64>() / results.len() as f64)
        })
        .collect();
    let exchanges: usize = results.iter().map(|r| r.exchanges).sum();
    let indifferent: usize = results.iter().map(|r| r.indifferent).sum();
    let all_timings: Vec<&TimingRecord> = results.iter().flat_map(|r| &r.timings).collect();
    let selects: Vec<f64> = all_timings.iter().map(|t| t.select_ms).collect();
    let updates: Vec<f64> = all_timings.iter().map(|t| t.update_ms).collect();
    let summary = RunSummary {
        manifest_sha256,
        problem: manifest.problem,
        dms: results.len(),
        final_regret_mean,
        final_regret_stderr,
        queries_to_threshold: queries_to_threshold_at(&regret_curve, REGRET_THRESHOLD),
        pct_dm_satisfied: 100.0 * results.iter().filter(|r| r.satisfied).count() as f64 / results.len() as f64,
        indifference_rate: if exchanges > 0 { indifferent as f64 / exchanges as f64 } else { 0.0 },
        mean_update_ms: updates.iter().sum::<f64>() / updates.len().max(1) as f64,
        mean_select_ms: selects.iter().sum::<f64>() / selects.len().max(1) as f64,
        median_select_ms: median(selects),
        proxy_regret: results[0].evals.iter().any(|e| e.proxy),
        setup_timings: setup.timings().clone(),
        regret_curve,
        per_dm: results
            .iter()
            .map(|r| DmSummary { dm_id: r.dm_id, final_regret: r.final_regret, satisfied: r.satisfied })
            .collect(),
    };
    Ok(RunOutput { manifest, roster, results, summary })
}

fn check_hashes(recorded: Option<&SetupHashes>, built: &SetupHashes) -> Result<()> {
    match recorded {
        Some(h) if h != built => Err(Error::Invalid(
            "generated inputs do not match the hashes recorded in the manifest".into(),
        )),
        _ => Ok(()),
    }
}

fn csv_writer(path: &Path, manifest_sha256: &str) -> Result<csv::Writer<BufWriter<File>>> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "# manifest_sha256={manifest_sha256}")?;
    Ok(csv::Writer::from_writer(f))
}

/// Writes the deterministic per-iteration CSV.
pub fn write_iterations_csv(path: &Path, manifest_sha256: &str, results: &[DmResult]) -> Result<()> {
    let mut w = csv_writer(path, manifest_sha256)?;
    w.write_record(["dm_id", "iteration", "regret_mean", "regret_stderr", "satisfied_frac", "indifference_count", "proxy"])?;
    for r in results {
        for e in &r.evals {
            w.write_record([
                r.dm_id.to_string(),
                e.iteration.to_string(),
                e.regret_mean.to_string(),
                e.regret_stderr.to_string(),
                e.satisfied_frac.to_string(),
                e.indifference_count.to_string(),
                e.proxy.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_timings_csv(path: &Path, manifest_sha256: &str, results: &[DmResult]) -> Result<()> {
    let mut w = csv_writer(path, manifest_sha256)?;
    w.write_record(["dm_id", "iteration", "select_ms", "update_ms"])?;
    for r in results {
        for t in &r.timings {
            w.write_record([r.dm_id.to_string(), t.iteration.to_string(), format!("{:.4}", t.select_ms), format!("{:.4}", t.update_ms)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Runs `manifest` and writes all result files into `out`.
pub fn cmd_run(manifest: &RunManifest, out: &Path) -> Result<RunSummary> {
    std::fs::create_dir_all(out)?;
    let start = Instant::now();
    let run = execute_run(manifest)?;
    let sha = &run.summary.manifest_sha256;
    std::fs::write(out.join("manifest.json"), run.manifest.to_json()?)?;
    write_roster(BufWriter::new(File::create(out.join("roster.json"))?), &run.roster)?;
    write_iterations_csv(&out.join("iterations.csv"), sha, &run.results)?;
    write_timings_csv(&out.join("timings.csv"), sha, &run.results)?;
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&run.summary)?)?;
    log::info!("run finished in {:.1} s", start.elapsed().as_secs_f64());
    Ok(run.summary)
}

#[derive(Clone, Debug)]
pub struct PoolArgs {
    pub problem: ProblemKind,
    pub params: ProblemParams,
    pub pool_size: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Also build the other pool kind and report the generation-time ratio.
    pub compare: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoolManifest {
    pub problem: ProblemKind,
    pub problem_params: ProblemParams,
    pub pool_size: usize,
    pub seed: u64,
    pub count: usize,
    pub exhausted: bool,
    pub hashes: SetupHashes,
    pub generation_ms: f64,
    pub features_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relaxed_generation_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feasible_generation_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feasible_over_relaxed: Option<f64>,
}

fn pool_only_setup(args: &PoolArgs, pool: PoolKind) -> Result<ProblemSetup> {
    let params = ProblemParams { pool, ..args.params.clone() };
    let spec = crate::elicit::PoolSpec { pool_size: args.pool_size, clusters: 0, train_instances: 1, test_instances: 1 };
    ProblemSetup::build(args.problem, &params, spec, args.seed)
}

/// Generates a pool and writes `pool.jsonl` (features in instance 0),
/// `pool_manifest.json` and, for PC-TSP, `instances.json`.
pub fn cmd_pool(args: &PoolArgs) -> Result<PoolManifest> {
    std::fs::create_dir_all(&args.out)?;
    let setup = pool_only_setup(args, args.params.pool)?;
    let f = setup.features(0)?;
    let records: Vec<PoolRecord> = (0..setup.pool_len())
        .map(|i| Ok(PoolRecord { id: i, context_id: 0, structure: setup.candidate(i)?, features: f.row(i) }))
        .collect::<Result<_>>()?;
    write_pool_jsonl(BufWriter::new(File::create(args.out.join("pool.jsonl"))?), &records)?;
    if let Some(inst) = setup.instances() {
        std::fs::write(args.out.join("instances.json"), serde_json::to_string(inst)?)?;
    }
    let mut m = PoolManifest {
        problem: args.problem,
        problem_params: args.params.clone(),
        pool_size: args.pool_size,
        seed: args.seed,
        count: setup.pool_len(),
        exhausted: setup.pool_exhausted(),
        hashes: setup.hashes().clone(),
        generation_ms: setup.timings().pool_ms,
        features_ms: setup.timings().features_ms,
        relaxed_generation_ms: None,
        feasible_generation_ms: None,
        feasible_over_relaxed: None,
    };
    if args.compare {
        let other_kind = match args.params.pool {
            PoolKind::Relaxed => PoolKind::Feasible,
            PoolKind::Feasible => PoolKind::Relaxed,
        };
        let other = pool_only_setup(args, other_kind)?.timings().pool_ms;
        let (relaxed, feasible) = match args.params.pool {
            PoolKind::Relaxed => (m.generation_ms, other),
            PoolKind::Feasible => (other, m.generation_ms),
        };
        m.relaxed_generation_ms = Some(relaxed);
        m.feasible_generation_ms = Some(feasible);
        m.feasible_over_relaxed = Some(feasible / relaxed);
    }
    std::fs::write(args.out.join("pool_manifest.json"), serde_json::to_string_pretty(&m)?)?;
    Ok(m)
}

/// One row of the update-factor curves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub x: f64,
    pub mle: f64,
    pub pp: f64,
    /// Update only when `x < 0`.
    pub sp: f64,
    /// Update when `x <= 0`.
    pub sp_inclusive: f64,
}

/// Update factors over `x = u(y+) - u(y-)` in `[-6, 6]`, step 0.05.
pub fn update_curves() -> Vec<CurveRow> {
    (-120i32..=120)
        .map(|i| {
            let x = f64::from(i) / 20.0;
            CurveRow {
                x,
                mle: update_factor_at(UpdateRule::MleOnline, x),
                pp: update_factor_at(UpdateRule::PpOnline, x),
                sp: update_factor_at(UpdateRule::SpOnline, x),
                sp_inclusive: if x <= 0.0 { 1.0 } else { 0.0 },
            }
        })
        .collect()
}

pub fn cmd_curves<W: Write>(out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in update_curves() {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
