//! Problem setup shared by every session of a run: contexts, the candidate
//! pool, its per-context feature matrices, clusters and the synthesis solver.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::problems::config::{config_enumerate_feasible, config_sample_relaxed, DEFAULT_ENUMERATION_CAP};
use crate::problems::held_karp::DEFAULT_EXACT_CAP;
use crate::problems::tsp::{sample_subcircuits, sample_subcircuits_where, SUB_OBJECTIVE_NAMES};
use crate::problems::{
    tsp_features, tsp_generate_instance, tsp_is_feasible, tsp_solve_exact, ConfigAssignment, ConfigCatalog,
    ExactConfig, FeatureMatrix, Structure, Tour, TspGenConfig, TspInstance,
};
use crate::rng::{tags, RandomSource};
use crate::selection::{ClusterCache, ClusteredPool, DEFAULT_MAX_ITERS};
use crate::types::{FeatureVector, WeightVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Config,
    Pctsp,
}

impl std::str::FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "config" => Ok(Self::Config),
            "pctsp" => Ok(Self::Pctsp),
            other => Err(Error::Invalid(format!("unknown problem {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    #[default]
    Relaxed,
    Feasible,
}

impl std::str::FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relaxed" => Ok(Self::Relaxed),
            "feasible" => Ok(Self::Feasible),
            other => Err(Error::Invalid(format!("unknown pool kind {other:?}"))),
        }
    }
}

fn default_nodes() -> usize {
    10
}

fn default_exact_cap() -> usize {
    DEFAULT_EXACT_CAP
}

/// Problem parameters. `nodes` and `generator` apply to PC-TSP, `catalog` to
/// the configuration task (the bundled catalog when absent).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemParams {
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    #[serde(default)]
    pub generator: TspGenConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog: Option<PathBuf>,
    #[serde(default)]
    pub pool: PoolKind,
    /// Pool file (JSON lines) to load candidates from instead of sampling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_file: Option<PathBuf>,
    #[serde(default = "default_exact_cap")]
    pub exact_cap: usize,
}

impl Default for ProblemParams {
    fn default() -> Self {
        Self {
            nodes: default_nodes(),
            generator: TspGenConfig::default(),
            catalog: None,
            pool: PoolKind::Relaxed,
            pool_file: None,
            exact_cap: DEFAULT_EXACT_CAP,
        }
    }
}

/// Pool-related sizes taken from the loop configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub pool_size: usize,
    pub clusters: usize,
    pub train_instances: usize,
    pub test_instances: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Exact,
    Pool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SetupTimings {
    /// Candidate generation, including enumeration for feasible config pools.
    pub pool_ms: f64,
    pub features_ms: f64,
    pub enumeration_ms: f64,
}

/// Content hashes identifying the generated inputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetupHashes {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub catalog_sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instances_sha256: Option<String>,
    pub pool_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

enum Data {
    Tsp {
        instances: Vec<TspInstance>,
        tours: Vec<Tour>,
    },
    Config {
        catalog: ConfigCatalog,
        pool: Vec<ConfigAssignment>,
        feasible: Vec<ConfigAssignment>,
        feasible_features: FeatureMatrix,
    },
}

/// Distinct structures of a pool file, in id order.
fn load_structures(path: &std::path::Path) -> Result<Vec<Structure>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut records = crate::problems::pool::read_pool_jsonl(file)?;
    records.sort_by_key(|r| r.id);
    let mut seen = std::collections::HashSet::new();
    Ok(records.into_iter().map(|r| r.structure).filter(|s| seen.insert(s.clone())).collect())
}

/// A synthesized solution.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Synthesis {
    pub context: usize,
    pub structure: Structure,
    pub features: FeatureVector,
    pub solver: SolverKind,
}

pub struct ProblemSetup {
    kind: ProblemKind,
    params: ProblemParams,
    spec: PoolSpec,
    seed: u64,
    data: Data,
    features: Vec<Arc<FeatureMatrix>>,
    /// Per-context quota feasibility of each pool candidate (PC-TSP only).
    feasible_mask: Vec<Vec<bool>>,
    train: Vec<usize>,
    test: Vec<usize>,
    clusters: ClusterCache,
    timings: SetupTimings,
    hashes: SetupHashes,
    pool_exhausted: bool,
}

impl std::fmt::Debug for ProblemSetup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemSetup")
            .field("kind", &self.kind)
            .field("contexts", &self.features.len())
            .field("pool", &self.pool_len())
            .finish()
    }
}

impl ProblemSetup {
    pub fn build(kind: ProblemKind, params: &ProblemParams, spec: PoolSpec, seed: u64) -> Result<Self> {
        if spec.pool_size < 2 {
            return Err(Error::Invalid("pool_size must be at least 2".into()));
        }
        match kind {
            ProblemKind::Pctsp => Self::build_tsp(params, spec, seed),
            ProblemKind::Config => Self::build_config(params, spec, seed),
        }
    }

    fn build_tsp(params: &ProblemParams, spec: PoolSpec, seed: u64) -> Result<Self> {
        if spec.train_instances == 0 || spec.test_instances == 0 {
            return Err(Error::Invalid("train and test instance counts must be positive".into()));
        }
        let contexts = spec.train_instances + spec.test_instances;
        let instances: Vec<TspInstance> = (0..contexts)
            .map(|i| {
                let mut rng = RandomSource::derived(seed, &[tags::INSTANCE, i as u64]);
                tsp_generate_instance(params.nodes, &mut rng, &params.generator)
            })
            .collect::<Result<_>>()?;

        let start = Instant::now();
        let mut rng = RandomSource::derived(seed, &[tags::POOL]);
        let sampled = match (&params.pool_file, params.pool) {
            (Some(path), _) => {
                let items: Vec<Tour> = load_structures(path)?
                    .into_iter()
                    .map(|s| match s {
                        Structure::Tour(order) => {
                            let t = Tour::new(order);
                            instances[0].check_tour(&t)?;
                            Ok(t)
                        }
                        Structure::Choice(_) => Err(Error::Invalid("pool file holds configurations".into())),
                    })
                    .collect::<Result<_>>()?;
                crate::problems::Sampled { items, exhausted: false }
            }
            (None, PoolKind::Relaxed) => sample_subcircuits(params.nodes, &mut rng, spec.pool_size)?,
            (None, PoolKind::Feasible) => sample_subcircuits_where(params.nodes, &mut rng, spec.pool_size, |t| {
                instances.iter().all(|inst| tsp_is_feasible(inst, t))
            })?,
        };
        let pool_ms = start.elapsed().as_secs_f64() * 1e3;
        if sampled.items.len() < 2 {
            return Err(Error::DegeneratePool);
        }
        let tours = sampled.items;

        let start = Instant::now();
        let per_ctx: Vec<(FeatureMatrix, Vec<bool>)> = instances
            .par_iter()
            .map(|inst| {
                let mut m = FeatureMatrix::new(crate::problems::tsp::TSP_FEATURES);
                let mut mask = Vec::with_capacity(tours.len());
                for t in &tours {
                    m.push_dense(&tsp_features(inst, t)?)?;
                    mask.push(tsp_is_feasible(inst, t));
                }
                Ok((m, mask))
            })
            .collect::<Result<_>>()?;
        let features_ms = start.elapsed().as_secs_f64() * 1e3;
        let (features, feasible_mask): (Vec<_>, Vec<_>) =
            per_ctx.into_iter().map(|(m, mask)| (Arc::new(m), mask)).unzip();

        let hashes = SetupHashes {
            catalog_sha256: None,
            instances_sha256: Some(sha256_hex(&serde_json::to_vec(&instances)?)),
            pool_sha256: sha256_hex(&serde_json::to_vec(&tours)?),
        };
        Ok(Self {
            kind: ProblemKind::Pctsp,
            params: params.clone(),
            spec,
            seed,
            data: Data::Tsp { instances, tours },
            features,
            feasible_mask,
            train: (0..spec.train_instances).collect(),
            test: (spec.train_instances..contexts).collect(),
            clusters: ClusterCache::new(),
            timings: SetupTimings { pool_ms, features_ms, enumeration_ms: 0.0 },
            hashes,
            pool_exhausted: sampled.exhausted,
        })
    }

    fn build_config(params: &ProblemParams, spec: PoolSpec, seed: u64) -> Result<Self> {
        let catalog = match &params.catalog {
            Some(path) => ConfigCatalog::from_json(&std::fs::read_to_string(path)?)?,
            None => ConfigCatalog::default_catalog(),
        };
        let start = Instant::now();
        let feasible = config_enumerate_feasible(&catalog, DEFAULT_ENUMERATION_CAP)?;
        let enumeration_ms = start.elapsed().as_secs_f64() * 1e3;
        if feasible.is_empty() {
            return Err(Error::Infeasible("catalog admits no feasible assignment".into()));
        }

        let start = Instant::now();
        let mut rng = RandomSource::derived(seed, &[tags::POOL]);
        let (pool, exhausted) = match params.pool {
            _ if params.pool_file.is_some() => {
                let items: Vec<ConfigAssignment> = load_structures(params.pool_file.as_ref().expect("checked"))?
                    .into_iter()
                    .map(|s| match s {
                        Structure::Choice(c) => {
                            let y = ConfigAssignment::new(c);
                            catalog.check_shape(&y)?;
                            Ok(y)
                        }
                        Structure::Tour(_) => Err(Error::Invalid("pool file holds tours".into())),
                    })
                    .collect::<Result<_>>()?;
                (items, false)
            }
            PoolKind::Relaxed => {
                let s = config_sample_relaxed(&catalog, &mut rng, spec.pool_size)?;
                (s.items, s.exhausted)
            }
            PoolKind::Feasible => {
                if feasible.len() <= spec.pool_size {
                    (feasible.clone(), feasible.len() < spec.pool_size)
                } else {
                    let mut idx: Vec<usize> = sample(&mut rng, feasible.len(), spec.pool_size).into_vec();
                    idx.sort_unstable();
                    (idx.into_iter().map(|i| feasible[i].clone()).collect(), false)
                }
            }
        };
        let mut pool_ms = start.elapsed().as_secs_f64() * 1e3;
        if params.pool == PoolKind::Feasible {
            pool_ms += enumeration_ms;
        }
        if pool.len() < 2 {
            return Err(Error::DegeneratePool);
        }

        let start = Instant::now();
        let mut m = FeatureMatrix::new(catalog.feature_dim());
        for y in &pool {
            m.push_sparse(&catalog.sparse_features(y));
        }
        let mut feasible_features = FeatureMatrix::new(catalog.feature_dim());
        for y in &feasible {
            feasible_features.push_sparse(&catalog.sparse_features(y));
        }
        let features_ms = start.elapsed().as_secs_f64() * 1e3;

        let hashes = SetupHashes {
            catalog_sha256: Some(sha256_hex(catalog.to_json()?.as_bytes())),
            instances_sha256: None,
            pool_sha256: sha256_hex(&serde_json::to_vec(&pool)?),
        };
        Ok(Self {
            kind: ProblemKind::Config,
            params: params.clone(),
            spec,
            seed,
            data: Data::Config { catalog, pool, feasible, feasible_features },
            features: vec![Arc::new(m)],
            feasible_mask: Vec::new(),
            train: vec![0],
            test: vec![0],
            clusters: ClusterCache::new(),
            timings: SetupTimings { pool_ms, features_ms, enumeration_ms },
            hashes,
            pool_exhausted: exhausted,
        })
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn params(&self) -> &ProblemParams {
        &self.params
    }

    pub fn pool_spec(&self) -> PoolSpec {
        self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].dim()
    }

    pub fn context_count(&self) -> usize {
        self.features.len()
    }

    pub fn train_contexts(&self) -> &[usize] {
        &self.train
    }

    pub fn test_contexts(&self) -> &[usize] {
        &self.test
    }

    pub fn pool_len(&self) -> usize {
        self.features[0].len()
    }

    pub fn pool_exhausted(&self) -> bool {
        self.pool_exhausted
    }

    pub fn timings(&self) -> &SetupTimings {
        &self.timings
    }

    pub fn hashes(&self) -> &SetupHashes {
        &self.hashes
    }

    pub fn instances(&self) -> Option<&[TspInstance]> {
        match &self.data {
            Data::Tsp { instances, .. } => Some(instances),
            Data::Config { .. } => None,
        }
    }

    pub fn catalog(&self) -> Option<&ConfigCatalog> {
        match &self.data {
            Data::Config { catalog, .. } => Some(catalog),
            Data::Tsp { .. } => None,
        }
    }

    /// Configuration task: every feasible assignment, in lexicographic order.
    pub fn feasible_assignments(&self) -> Option<&[ConfigAssignment]> {
        match &self.data {
            Data::Config { feasible, .. } => Some(feasible),
            Data::Tsp { .. } => None,
        }
    }

    fn check_context(&self, ctx: usize) -> Result<()> {
        if ctx >= self.features.len() {
            return Err(Error::Invalid(format!("unknown instance {ctx}")));
        }
        Ok(())
    }

    pub fn features(&self, ctx: usize) -> Result<&Arc<FeatureMatrix>> {
        self.check_context(ctx)?;
        Ok(&self.features[ctx])
    }

    pub fn candidate(&self, id: usize) -> Result<Structure> {
        if id >= self.pool_len() {
            return Err(Error::Invalid(format!("unknown candidate {id}")));
        }
        Ok(match &self.data {
            Data::Tsp { tours, .. } => Structure::from(&tours[id]),
            Data::Config { pool, .. } => Structure::from(&pool[id]),
        })
    }

    /// Pool clustered in context `ctx`, built on first use.
    pub fn clustered(&self, ctx: usize) -> Result<Arc<ClusteredPool>> {
        self.check_context(ctx)?;
        self.clusters.get_or_build(ctx, || {
            let mut rng = RandomSource::derived(self.seed, &[tags::CLUSTER, ctx as u64]);
            ClusteredPool::build(Arc::clone(&self.features[ctx]), self.spec.clusters, &mut rng, DEFAULT_MAX_ITERS)
        })
    }

    /// Whether synthesis in `ctx` is exact rather than a best-in-pool proxy.
    pub fn exact_synthesis(&self) -> bool {
        match self.kind {
            ProblemKind::Config => true,
            ProblemKind::Pctsp => self.params.nodes <= self.params.exact_cap,
        }
    }

    /// Feasible solution maximizing `<w, phi>` in context `ctx`.
    pub fn synthesize(&self, ctx: usize, w: &WeightVector) -> Result<Synthesis> {
        self.check_context(ctx)?;
        crate::error::check_dim(self.feature_dim(), w.dim())?;
        match &self.data {
            Data::Tsp { instances, tours } => {
                let inst = &instances[ctx];
                if self.exact_synthesis() {
                    let tour = tsp_solve_exact(inst, w, &ExactConfig { node_cap: self.params.exact_cap })?;
                    let features = tsp_features(inst, &tour)?;
                    return Ok(Synthesis { context: ctx, structure: Structure::from(&tour), features, solver: SolverKind::Exact });
                }
                let mask = &self.feasible_mask[ctx];
                let best = self.features[ctx]
                    .argmax_filtered(w, |i| mask[i])?
                    .ok_or_else(|| Error::Infeasible("no pool candidate meets the prize quota".into()))?;
                Ok(Synthesis {
                    context: ctx,
                    structure: Structure::from(&tours[best]),
                    features: self.features[ctx].row(best),
                    solver: SolverKind::Pool,
                })
            }
            Data::Config { feasible, feasible_features, .. } => {
                let best = feasible_features.argmax_filtered(w, |_| true)?.ok_or(Error::EmptyPool)?;
                Ok(Synthesis {
                    context: ctx,
                    structure: Structure::from(&feasible[best]),
                    features: feasible_features.row(best),
                    solver: SolverKind::Exact,
                })
            }
        }
    }

    /// `max - min` of `<w, phi>` over the pool in context `ctx`.
    pub fn utility_range(&self, ctx: usize, w: &WeightVector) -> Result<f64> {
        let f = self.features(ctx)?;
        crate::error::check_dim(f.dim(), w.dim())?;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..f.len() {
            let u = f.utility(i, w.values());
            lo = lo.min(u);
            hi = hi.max(u);
        }
        Ok(hi - lo)
    }

    /// Names of the feature coordinates.
    pub fn feature_names(&self) -> Vec<String> {
        match &self.data {
            Data::Tsp { .. } => SUB_OBJECTIVE_NAMES.iter().map(|s| s.to_string()).collect(),
            Data::Config { catalog, .. } => catalog
                .components
                .iter()
                .flat_map(|c| c.options.iter().map(|o| o.name.clone()))
                .chain(std::iter::once("price".to_string()))
                .collect(),
        }
    }

    /// Human-readable sub-objective values of `structure` in `ctx`: raw
    /// edge-value sums and skipped penalties for tours, chosen options and the
    /// total price for configurations.
    pub fn breakdown(&self, ctx: usize, structure: &Structure) -> Result<Vec<(String, f64)>> {
        self.check_context(ctx)?;
        match (&self.data, structure) {
            (Data::Tsp { instances, .. }, Structure::Tour(order)) => {
                let inst = &instances[ctx];
                let tour = Tour::new(order.clone());
                inst.check_tour(&tour)?;
                Ok(SUB_OBJECTIVE_NAMES
                    .iter()
                    .zip(inst.raw_objectives(&tour))
                    .map(|(n, v)| (n.to_string(), v))
                    .collect())
            }
            (Data::Config { catalog, .. }, Structure::Choice(choice)) => {
                let y = ConfigAssignment::new(choice.clone());
                catalog.check_shape(&y)?;
                let mut out: Vec<(String, f64)> =
                    y.choice.iter().enumerate().map(|(c, &o)| (catalog.components[c].options[o].name.clone(), 1.0)).collect();
                out.push(("price".into(), catalog.total_price(&y)));
                Ok(out)
            }
            _ => Err(Error::Invalid("structure does not match the problem".into())),
        }
    }

    /// Display payload for `structure` in `ctx`.
    pub fn render(&self, ctx: usize, structure: &Structure) -> Result<Value> {
        self.check_context(ctx)?;
        match (&self.data, structure) {
            (Data::Tsp { instances, .. }, Structure::Tour(order)) => {
                let inst = &instances[ctx];
                inst.check_tour(&Tour::new(order.clone()))?;
                let point = |n: usize| json!({"node": n, "x": inst.coords[n][0], "y": inst.coords[n][1]});
                let mut visited = vec![false; inst.node_count];
                order.iter().for_each(|&n| visited[n] = true);
                Ok(json!({
                    "kind": "tour",
                    "depot": point(0),
                    "path": order.iter().map(|&n| point(n)).collect::<Vec<_>>(),
                    "skipped": (0..inst.node_count).filter(|&n| !visited[n]).map(point).collect::<Vec<_>>(),
                }))
            }
            (Data::Config { catalog, .. }, Structure::Choice(choice)) => {
                let y = ConfigAssignment::new(choice.clone());
                catalog.check_shape(&y)?;
                Ok(json!({
                    "kind": "config",
                    "options": y.choice.iter().enumerate().map(|(c, &o)| json!({
                        "component": catalog.components[c].name,
                        "option": catalog.components[c].options[o].name,
                        "price": catalog.components[c].options[o].price,
                    })).collect::<Vec<_>>(),
                    "price": catalog.total_price(&y),
                    "feasible": catalog.is_feasible(&y),
                }))
            }
            _ => Err(Error::Invalid("structure does not match the problem".into())),
        }
    }
}
