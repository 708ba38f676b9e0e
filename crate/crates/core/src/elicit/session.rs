//! The elicitation loop for one decision maker.
//!
//! A session alternates [`SessionState::next_query`] and
//! [`SessionState::submit`]. A strict answer grows the dataset, updates the
//! ensemble and ends the iteration. An indifferent answer triggers a fresh
//! query in the same iteration (excluding candidates already shown) until the
//! retry cap is hit, after which the iteration ends without new data.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::elicit::setup::{PoolSpec, ProblemKind, ProblemParams, ProblemSetup, SolverKind, Synthesis};
use crate::error::{Error, Result};
use crate::learning::{ensemble_update, init_ensemble, LearnerConfig, TrainingExample, UpdateRule};
use crate::oracle::{dm_satisfied, relative_regret, respond_to_gap, NoiseConfig, SimulatedDM};
use crate::rng::{stream_id, tags, RandomSource};
use crate::selection::{select_query_excluding, AcquisitionConfig, AcquisitionMode};
use crate::types::{delta, mean_std, utility, Ensemble, Label, PreferenceObservation, WeightVector};

/// Default step size per problem and rule.
pub fn default_learning_rate(kind: ProblemKind, rule: UpdateRule) -> f64 {
    match kind {
        ProblemKind::Config => 2.0,
        ProblemKind::Pctsp => match rule {
            UpdateRule::SpOnline | UpdateRule::MleOnline => 0.5,
            UpdateRule::PpOnline => 0.1,
            UpdateRule::MleBatch => 1.0,
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfig {
    pub steps: usize,
    pub train_instances: usize,
    pub test_instances: usize,
    pub eval_every: usize,
    pub indifference_retry_cap: usize,
    pub pool_size: usize,
    /// 0 disables clustering.
    pub clusters: usize,
    pub ensemble_size: usize,
    pub acquisition: AcquisitionMode,
    pub learner: LearnerConfig,
    /// Simulated-DM response noise on the normalized utility scale.
    pub noise: NoiseConfig,
}

impl LoopConfig {
    pub fn defaults_for(kind: ProblemKind, params: &ProblemParams) -> Self {
        let rule = UpdateRule::MleBatch;
        Self {
            steps: 100,
            train_instances: 50,
            test_instances: 10,
            eval_every: if kind == ProblemKind::Pctsp && params.nodes > params.exact_cap { 10 } else { 1 },
            indifference_retry_cap: 5,
            pool_size: 10_000,
            clusters: if kind == ProblemKind::Pctsp { 5 } else { 0 },
            ensemble_size: 25,
            acquisition: AcquisitionMode::Ucb,
            learner: LearnerConfig {
                rule,
                learning_rate: default_learning_rate(kind, rule),
                batch: Default::default(),
                warm_start: false,
            },
            noise: NoiseConfig::default(),
        }
    }

    /// Defaults for `kind` with the fields of the JSON object `overrides`
    /// replaced (nested objects merge key by key). When `learner.rule` is
    /// overridden without a learning rate, the rule's default rate is used.
    pub fn with_overrides(kind: ProblemKind, params: &ProblemParams, overrides: &Value) -> Result<Self> {
        let mut base = serde_json::to_value(Self::defaults_for(kind, params))?;
        if !overrides.is_null() && !overrides.is_object() {
            return Err(Error::Invalid("loop_config must be an object".into()));
        }
        let rate_given = overrides.pointer("/learner/learning_rate").is_some();
        merge(&mut base, overrides);
        let mut cfg: Self = serde_json::from_value(base)?;
        if !rate_given {
            cfg.learner.learning_rate = default_learning_rate(kind, cfg.learner.rule);
        }
        if kind == ProblemKind::Config && cfg.clusters > 0 {
            log::warn!("clustering is not used on the configuration task; falling back to clusters = 0");
            cfg.clusters = 0;
        }
        cfg.validate(kind)?;
        Ok(cfg)
    }

    pub fn validate(&self, kind: ProblemKind) -> Result<()> {
        if self.steps == 0 || self.eval_every == 0 || self.ensemble_size == 0 {
            return Err(Error::Invalid("steps, eval_every and ensemble_size must be at least 1".into()));
        }
        if self.indifference_retry_cap == 0 {
            return Err(Error::Invalid("indifference_retry_cap must be at least 1".into()));
        }
        if kind == ProblemKind::Pctsp && (self.train_instances == 0 || self.test_instances == 0) {
            return Err(Error::Invalid("train and test instance counts must be at least 1".into()));
        }
        self.learner.validate()
    }

    pub fn pool_spec(&self) -> PoolSpec {
        PoolSpec {
            pool_size: self.pool_size,
            clusters: self.clusters,
            train_instances: self.train_instances,
            test_instances: self.test_instances,
        }
    }

    pub fn acquisition_config(&self) -> AcquisitionConfig {
        AcquisitionConfig { mode: self.acquisition, k: self.clusters }
    }
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) if !p.is_null() => *b = p.clone(),
        _ => {}
    }
}

/// A pairwise query awaiting an answer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: u64,
    /// Iteration the answer will count towards (from 1).
    pub iteration: usize,
    pub context: usize,
    pub left: usize,
    pub right: usize,
    /// 0 for the first query of an iteration, then one per indifferent retry.
    pub attempt: usize,
}

/// Supplies labels for queries.
pub trait AnswerSource {
    /// `Err(Error::AnswerTimeout)` leaves the query pending.
    fn answer(&mut self, setup: &ProblemSetup, query: &Query) -> Result<Label>;
}

/// Answers with a simulated DM, calibrated per context on the pool.
pub struct SimulatedSource {
    dm: SimulatedDM,
    rng: RandomSource,
    calibrated: HashMap<usize, SimulatedDM>,
}

impl SimulatedSource {
    pub fn new(dm: SimulatedDM) -> Self {
        let rng = RandomSource::derived(dm.seed, &[tags::RESPOND]);
        Self { dm, rng, calibrated: HashMap::new() }
    }

    pub fn dm(&self) -> &SimulatedDM {
        &self.dm
    }
}

fn calibrate(setup: &ProblemSetup, dm: &SimulatedDM, ctx: usize) -> Result<SimulatedDM> {
    Ok(dm.calibrated(setup.utility_range(ctx, &dm.w_true)?))
}

impl AnswerSource for SimulatedSource {
    fn answer(&mut self, setup: &ProblemSetup, q: &Query) -> Result<Label> {
        if !self.calibrated.contains_key(&q.context) {
            let d = calibrate(setup, &self.dm, q.context)?;
            self.calibrated.insert(q.context, d);
        }
        let dm = &self.calibrated[&q.context];
        let f = setup.features(q.context)?;
        let w = dm.w_true.values();
        let d = f.utility(q.left, w) - f.utility(q.right, w);
        Ok(respond_to_gap(dm, d, &mut self.rng))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    pub regret_mean: f64,
    /// Standard error across test instances.
    pub regret_stderr: f64,
    pub satisfied_frac: f64,
    /// Cumulative indifferent exchanges.
    pub indifference_count: usize,
    /// Regret measured against the best feasible pool candidate.
    pub proxy: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub iteration: usize,
    pub select_ms: f64,
    pub update_ms: f64,
}

/// Ground truth for evaluation ticks.
struct Evaluator {
    /// Per test context: DM calibrated there, and its optimal utility.
    targets: Vec<(usize, SimulatedDM, f64)>,
    proxy: bool,
}

impl Evaluator {
    fn new(setup: &ProblemSetup, dm: &SimulatedDM) -> Result<Self> {
        let targets = setup
            .test_contexts()
            .par_iter()
            .map(|&ctx| {
                let best = setup.synthesize(ctx, &dm.w_true)?;
                Ok((ctx, calibrate(setup, dm, ctx)?, utility(&dm.w_true, &best.features)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { targets, proxy: !setup.exact_synthesis() })
    }

    fn evaluate(&self, setup: &ProblemSetup, w: &WeightVector) -> Result<(f64, f64, f64)> {
        let per: Vec<(f64, bool)> = self
            .targets
            .par_iter()
            .map(|(ctx, dm, u_opt)| {
                let s = setup.synthesize(*ctx, w)?;
                let u_hat = utility(&dm.w_true, &s.features)?;
                // A best-in-pool proxy can be beaten by the synthesized tour.
                let u_opt = if self.proxy { u_opt.max(u_hat) } else { *u_opt };
                Ok((relative_regret(u_opt, u_hat)?, dm_satisfied(dm, u_opt, u_hat)))
            })
            .collect::<Result<_>>()?;
        let n = per.len() as f64;
        let regrets: Vec<f64> = per.iter().map(|p| p.0).collect();
        let (mean, pop_std) = mean_std(&regrets);
        let stderr = if per.len() > 1 { pop_std * (n / (n - 1.0)).sqrt() / n.sqrt() } else { 0.0 };
        let sat = per.iter().filter(|p| p.1).count() as f64 / n;
        Ok((mean, stderr, sat))
    }
}

/// Result of [`SessionState::submit`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SubmitOutcome {
    /// Completed iterations after the answer.
    pub iteration: usize,
    pub accepted: bool,
    /// The answer ended the iteration.
    pub advanced: bool,
}

/// Learned weights and counters, for display.
#[derive(Clone, Debug, Serialize)]
pub struct SessionSnapshot {
    pub iteration: usize,
    pub steps: usize,
    pub weights_mean: Vec<f64>,
    pub weights_std: Vec<f64>,
    pub answered: usize,
    pub indifferent: usize,
    pub exchanges: usize,
    pub finished: bool,
}

/// Synthesis with a per-coordinate contribution breakdown.
#[derive(Clone, Debug, Serialize)]
pub struct SynthesisReport {
    #[serde(flatten)]
    pub synthesis: Synthesis,
    pub weights: Vec<f64>,
    /// `(name, weight * feature)` per coordinate.
    pub contributions: Vec<(String, f64)>,
    pub utility: f64,
}

pub struct SessionState {
    setup: Arc<ProblemSetup>,
    cfg: LoopConfig,
    seed: u64,
    stream: u64,
    t: usize,
    initial: Ensemble,
    ensemble: Ensemble,
    dataset: Vec<PreferenceObservation>,
    examples: Vec<TrainingExample>,
    exchanges: Vec<PreferenceObservation>,
    schedule: Vec<usize>,
    pending: Option<Query>,
    excluded: Vec<usize>,
    attempts: usize,
    next_query_id: u64,
    indifference_count: usize,
    select_ms: f64,
    evals: Vec<EvalRecord>,
    timings: Vec<TimingRecord>,
    select_rng: RandomSource,
    evaluator: Option<Evaluator>,
}

impl SessionState {
    /// New session on `setup`. `stream` separates sessions sharing a seed
    /// (the DM id in benchmark runs). With `dm`, evaluation ticks measure
    /// regret against its true weights.
    pub fn new(setup: Arc<ProblemSetup>, cfg: LoopConfig, seed: u64, stream: u64, dm: Option<&SimulatedDM>) -> Result<Self> {
        cfg.validate(setup.kind())?;
        let built = setup.pool_spec();
        let matches = match setup.kind() {
            ProblemKind::Pctsp => cfg.pool_spec() == built,
            ProblemKind::Config => cfg.pool_size == built.pool_size && cfg.clusters == built.clusters,
        };
        if !matches {
            return Err(Error::Invalid("loop configuration does not match the problem setup".into()));
        }
        let n = setup.feature_dim();
        let initial = init_ensemble(cfg.ensemble_size, n, &mut RandomSource::derived(seed, &[tags::ENSEMBLE_INIT, stream]))?;
        let mut schedule = setup.train_contexts().to_vec();
        schedule.shuffle(&mut RandomSource::derived(seed, &[tags::SCHEDULE, stream]));
        let evaluator = dm.map(|d| Evaluator::new(&setup, d)).transpose()?;
        Ok(Self {
            select_rng: RandomSource::derived(seed, &[tags::SELECT, stream]),
            setup,
            cfg,
            seed,
            stream,
            t: 0,
            ensemble: initial.clone(),
            initial,
            dataset: Vec::new(),
            examples: Vec::new(),
            exchanges: Vec::new(),
            schedule,
            pending: None,
            excluded: Vec::new(),
            attempts: 0,
            next_query_id: 1,
            indifference_count: 0,
            select_ms: 0.0,
            evals: Vec::new(),
            timings: Vec::new(),
            evaluator,
        })
    }

    pub fn setup(&self) -> &Arc<ProblemSetup> {
        &self.setup
    }

    pub fn config(&self) -> &LoopConfig {
        &self.cfg
    }

    pub fn iteration(&self) -> usize {
        self.t
    }

    pub fn is_finished(&self) -> bool {
        self.t >= self.cfg.steps
    }

    pub fn ensemble(&self) -> &Ensemble {
        &self.ensemble
    }

    pub fn initial_ensemble(&self) -> &Ensemble {
        &self.initial
    }

    /// Strict observations, in answer order.
    pub fn dataset(&self) -> &[PreferenceObservation] {
        &self.dataset
    }

    /// Every answered query, indifferent ones included.
    pub fn exchanges(&self) -> &[PreferenceObservation] {
        &self.exchanges
    }

    pub fn indifference_count(&self) -> usize {
        self.indifference_count
    }

    pub fn pending(&self) -> Option<&Query> {
        self.pending.as_ref()
    }

    pub fn evals(&self) -> &[EvalRecord] {
        &self.evals
    }

    pub fn timings(&self) -> &[TimingRecord] {
        &self.timings
    }

    /// Training context of iteration `t` (from 1).
    pub fn context_for(&self, t: usize) -> usize {
        self.schedule[(t - 1) % self.schedule.len()]
    }

    /// The pending query, selecting one if none is pending.
    pub fn next_query(&mut self) -> Result<Query> {
        if let Some(q) = &self.pending {
            return Ok(q.clone());
        }
        loop {
            if self.is_finished() {
                return Err(Error::Finished);
            }
            let t = self.t + 1;
            let ctx = self.context_for(t);
            let pool = self.setup.clustered(ctx)?;
            let start = Instant::now();
            let picked = select_query_excluding(
                &pool,
                &self.ensemble,
                &self.cfg.acquisition_config(),
                t,
                &mut self.select_rng,
                &self.excluded,
            );
            self.select_ms += start.elapsed().as_secs_f64() * 1e3;
            match picked {
                Ok((left, right)) => {
                    let q = Query { query_id: self.next_query_id, iteration: t, context: ctx, left, right, attempt: self.attempts };
                    self.next_query_id += 1;
                    self.pending = Some(q.clone());
                    return Ok(q);
                }
                // Retries ran out of unseen candidates: end the iteration.
                Err(Error::DegeneratePool) if self.attempts > 0 => self.advance(0.0)?,
                Err(e) => return Err(e),
            }
        }
    }

    /// Applies the answer to the pending query `query_id`.
    pub fn submit(&mut self, query_id: u64, label: Label) -> Result<SubmitOutcome> {
        let q = match &self.pending {
            Some(q) if q.query_id == query_id => q.clone(),
            other => return Err(Error::StaleQuery { got: query_id, pending: other.as_ref().map(|q| q.query_id) }),
        };
        self.pending = None;
        let obs = PreferenceObservation::new(q.context, q.left, q.right, label)?;
        self.exchanges.push(obs.clone());
        if let Some((win, lose)) = obs.ordered() {
            let f = self.setup.features(q.context)?;
            let d = delta(&f.row(win), &f.row(lose))?;
            self.dataset.push(obs);
            self.examples.push(TrainingExample { delta: d });
            let start = Instant::now();
            let shuffle_seed = stream_id(&[self.seed, self.stream, q.iteration as u64]);
            self.ensemble = ensemble_update(&self.ensemble, &self.initial, &self.examples, &self.cfg.learner, shuffle_seed)?;
            let update_ms = start.elapsed().as_secs_f64() * 1e3;
            self.advance(update_ms)?;
            return Ok(SubmitOutcome { iteration: self.t, accepted: true, advanced: true });
        }
        self.indifference_count += 1;
        self.attempts += 1;
        self.excluded.extend([q.left, q.right]);
        let advanced = self.attempts > self.cfg.indifference_retry_cap;
        if advanced {
            self.advance(0.0)?;
        }
        Ok(SubmitOutcome { iteration: self.t, accepted: true, advanced })
    }

    fn advance(&mut self, update_ms: f64) -> Result<()> {
        self.t += 1;
        self.timings.push(TimingRecord { iteration: self.t, select_ms: self.select_ms, update_ms });
        self.select_ms = 0.0;
        self.excluded.clear();
        self.attempts = 0;
        if self.t % self.cfg.eval_every == 0 || self.t == self.cfg.steps {
            if let Some(ev) = &self.evaluator {
                let (regret_mean, regret_stderr, satisfied_frac) = ev.evaluate(&self.setup, &self.ensemble.mean_weights())?;
                self.evals.push(EvalRecord {
                    iteration: self.t,
                    regret_mean,
                    regret_stderr,
                    satisfied_frac,
                    indifference_count: self.indifference_count,
                    proxy: ev.proxy,
                });
            }
        }
        Ok(())
    }

    /// One full iteration: queries until an answer ends it.
    pub fn run_iteration(&mut self, source: &mut dyn AnswerSource) -> Result<()> {
        loop {
            let q = self.next_query()?;
            let label = source.answer(&self.setup, &q)?;
            if self.submit(q.query_id, label)?.advanced {
                return Ok(());
            }
        }
    }

    pub fn run_to_end(&mut self, source: &mut dyn AnswerSource) -> Result<()> {
        while !self.is_finished() {
            self.run_iteration(source)?;
        }
        Ok(())
    }

    /// Solution maximizing the ensemble-mean utility in `ctx`.
    pub fn synthesize(&self, ctx: usize) -> Result<SynthesisReport> {
        synthesize_with(&self.setup, &self.ensemble.mean_weights(), ctx)
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            iteration: self.t,
            steps: self.cfg.steps,
            weights_mean: self.ensemble.mean_weights().into_inner(),
            weights_std: self.ensemble.std_weights(),
            answered: self.dataset.len(),
            indifferent: self.indifference_count,
            exchanges: self.exchanges.len(),
            finished: self.is_finished(),
        }
    }

    /// Dataset checkpoint: one JSON object per strict observation with its
    /// cached `delta`.
    pub fn write_dataset_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            #[serde(flatten)]
            observation: &'a PreferenceObservation,
            delta: &'a [f64],
        }
        for (obs, ex) in self.dataset.iter().zip(&self.examples) {
            serde_json::to_writer(&mut out, &Line { observation: obs, delta: ex.delta.values() })?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Synthesis under `w` with its contribution breakdown.
pub fn synthesize_with(setup: &ProblemSetup, w: &WeightVector, ctx: usize) -> Result<SynthesisReport> {
    let synthesis = setup.synthesize(ctx, w)?;
    let contributions = setup
        .feature_names()
        .into_iter()
        .zip(w.values().iter().zip(synthesis.features.values()))
        .filter(|(_, (_, &x))| x != 0.0)
        .map(|(n, (&wi, &x))| (n, wi * x))
        .collect();
    let u = utility(w, &synthesis.features)?;
    Ok(SynthesisReport { synthesis, weights: w.values().to_vec(), contributions, utility: u })
}

impl SolverKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SolverKind::Exact => "exact",
            SolverKind::Pool => "pool",
        }
    }
}

/// Runs `dm` through a full session.
pub fn run_simulated(setup: Arc<ProblemSetup>, cfg: &LoopConfig, seed: u64, dm: &SimulatedDM) -> Result<SessionState> {
    let mut state = SessionState::new(setup, cfg.clone(), seed, dm.id as u64, Some(dm))?;
    let mut source = SimulatedSource::new(dm.clone());
    state.run_to_end(&mut source)?;
    Ok(state)
}
