//! Weight updates from pairwise preferences.
//!
//! Every rule has the form `w <- w + eta * alpha * delta`, with
//! `delta = phi(winner) - phi(loser)`. Only the update factor `alpha` differs:
//!
//! | rule | alpha |
//! |------|-------|
//! | structured perceptron (SP) | `1` if `<w, delta> < 0`, else `0` |
//! | preference perceptron (PP) | `1` |
//! | Bradley-Terry MLE | `sigmoid(-<w, delta>)` |
//!
//! The MLE factor is the negative gradient scale of
//! `-log sigmoid(<w, delta>)`, which makes it a smoothed SP.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::{tags, RandomSource};
use crate::types::{dot, Ensemble, FeatureVector, WeightVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    SpOnline,
    PpOnline,
    MleOnline,
    MleBatch,
}

impl UpdateRule {
    pub fn is_online(self) -> bool {
        self != UpdateRule::MleBatch
    }
}

impl std::str::FromStr for UpdateRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sp" | "sp_online" | "sp-online" => Ok(Self::SpOnline),
            "pp" | "pp_online" | "pp-online" => Ok(Self::PpOnline),
            "mle" | "mle_online" | "mle-online" => Ok(Self::MleOnline),
            "mle-batch" | "mle_batch" => Ok(Self::MleBatch),
            other => Err(Error::Invalid(format!("unknown update rule {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self { epochs: 4, batch_size: 4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub rule: UpdateRule,
    pub learning_rate: f64,
    #[serde(default)]
    pub batch: BatchConfig,
    /// Batch retraining starts from the current weights instead of the
    /// member's initialization.
    #[serde(default)]
    pub warm_start: bool,
}

impl LearnerConfig {
    pub fn new(rule: UpdateRule, learning_rate: f64) -> Result<Self> {
        let cfg = Self { rule, learning_rate, batch: BatchConfig::default(), warm_start: false };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Invalid("learning rate must be positive".into()));
        }
        if self.batch.epochs == 0 || self.batch.batch_size == 0 {
            return Err(Error::Invalid("epochs and batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// `delta = phi(winner) - phi(loser)` for one strict preference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub delta: FeatureVector,
}

/// Logistic function, evaluated without overflow for either sign.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)`, stable for large `|x|`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn margin(w: &WeightVector, d: &FeatureVector) -> Result<f64> {
    check_dim(w.dim(), d.dim())?;
    Ok(dot(w.values(), d.values()))
}

/// Update factor of `rule` as a function of the predicted margin `<w, delta>`.
pub fn update_factor_at(rule: UpdateRule, margin: f64) -> f64 {
    match rule {
        UpdateRule::SpOnline => {
            if margin < 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UpdateRule::PpOnline => 1.0,
        UpdateRule::MleOnline | UpdateRule::MleBatch => sigmoid(-margin),
    }
}

/// Update factor `alpha` in `[0, 1]`.
pub fn update_factor(rule: UpdateRule, w: &WeightVector, d: &FeatureVector) -> Result<f64> {
    Ok(update_factor_at(rule, margin(w, d)?))
}

/// `w + eta * alpha * delta`.
pub fn online_step(rule: UpdateRule, w: &WeightVector, d: &FeatureVector, eta: f64) -> Result<WeightVector> {
    let alpha = update_factor(rule, w, d)?;
    let mut out = w.clone();
    for (x, &di) in out.values_mut().iter_mut().zip(d.values()) {
        *x += eta * (alpha * di);
    }
    Ok(out)
}

/// Bradley-Terry negative log-likelihood `-log sigmoid(<w, delta>)`.
pub fn nll(w: &WeightVector, d: &FeatureVector) -> Result<f64> {
    Ok(softplus(-margin(w, d)?))
}

/// Gradient of [`nll`]: `-sigmoid(-<w, delta>) * delta`.
pub fn nll_grad(w: &WeightVector, d: &FeatureVector) -> Result<FeatureVector> {
    let alpha = sigmoid(-margin(w, d)?);
    FeatureVector::new(d.values().iter().map(|&di| -(alpha * di)).collect())
}

/// Identifies the shuffle stream of one ensemble member.
#[derive(Clone, Copy, Debug)]
pub struct ShuffleKey {
    pub seed: u64,
    pub member: u64,
}

/// Mini-batch gradient descent on the summed NLL, restarted from `w_init`.
///
/// Each epoch reshuffles with a stream derived from `(seed, member, epoch)`;
/// the last batch may be short. The step uses the batch-mean gradient.
pub fn batch_retrain(
    dataset: &[TrainingExample],
    w_init: &WeightVector,
    cfg: &LearnerConfig,
    key: ShuffleKey,
) -> Result<WeightVector> {
    cfg.validate()?;
    let mut w = w_init.clone();
    if dataset.is_empty() {
        return Ok(w);
    }
    for ex in dataset {
        check_dim(w.dim(), ex.delta.dim())?;
    }
    let dim = w.dim();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut grad = vec![0.0; dim];
    for epoch in 0..cfg.batch.epochs {
        let mut rng = RandomSource::derived(key.seed, &[tags::SHUFFLE, key.member, epoch as u64]);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let d = dataset[i].delta.values();
                let alpha = sigmoid(-dot(w.values(), d));
                for (g, &di) in grad.iter_mut().zip(d) {
                    *g += -(alpha * di);
                }
            }
            let n = batch.len() as f64;
            for (x, g) in w.values_mut().iter_mut().zip(&grad) {
                *x -= cfg.learning_rate * (g / n);
            }
        }
    }
    Ok(w)
}

/// `m` members drawn from `N(1, I_n)`.
pub fn init_ensemble<R: Rng + ?Sized>(m: usize, n: usize, rng: &mut R) -> Result<Ensemble> {
    if m == 0 || n == 0 {
        return Err(Error::Invalid("ensemble size and dimension must be positive".into()));
    }
    let normal = Normal::new(1.0, 1.0).expect("valid normal");
    Ensemble::new(
        (0..m)
            .map(|_| WeightVector::new((0..n).map(|_| normal.sample(rng)).collect()))
            .collect::<Result<_>>()?,
    )
}

/// Applies `cfg.rule` to every member.
///
/// Online rules step each member with the newest example of `dataset`.
/// Batch MLE retrains member `i` on the whole dataset from `initial[i]`
/// (or from `current[i]` with `warm_start`).
pub fn ensemble_update(
    current: &Ensemble,
    initial: &Ensemble,
    dataset: &[TrainingExample],
    cfg: &LearnerConfig,
    seed: u64,
) -> Result<Ensemble> {
    check_dim(current.size(), initial.size())?;
    let members = match cfg.rule {
        UpdateRule::MleBatch => current
            .members()
            .iter()
            .zip(initial.members())
            .enumerate()
            .map(|(i, (cur, init))| {
                let start = if cfg.warm_start { cur } else { init };
                batch_retrain(dataset, start, cfg, ShuffleKey { seed, member: i as u64 })
            })
            .collect::<Result<Vec<_>>>()?,
        rule => match dataset.last() {
            None => current.members().to_vec(),
            Some(ex) => current
                .members()
                .iter()
                .map(|w| online_step(rule, w, &ex.delta, cfg.learning_rate))
                .collect::<Result<Vec<_>>>()?,
        },
    };
    Ensemble::new(members)
}
