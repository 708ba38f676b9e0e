//! Acquisition functions and pairwise query selection over a clustered pool.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::selection::kmeans::ClusteredPool;
use crate::types::{ensemble_stats, mean_std, Ensemble, FeatureVector};

/// How many times two fresh clusters are drawn before falling back to the
/// global top-2.
pub const CLUSTER_RETRIES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionMode {
    /// `(1 - gamma) * mean + gamma * std` over the ensemble.
    Ucb,
    /// UCB with `gamma = 0`.
    MeanOnly,
    /// UCB with `gamma = 1`.
    VarianceOnly,
    /// Choice Perceptron query program evaluated over the pool.
    ChoicepercPool,
}

impl std::str::FromStr for AcquisitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ucb" => Ok(Self::Ucb),
            "mean" | "mean_only" => Ok(Self::MeanOnly),
            "variance" | "variance_only" => Ok(Self::VarianceOnly),
            "choiceperc-pool" | "choiceperc_pool" => Ok(Self::ChoicepercPool),
            other => Err(Error::Invalid(format!("unknown acquisition mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    pub mode: AcquisitionMode,
    /// Cluster count; 0 disables clustering.
    pub k: usize,
}

impl AcquisitionConfig {
    /// Exploration weight at iteration `t` (counted from 1).
    pub fn gamma(&self, t: usize) -> f64 {
        match self.mode {
            AcquisitionMode::MeanOnly => 0.0,
            AcquisitionMode::VarianceOnly => 1.0,
            AcquisitionMode::Ucb | AcquisitionMode::ChoicepercPool => gamma_schedule(t),
        }
    }
}

/// `gamma_t = 1 / max(t, 1)`.
pub fn gamma_schedule(t: usize) -> f64 {
    (1.0 / t.max(1) as f64).clamp(0.0, 1.0)
}

/// `(1 - gamma) * mean + gamma * std` of the ensemble utilities.
pub fn ucb_score(ensemble: &Ensemble, phi: &FeatureVector, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Invalid(format!("gamma {gamma} outside [0, 1]")));
    }
    let (mean, std) = ensemble_stats(ensemble, phi)?;
    Ok((1.0 - gamma) * mean + gamma * std)
}

/// Scores pool rows against one ensemble snapshot.
struct Scorer<'a> {
    pool: &'a ClusteredPool,
    members_t: Vec<f64>,
    m: usize,
    buf: Vec<f64>,
}

impl<'a> Scorer<'a> {
    fn new(pool: &'a ClusteredPool, ensemble: &Ensemble) -> Self {
        let m = ensemble.size();
        let dim = ensemble.dim();
        let mut members_t = vec![0.0; dim * m];
        for (k, w) in ensemble.members().iter().enumerate() {
            for (j, &x) in w.values().iter().enumerate() {
                members_t[j * m + k] = x;
            }
        }
        Self { pool, members_t, m, buf: vec![0.0; m] }
    }

    fn ucb(&mut self, i: usize, gamma: f64) -> f64 {
        self.buf.iter_mut().for_each(|b| *b = 0.0);
        let (idx, val) = self.pool.features().row_sparse(i);
        for (&j, &x) in idx.iter().zip(val) {
            let col = &self.members_t[j as usize * self.m..(j as usize + 1) * self.m];
            for (b, &c) in self.buf.iter_mut().zip(col) {
                *b += x * c;
            }
        }
        let (mean, std) = mean_std(&self.buf);
        (1.0 - gamma) * mean + gamma * std
    }
}

fn argmax_by<F: FnMut(usize) -> f64>(ids: impl Iterator<Item = usize>, mut score: F) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for i in ids {
        let s = score(i);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best
}

/// Picks a query pair from `pool`.
pub fn select_query<R: Rng + ?Sized>(
    pool: &ClusteredPool,
    ensemble: &Ensemble,
    cfg: &AcquisitionConfig,
    t: usize,
    rng: &mut R,
) -> Result<(usize, usize)> {
    select_query_excluding(pool, ensemble, cfg, t, rng, &[])
}

/// [`select_query`] skipping the candidates listed in `excluded` (used when
/// re-querying after an indifferent answer).
pub fn select_query_excluding<R: Rng + ?Sized>(
    pool: &ClusteredPool,
    ensemble: &Ensemble,
    cfg: &AcquisitionConfig,
    t: usize,
    rng: &mut R,
    excluded: &[usize],
) -> Result<(usize, usize)> {
    check_dim(pool.features().dim(), ensemble.dim())?;
    let mut skip = vec![false; pool.len()];
    for &e in excluded {
        if e < skip.len() {
            skip[e] = true;
        }
    }
    let gamma = cfg.gamma(t);
    let mut scorer = Scorer::new(pool, ensemble);

    if cfg.mode == AcquisitionMode::ChoicepercPool {
        return choiceperc_pair(pool, ensemble, gamma, &skip);
    }

    let clustered = cfg.k > 1 && pool.k() > 1;
    if clustered {
        for _ in 0..CLUSTER_RETRIES {
            let pick = sample(rng, pool.k(), 2);
            let mut pair = [0usize; 2];
            let mut ok = true;
            for (slot, c) in pair.iter_mut().zip(pick.iter()) {
                match argmax_by(pool.cluster(c).iter().copied().filter(|&i| !skip[i]), |i| scorer.ucb(i, gamma)) {
                    Some((i, _)) => *slot = i,
                    None => ok = false,
                }
            }
            if ok && pair[0] != pair[1] && !pool.features().rows_equal(pair[0], pair[1]) {
                return Ok((pair[0], pair[1]));
            }
        }
    }
    global_top2(pool, &skip, |i| scorer.ucb(i, gamma))
}

/// Best candidate overall, then the best one with a different feature vector.
fn global_top2<F: FnMut(usize) -> f64>(pool: &ClusteredPool, skip: &[bool], mut score: F) -> Result<(usize, usize)> {
    let scores: Vec<Option<f64>> = (0..pool.len()).map(|i| (!skip[i]).then(|| score(i))).collect();
    let first = argmax_by((0..pool.len()).filter(|&i| scores[i].is_some()), |i| scores[i].unwrap())
        .ok_or(Error::DegeneratePool)?
        .0;
    let second = argmax_by(
        (0..pool.len()).filter(|&i| scores[i].is_some() && !pool.features().rows_equal(i, first)),
        |i| scores[i].unwrap(),
    )
    .ok_or(Error::DegeneratePool)?
    .0;
    Ok((first, second))
}

fn choiceperc_pair(pool: &ClusteredPool, ensemble: &Ensemble, gamma: f64, skip: &[bool]) -> Result<(usize, usize)> {
    let w = ensemble.mean_weights();
    let f = pool.features();
    let first = argmax_by((0..pool.len()).filter(|&i| !skip[i]), |i| f.utility(i, w.values()))
        .ok_or(Error::DegeneratePool)?
        .0;
    let anchor = f.row(first);
    let second = argmax_by(
        (0..pool.len()).filter(|&i| !skip[i] && !f.rows_equal(i, first)),
        |i| {
            let row = f.row(i);
            let l1: f64 = row.values().iter().zip(anchor.values()).map(|(a, b)| (a - b).abs()).sum();
            (1.0 - gamma) * f.utility(i, w.values()) + gamma * l1
        },
    )
    .ok_or(Error::DegeneratePool)?
    .0;
    Ok((first, second))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::FeatureMatrix;
    use crate::rng::RandomSource;
    use crate::selection::kmeans::DEFAULT_MAX_ITERS;
    use crate::types::{utility, WeightVector};
    use std::sync::Arc;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    fn ens(ws: &[&[f64]]) -> Ensemble {
        Ensemble::new(ws.iter().map(|w| WeightVector::new(w.to_vec()).unwrap()).collect()).unwrap()
    }

    fn random_pool(rng: &mut RandomSource, n: usize, dim: usize) -> Vec<FeatureVector> {
        (0..n).map(|_| fv(&(0..dim).map(|_| rng.random_range(-10.0..0.0)).collect::<Vec<_>>())).collect()
    }

    fn random_ensemble(rng: &mut RandomSource, m: usize, dim: usize) -> Ensemble {
        Ensemble::new(
            (0..m)
                .map(|_| WeightVector::new((0..dim).map(|_| rng.random_range(0.0..2.0)).collect()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn all_modes(k: usize) -> Vec<AcquisitionConfig> {
        [AcquisitionMode::Ucb, AcquisitionMode::MeanOnly, AcquisitionMode::VarianceOnly, AcquisitionMode::ChoicepercPool]
            .into_iter()
            .map(|mode| AcquisitionConfig { mode, k })
            .collect()
    }

    #[test]
    fn ucb_endpoints() {
        let e = ens(&[&[1.0, 0.0], &[3.0, 0.0]]);
        let phi = fv(&[1.0, 1.0]);
        assert_eq!(ucb_score(&e, &phi, 0.0).unwrap(), 2.0);
        assert_eq!(ucb_score(&e, &phi, 1.0).unwrap(), 1.0);
        assert_eq!(ucb_score(&e, &phi, 0.5).unwrap(), 1.5);
        assert!(ucb_score(&e, &phi, 1.5).is_err());
    }

    #[test]
    fn gamma_schedule_values() {
        assert_eq!(gamma_schedule(0), 1.0);
        assert_eq!(gamma_schedule(1), 1.0);
        assert_eq!(gamma_schedule(4), 0.25);
        let mean = AcquisitionConfig { mode: AcquisitionMode::MeanOnly, k: 0 };
        assert_eq!(mean.gamma(1), 0.0);
        let var = AcquisitionConfig { mode: AcquisitionMode::VarianceOnly, k: 0 };
        assert_eq!(var.gamma(50), 1.0);
    }

    #[test]
    fn two_candidate_pool_any_mode() {
        let m = Arc::new(FeatureMatrix::from_dense(2, &[fv(&[1.0, 0.0]), fv(&[0.0, 1.0])]).unwrap());
        let e = ens(&[&[1.0, 2.0], &[0.5, 0.1]]);
        for k in [0, 2] {
            let pool = ClusteredPool::build(Arc::clone(&m), k, &mut RandomSource::new(0, 0), DEFAULT_MAX_ITERS).unwrap();
            for cfg in all_modes(k) {
                let (a, b) = select_query(&pool, &e, &cfg, 1, &mut RandomSource::new(1, 1)).unwrap();
                let mut pair = [a, b];
                pair.sort();
                assert_eq!(pair, [0, 1], "{cfg:?}");
            }
        }
    }

    #[test]
    fn degenerate_pool_errors() {
        let m = Arc::new(FeatureMatrix::from_dense(2, &[fv(&[1.0, 0.0]), fv(&[1.0, 0.0])]).unwrap());
        let pool = ClusteredPool::unclustered(m);
        let e = ens(&[&[1.0, 2.0]]);
        for cfg in all_modes(0) {
            assert!(matches!(select_query(&pool, &e, &cfg, 1, &mut RandomSource::new(0, 0)), Err(Error::DegeneratePool)));
        }
    }

    #[test]
    fn zero_std_ties_fall_to_lowest_ids_with_distinct_features() {
        // All members equal: std is zero everywhere, so gamma = 1 scores tie.
        let rows = [fv(&[1.0, 1.0]), fv(&[1.0, 1.0]), fv(&[2.0, 0.0]), fv(&[0.0, 3.0])];
        let pool = ClusteredPool::unclustered(Arc::new(FeatureMatrix::from_dense(2, &rows).unwrap()));
        let e = ens(&[&[0.4, 0.6], &[0.4, 0.6], &[0.4, 0.6]]);
        let cfg = AcquisitionConfig { mode: AcquisitionMode::Ucb, k: 0 };
        let (a, b) = select_query(&pool, &e, &cfg, 1, &mut RandomSource::new(0, 0)).unwrap();
        assert_eq!((a, b), (0, 2));
        assert_ne!(rows[a], rows[b]);
    }

    #[test]
    fn choiceperc_gamma_one_maximizes_l1_distance() {
        let mut rng = RandomSource::new(40, 0);
        for _ in 0..10 {
            let rows = random_pool(&mut rng, 100, 5);
            let pool = ClusteredPool::unclustered(Arc::new(FeatureMatrix::from_dense(5, &rows).unwrap()));
            let e = random_ensemble(&mut rng, 7, 5);
            let cfg = AcquisitionConfig { mode: AcquisitionMode::ChoicepercPool, k: 0 };
            let (a, b) = select_query(&pool, &e, &cfg, 1, &mut rng).unwrap();
            // Oracle: linear scans with the mean weights computed independently.
            let mut mean = vec![0.0; 5];
            for w in e.members() {
                for j in 0..5 {
                    mean[j] += w.values()[j] / 7.0;
                }
            }
            let mw = WeightVector::new(mean).unwrap();
            let mut best_a = 0;
            for i in 1..100 {
                if utility(&mw, &rows[i]).unwrap() > utility(&mw, &rows[best_a]).unwrap() {
                    best_a = i;
                }
            }
            assert_eq!(a, best_a);
            let mut best_b = None::<(usize, f64)>;
            for i in 0..100 {
                if rows[i] == rows[a] {
                    continue;
                }
                let d = rows[i].l1_distance(&rows[a]).unwrap();
                if best_b.is_none_or(|(_, bd)| d > bd) {
                    best_b = Some((i, d));
                }
            }
            assert_eq!(b, best_b.unwrap().0);
        }
    }

    #[test]
    fn ucb_picks_are_cluster_argmaxes() {
        let mut rng = RandomSource::new(41, 0);
        let rows = random_pool(&mut rng, 600, 5);
        let pool = ClusteredPool::build(Arc::new(FeatureMatrix::from_dense(5, &rows).unwrap()), 5, &mut rng, DEFAULT_MAX_ITERS)
            .unwrap();
        assert_eq!(pool.k(), 5);
        let e = random_ensemble(&mut rng, 25, 5);
        for t in 1..30 {
            let cfg = AcquisitionConfig { mode: AcquisitionMode::Ucb, k: 5 };
            let (a, b) = select_query(&pool, &e, &cfg, t, &mut rng).unwrap();
            assert_ne!(rows[a], rows[b]);
            assert_ne!(pool.assignment()[a], pool.assignment()[b]);
            let gamma = gamma_schedule(t);
            for id in [a, b] {
                let c = pool.assignment()[id];
                let mine = ucb_score(&e, &rows[id], gamma).unwrap();
                for &other in pool.cluster(c) {
                    let s = ucb_score(&e, &rows[other], gamma).unwrap();
                    assert!(s < mine || (s == mine && other >= id) || (s - mine).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn excluded_candidates_are_skipped() {
        let rows = [fv(&[3.0]), fv(&[2.0]), fv(&[1.0]), fv(&[0.0])];
        let pool = ClusteredPool::unclustered(Arc::new(FeatureMatrix::from_dense(1, &rows).unwrap()));
        let e = ens(&[&[1.0]]);
        let cfg = AcquisitionConfig { mode: AcquisitionMode::MeanOnly, k: 0 };
        let mut rng = RandomSource::new(0, 0);
        assert_eq!(select_query(&pool, &e, &cfg, 3, &mut rng).unwrap(), (0, 1));
        assert_eq!(select_query_excluding(&pool, &e, &cfg, 3, &mut rng, &[0, 1]).unwrap(), (2, 3));
        assert!(select_query_excluding(&pool, &e, &cfg, 3, &mut rng, &[0, 1, 2]).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = RandomSource::new(42, 0);
        let rows = random_pool(&mut rng, 300, 5);
        let pool = ClusteredPool::build(Arc::new(FeatureMatrix::from_dense(5, &rows).unwrap()), 5, &mut rng, DEFAULT_MAX_ITERS)
            .unwrap();
        let e = random_ensemble(&mut rng, 25, 5);
        let cfg = AcquisitionConfig { mode: AcquisitionMode::Ucb, k: 5 };
        let a = select_query(&pool, &e, &cfg, 3, &mut RandomSource::new(9, 9)).unwrap();
        let b = select_query(&pool, &e, &cfg, 3, &mut RandomSource::new(9, 9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parse_modes() {
        assert_eq!("choiceperc-pool".parse::<AcquisitionMode>().unwrap(), AcquisitionMode::ChoicepercPool);
        assert_eq!("variance".parse::<AcquisitionMode>().unwrap(), AcquisitionMode::VarianceOnly);
        assert!("bogus".parse::<AcquisitionMode>().is_err());
    }
}
