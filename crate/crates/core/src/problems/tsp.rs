//! Prize-collecting TSP instances, tours and their sub-objectives.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::config::{retry_budget, Sampled};
use crate::types::FeatureVector;

pub const TSP_FORMAT_VERSION: u32 = 1;
/// Edge-value channels: distance, duration, fuel, familiarity.
pub const CHANNELS: usize = 4;
pub const TSP_FEATURES: usize = CHANNELS + 1;
pub const NORMALIZED_MAX: f64 = 10.0;

pub const SUB_OBJECTIVE_NAMES: [&str; TSP_FEATURES] =
    ["distance", "duration", "fuel", "familiarity", "penalty"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TspInstance {
    pub format_version: u32,
    pub node_count: usize,
    pub coords: Vec<[f64; 2]>,
    /// `edge_values[l][i][j]`: channel `l` of directed edge `i -> j`.
    pub edge_values: Vec<Vec<Vec<f64>>>,
    pub prizes: Vec<f64>,
    pub penalties: Vec<f64>,
    pub prize_quota: f64,
}

/// Generator parameters for random instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TspGenConfig {
    /// Prize quota as a fraction of the total prize.
    pub quota_fraction: f64,
    /// Log-space standard deviation of the duration and fuel factors.
    pub duration_sigma: f64,
    pub fuel_sigma: f64,
}

impl Default for TspGenConfig {
    fn default() -> Self {
        Self { quota_fraction: 0.5, duration_sigma: 0.3, fuel_sigma: 0.5 }
    }
}

/// A (sub)circuit starting at the depot; it closes back to node 0 implicitly.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tour {
    pub visit_order: Vec<usize>,
}

impl Tour {
    pub fn new(visit_order: Vec<usize>) -> Self {
        Self { visit_order }
    }

    pub fn depot_only() -> Self {
        Self { visit_order: vec![0] }
    }

    /// Directed edges of the closed circuit; empty for the depot-only tour.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.visit_order.len();
        let count = if n > 1 { n } else { 0 };
        (0..count).map(move |i| (self.visit_order[i], self.visit_order[(i + 1) % n]))
    }

    pub fn visited_mask(&self, node_count: usize) -> Vec<bool> {
        let mut v = vec![false; node_count];
        for &i in &self.visit_order {
            v[i] = true;
        }
        v
    }
}

impl TspInstance {
    pub fn from_json(s: &str) -> Result<Self> {
        let inst: Self = serde_json::from_str(s)?;
        inst.validate()?;
        Ok(inst)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != TSP_FORMAT_VERSION {
            return Err(Error::FormatVersion(self.format_version));
        }
        let v = self.node_count;
        if v < 2 {
            return Err(Error::Invalid("node_count must be at least 2".into()));
        }
        if self.coords.len() != v || self.prizes.len() != v || self.penalties.len() != v {
            return Err(Error::Invalid("per-node arrays must have node_count entries".into()));
        }
        if self.edge_values.len() != CHANNELS
            || self.edge_values.iter().any(|m| m.len() != v || m.iter().any(|r| r.len() != v))
        {
            return Err(Error::Invalid(format!("edge_values must be {CHANNELS} x {v} x {v}")));
        }
        for m in &self.edge_values {
            for (i, row) in m.iter().enumerate() {
                if row[i] != 0.0 {
                    return Err(Error::Invalid("self-edges must be zero".into()));
                }
                if row.iter().any(|x| !(0.0..=NORMALIZED_MAX).contains(x)) {
                    return Err(Error::Invalid("edge value outside [0, 10]".into()));
                }
            }
        }
        if self.prizes.iter().chain(&self.penalties).any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Invalid("prizes and penalties must be non-negative".into()));
        }
        if self.prizes[0] != 0.0 || self.penalties[0] != 0.0 {
            return Err(Error::Invalid("depot prize and penalty must be zero".into()));
        }
        if !(self.prize_quota >= 0.0 && self.prize_quota <= self.total_prize()) {
            return Err(Error::Invalid("prize_quota must lie in [0, total prize]".into()));
        }
        Ok(())
    }

    pub fn total_prize(&self) -> f64 {
        self.prizes.iter().sum()
    }

    /// Rescales every column of every channel so its largest entry is 10.
    pub fn normalize(&mut self) {
        for m in &mut self.edge_values {
            normalize_columns(m);
        }
    }

    pub fn check_tour(&self, tour: &Tour) -> Result<()> {
        let order = &tour.visit_order;
        if order.first() != Some(&0) {
            return Err(Error::Invalid("tour must start at the depot".into()));
        }
        let mut seen = vec![false; self.node_count];
        for &i in order {
            if i >= self.node_count {
                return Err(Error::Invalid(format!("node {i} out of range")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Invalid(format!("node {i} visited twice")));
            }
        }
        Ok(())
    }

    /// Unnegated sub-objective totals: edge channel sums and skipped penalty.
    pub fn raw_objectives(&self, tour: &Tour) -> [f64; TSP_FEATURES] {
        let mut out = [0.0; TSP_FEATURES];
        for (i, j) in tour.edges() {
            for l in 0..CHANNELS {
                out[l] += self.edge_values[l][i][j];
            }
        }
        let visited = tour.visited_mask(self.node_count);
        out[CHANNELS] = (0..self.node_count).filter(|&i| !visited[i]).map(|i| self.penalties[i]).sum();
        out
    }

    /// Prize collected by a set of visited nodes, summed in ascending node order.
    pub(crate) fn prize_of_mask(&self, visited: &[bool]) -> f64 {
        visited
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(|(i, _)| self.prizes[i])
            .sum()
    }
}

fn normalize_columns(m: &mut [Vec<f64>]) {
    let v = m.len();
    for j in 0..v {
        let max = (0..v).map(|i| m[i][j]).fold(0.0, f64::max);
        if max > 0.0 {
            let s = NORMALIZED_MAX / max;
            for row in m.iter_mut() {
                row[j] *= s;
            }
            // Pin the maximum exactly; scaling can land one ulp off.
            for row in m.iter_mut() {
                if row[j] > NORMALIZED_MAX {
                    row[j] = NORMALIZED_MAX;
                }
            }
            if let Some(i) = (0..v).max_by(|&a, &b| m[a][j].total_cmp(&m[b][j])) {
                m[i][j] = NORMALIZED_MAX;
            }
        }
    }
}

/// Random instance: uniform coordinates, Euclidean distance, distance-correlated
/// duration and fuel channels, an independent familiarity channel.
pub fn tsp_generate_instance<R: Rng + ?Sized>(
    node_count: usize,
    rng: &mut R,
    config: &TspGenConfig,
) -> Result<TspInstance> {
    if node_count < 2 {
        return Err(Error::Invalid("node_count must be at least 2".into()));
    }
    if !(0.0..=1.0).contains(&config.quota_fraction) {
        return Err(Error::Invalid("quota_fraction must lie in [0, 1]".into()));
    }
    let v = node_count;
    let coords: Vec<[f64; 2]> = (0..v).map(|_| [rng.random(), rng.random()]).collect();
    let duration = LogNormal::new(0.0, config.duration_sigma)
        .map_err(|e| Error::Invalid(format!("duration_sigma: {e}")))?;
    let fuel = LogNormal::new(0.0, config.fuel_sigma).map_err(|e| Error::Invalid(format!("fuel_sigma: {e}")))?;
    let mut channels = vec![vec![vec![0.0; v]; v]; CHANNELS];
    for i in 0..v {
        for j in 0..v {
            if i == j {
                continue;
            }
            let d = ((coords[i][0] - coords[j][0]).powi(2) + (coords[i][1] - coords[j][1]).powi(2)).sqrt();
            channels[0][i][j] = d;
            channels[1][i][j] = d * duration.sample(rng);
            channels[2][i][j] = d * fuel.sample(rng);
            channels[3][i][j] = rng.random::<f64>();
        }
    }
    let mut prizes: Vec<f64> = (0..v).map(|_| rng.random()).collect();
    let mut penalties: Vec<f64> = (0..v).map(|_| rng.random()).collect();
    prizes[0] = 0.0;
    penalties[0] = 0.0;
    let total: f64 = prizes.iter().sum();
    let mut inst = TspInstance {
        format_version: TSP_FORMAT_VERSION,
        node_count: v,
        coords,
        edge_values: channels,
        prizes,
        penalties,
        prize_quota: config.quota_fraction * total,
    };
    inst.normalize();
    inst.validate()?;
    Ok(inst)
}

/// `[-sum v_1, .., -sum v_4, -sum skipped penalties]`.
pub fn tsp_features(inst: &TspInstance, tour: &Tour) -> Result<FeatureVector> {
    inst.check_tour(tour)?;
    FeatureVector::new(inst.raw_objectives(tour).iter().map(|x| -x).collect())
}

/// True iff the visited nodes collect at least the prize quota.
pub fn tsp_is_feasible(inst: &TspInstance, tour: &Tour) -> bool {
    inst.prize_of_mask(&tour.visited_mask(inst.node_count)) >= inst.prize_quota
}

/// Random sub-circuits: a uniform permutation of all nodes truncated where
/// the depot appears. Distinct tours only; the prize quota is not enforced.
pub fn tsp_sample_relaxed<R: Rng + ?Sized>(
    inst: &TspInstance,
    rng: &mut R,
    count: usize,
) -> Result<Sampled<Tour>> {
    sample_subcircuits(inst.node_count, rng, count)
}

pub(crate) fn sample_subcircuits<R: Rng + ?Sized>(
    node_count: usize,
    rng: &mut R,
    count: usize,
) -> Result<Sampled<Tour>> {
    sample_subcircuits_where(node_count, rng, count, |_| true)
}

/// Distinct sub-circuits accepted by `keep`, under the same retry budget.
pub(crate) fn sample_subcircuits_where<R: Rng + ?Sized>(
    node_count: usize,
    rng: &mut R,
    count: usize,
    keep: impl Fn(&Tour) -> bool,
) -> Result<Sampled<Tour>> {
    if count == 0 {
        return Err(Error::Invalid("count must be at least 1".into()));
    }
    let mut perm: Vec<usize> = (0..node_count).collect();
    let mut seen = HashSet::with_capacity(count);
    let mut items = Vec::with_capacity(count);
    let budget = retry_budget(count);
    let mut draws = 0;
    while items.len() < count && draws < budget {
        draws += 1;
        perm.shuffle(rng);
        let cut = perm.iter().position(|&x| x == 0).expect("depot in permutation");
        let mut order = Vec::with_capacity(cut + 1);
        order.push(0);
        order.extend_from_slice(&perm[..cut]);
        let tour = Tour::new(order);
        if keep(&tour) && seen.insert(tour.clone()) {
            items.push(tour);
        }
    }
    let exhausted = items.len() < count;
    if exhausted {
        log::warn!("relaxed tour sampler found only {} of {count} distinct tours", items.len());
    }
    Ok(Sampled { items, exhausted })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomSource;
    use crate::types::{utility, WeightVector};

    fn instance(v: usize, seed: u64) -> TspInstance {
        tsp_generate_instance(v, &mut RandomSource::new(seed, 0), &TspGenConfig::default()).unwrap()
    }

    #[test]
    fn channels_normalized_to_ten() {
        for seed in 0..10 {
            let inst = instance(2 + seed as usize, seed);
            for m in &inst.edge_values {
                let max = m.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
                assert!((max - 10.0).abs() <= 1e-9);
                for (i, row) in m.iter().enumerate() {
                    assert_eq!(row[i], 0.0);
                    assert!(row.iter().all(|x| (0.0..=10.0).contains(x)));
                }
            }
            assert!(inst.prize_quota <= inst.total_prize());
        }
    }

    #[test]
    fn normalization_is_idempotent() {
        let inst = instance(9, 4);
        let mut again = inst.clone();
        again.normalize();
        assert_eq!(inst, again);
    }

    #[test]
    fn two_node_instance_has_one_real_tour() {
        let inst = instance(2, 1);
        let mut rng = RandomSource::new(1, 1);
        let s = tsp_sample_relaxed(&inst, &mut rng, 50).unwrap();
        let mut tours: Vec<Vec<usize>> = s.items.into_iter().map(|t| t.visit_order).collect();
        tours.sort();
        assert_eq!(tours, vec![vec![0], vec![0, 1]]);
        assert!(s.exhausted);
    }

    #[test]
    fn same_seed_same_instance() {
        let a = instance(12, 77);
        let b = instance(12, 77);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_ne!(a, instance(12, 78));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let inst = instance(6, 2);
        assert_eq!(TspInstance::from_json(&inst.to_json().unwrap()).unwrap(), inst);
        let mut bad = inst.clone();
        bad.format_version = 9;
        assert!(matches!(TspInstance::from_json(&bad.to_json().unwrap()), Err(Error::FormatVersion(9))));
        let mut bad = inst.clone();
        bad.prize_quota = bad.total_prize() + 1.0;
        assert!(bad.validate().is_err());
        let mut bad = inst;
        bad.edge_values[2][1][3] = 11.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn feature_edge_cases() {
        let inst = instance(7, 3);
        let all = Tour::new((0..7).collect());
        assert_eq!(tsp_features(&inst, &all).unwrap()[4], 0.0);
        let depot = tsp_features(&inst, &Tour::depot_only()).unwrap();
        assert_eq!(&depot.values()[..4], &[0.0; 4]);
        let total_pen: f64 = inst.penalties.iter().sum();
        assert!((depot[4] + total_pen).abs() < 1e-12);
        assert!(tsp_features(&inst, &Tour::new(vec![1, 0])).is_err());
        assert!(tsp_features(&inst, &Tour::new(vec![0, 3, 3])).is_err());
        assert!(tsp_features(&inst, &Tour::new(vec![0, 9])).is_err());
    }

    #[test]
    fn features_match_naive_summation() {
        let mut rng = RandomSource::new(8, 0);
        for seed in 0..30 {
            let inst = instance(6, seed);
            let tour = tsp_sample_relaxed(&inst, &mut rng, 1).unwrap().items.remove(0);
            let f = tsp_features(&inst, &tour).unwrap();
            let order = &tour.visit_order;
            for l in 0..CHANNELS {
                let mut s = 0.0;
                if order.len() > 1 {
                    for k in 0..order.len() - 1 {
                        s += inst.edge_values[l][order[k]][order[k + 1]];
                    }
                    s += inst.edge_values[l][*order.last().unwrap()][order[0]];
                }
                assert!((f[l] + s).abs() < 1e-12);
            }
            let mut pen = 0.0;
            for i in 0..inst.node_count {
                if !order.contains(&i) {
                    pen += inst.penalties[i];
                }
            }
            assert!((f[4] + pen).abs() < 1e-12);
        }
    }

    #[test]
    fn utility_is_negated_min_objective() {
        // Direct evaluation of the minimization objective over edge and node
        // indicators, compared with -utility for non-negative weights.
        let mut rng = RandomSource::new(21, 0);
        for seed in 0..20 {
            let inst = instance(8, 100 + seed);
            let w = WeightVector::new((0..5).map(|_| rng.random_range(0.0..2.0)).collect()).unwrap();
            for tour in tsp_sample_relaxed(&inst, &mut rng, 10).unwrap().items {
                let v = inst.node_count;
                let mut y = vec![vec![0.0; v]; v];
                for (i, j) in tour.edges() {
                    y[i][j] = 1.0;
                }
                let sigma: Vec<f64> = (0..v).map(|i| if tour.visit_order.contains(&i) { 1.0 } else { 0.0 }).collect();
                let mut obj = 0.0;
                for l in 0..CHANNELS {
                    let mut s = 0.0;
                    for i in 0..v {
                        for j in 0..v {
                            s += inst.edge_values[l][i][j] * y[i][j];
                        }
                    }
                    obj += w.values()[l] * s;
                }
                obj += w.values()[4] * (0..v).map(|i| inst.penalties[i] * (1.0 - sigma[i])).sum::<f64>();
                let u = utility(&w, &tsp_features(&inst, &tour).unwrap()).unwrap();
                assert!((u + obj).abs() <= 1e-9 * obj.abs().max(1.0));
            }
        }
    }

    #[test]
    fn feasibility() {
        let mut rng = RandomSource::new(5, 5);
        for seed in 0..20 {
            let inst = instance(8, seed);
            assert!(tsp_is_feasible(&inst, &Tour::new((0..8).collect())));
            assert!(inst.prize_quota > 0.0);
            assert!(!tsp_is_feasible(&inst, &Tour::depot_only()));
            for t in tsp_sample_relaxed(&inst, &mut rng, 20).unwrap().items {
                let collected: f64 = t.visit_order.iter().map(|&i| inst.prizes[i]).sum();
                let expected = collected >= inst.prize_quota;
                // Summation order differs from the implementation; only assert
                // away from the boundary.
                if (collected - inst.prize_quota).abs() > 1e-12 {
                    assert_eq!(tsp_is_feasible(&inst, &t), expected);
                }
            }
        }
    }

    #[test]
    fn sampled_tours_are_valid_subcircuits() {
        let inst = instance(10, 6);
        let s = tsp_sample_relaxed(&inst, &mut RandomSource::new(6, 0), 2000).unwrap();
        assert_eq!(s.items.len(), 2000);
        assert!(!s.exhausted);
        let uniq: HashSet<_> = s.items.iter().collect();
        assert_eq!(uniq.len(), 2000);
        for t in &s.items {
            inst.check_tour(t).unwrap();
        }
    }

    #[test]
    fn truncation_length_distribution() {
        // Length L = position of the depot + 1 in a uniform permutation.
        // Compare the sampler (without dedup) against direct permutation
        // sampling and the uniform 1/V law.
        let v = 6;
        let n = 100_000;
        let mut rng = RandomSource::new(12, 0);
        let mut sampler_counts = vec![0usize; v + 1];
        let mut direct_counts = vec![0usize; v + 1];
        let mut perm: Vec<usize> = (0..v).collect();
        for _ in 0..n {
            // One-at-a-time draws so duplicates are kept.
            let t = sample_subcircuits(v, &mut rng, 1).unwrap().items.remove(0);
            sampler_counts[t.visit_order.len()] += 1;
            perm.shuffle(&mut rng);
            direct_counts[perm.iter().position(|&x| x == 0).unwrap() + 1] += 1;
        }
        let p = 1.0 / v as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for len in 1..=v {
            let e = n as f64 * p;
            assert!((sampler_counts[len] as f64 - e).abs() < 4.0 * sigma);
            assert!((sampler_counts[len] as f64 - direct_counts[len] as f64).abs() < 6.0 * sigma);
        }
    }
}
