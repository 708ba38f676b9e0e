//! k-means with k-means++ seeding on sub-objective vectors.

use std::collections::HashSet;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};
use crate::problems::FeatureMatrix;
use crate::types::FeatureVector;

pub const DEFAULT_MAX_ITERS: usize = 100;

/// A pool evaluated in one context, partitioned into non-empty clusters.
#[derive(Clone, Debug)]
pub struct ClusteredPool {
    features: Arc<FeatureMatrix>,
    assignment: Vec<usize>,
    centroids: Vec<FeatureVector>,
    clusters: Vec<Vec<usize>>,
}

impl ClusteredPool {
    /// The whole pool as one cluster (clustering disabled).
    pub fn unclustered(features: Arc<FeatureMatrix>) -> Self {
        let n = features.len();
        let centroid = if n > 0 { mean_of(&features, 0..n) } else { FeatureVector::zeros(features.dim()) };
        Self {
            assignment: vec![0; n],
            centroids: vec![centroid],
            clusters: vec![(0..n).collect()],
            features,
        }
    }

    /// Clusters `features` with k-means++ (`k == 0` disables clustering).
    pub fn build<R: Rng + ?Sized>(features: Arc<FeatureMatrix>, k: usize, rng: &mut R, max_iters: usize) -> Result<Self> {
        if k <= 1 || features.len() < 2 {
            return Ok(Self::unclustered(features));
        }
        let rows: Vec<Vec<f64>> = (0..features.len()).map(|i| features.row(i).into_inner()).collect();
        let (assignment, centroids) = lloyd(&rows, k, rng, max_iters)?;
        Ok(Self::from_parts(features, assignment, centroids))
    }

    fn from_parts(features: Arc<FeatureMatrix>, assignment: Vec<usize>, centroids: Vec<Vec<f64>>) -> Self {
        let k = centroids.len();
        let mut clusters = vec![Vec::new(); k];
        for (i, &c) in assignment.iter().enumerate() {
            clusters[c].push(i);
        }
        let centroids = centroids
            .into_iter()
            .map(|c| FeatureVector::new(c).expect("centroids of finite points are finite"))
            .collect();
        Self { features, assignment, centroids, clusters }
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    pub fn shared_features(&self) -> Arc<FeatureMatrix> {
        Arc::clone(&self.features)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn centroids(&self) -> &[FeatureVector] {
        &self.centroids
    }

    /// Candidate ids of cluster `c`, ascending.
    pub fn cluster(&self, c: usize) -> &[usize] {
        &self.clusters[c]
    }
}

fn mean_of(features: &FeatureMatrix, rows: std::ops::Range<usize>) -> FeatureVector {
    let mut acc = vec![0.0; features.dim()];
    let n = rows.len() as f64;
    for i in rows {
        let (idx, val) = features.row_sparse(i);
        for (&j, &x) in idx.iter().zip(val) {
            acc[j as usize] += x;
        }
    }
    acc.iter_mut().for_each(|a| *a /= n);
    FeatureVector::new(acc).expect("finite mean")
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(p, cen);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// k-means++ seeding. Stops early when every point coincides with a chosen
/// centroid, so at most `#distinct points` centroids come back.
fn seed_plus_plus<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let sum: f64 = d2.iter().sum();
        if !(sum > 0.0) {
            break;
        }
        let pick = WeightedIndex::new(&d2)
            .map_err(|e| Error::Invalid(format!("k-means++ weights: {e}")))?
            .sample(rng);
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    Ok(centroids)
}

fn lloyd<R: Rng + ?Sized>(
    points: &[Vec<f64>],
    k: usize,
    rng: &mut R,
    max_iters: usize,
) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let dim = points[0].len();
    let mut centroids = seed_plus_plus(points, k, rng)?;
    let mut assignment: Vec<usize> = vec![usize::MAX; points.len()];
    for iter in 0..max_iters.max(1) {
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        let stable = next == assignment;
        assignment = next;
        if stable || iter + 1 == max_iters.max(1) {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (p, &c) in points.iter().zip(&assignment) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }
        for (c, (s, n)) in sums.into_iter().zip(counts).enumerate() {
            if n > 0 {
                centroids[c] = s.into_iter().map(|x| x / n as f64).collect();
            }
        }
    }
    // Drop empty clusters and renumber.
    let used: HashSet<usize> = assignment.iter().copied().collect();
    let mut remap = vec![usize::MAX; centroids.len()];
    let mut kept = Vec::new();
    for (c, cen) in centroids.into_iter().enumerate() {
        if used.contains(&c) {
            remap[c] = kept.len();
            kept.push(cen);
        }
    }
    let assignment = assignment.into_iter().map(|c| remap[c]).collect();
    Ok((assignment, kept))
}

/// Standalone k-means++ over a list of feature vectors.
pub fn kmeans_pp<R: Rng + ?Sized>(
    features: &[FeatureVector],
    k: usize,
    rng: &mut R,
    max_iters: usize,
) -> Result<ClusteredPool> {
    if features.is_empty() {
        return Err(Error::Invalid("cannot cluster an empty list".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    let dim = features[0].dim();
    let matrix = Arc::new(FeatureMatrix::from_dense(dim, features)?);
    if k == 1 {
        return Ok(ClusteredPool::unclustered(matrix));
    }
    let rows: Vec<Vec<f64>> = features.iter().map(|f| f.values().to_vec()).collect();
    let (assignment, centroids) = lloyd(&rows, k, rng, max_iters)?;
    Ok(ClusteredPool::from_parts(matrix, assignment, centroids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomSource;
    use rand_distr::Normal;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    fn check_invariants(p: &ClusteredPool) {
        let k = p.k();
        assert!(k >= 1);
        for c in 0..k {
            assert!(!p.cluster(c).is_empty());
        }
        for i in 0..p.len() {
            let row = p.features().row(i);
            let cents: Vec<Vec<f64>> = p.centroids().iter().map(|c| c.values().to_vec()).collect();
            assert_eq!(nearest(row.values(), &cents), p.assignment()[i]);
        }
    }

    #[test]
    fn distinct_points_each_own_cluster() {
        let pts: Vec<FeatureVector> = (0..6).map(|i| fv(&[i as f64 * 3.0, (i * i) as f64])).collect();
        let p = kmeans_pp(&pts, 6, &mut RandomSource::new(1, 0), DEFAULT_MAX_ITERS).unwrap();
        assert_eq!(p.k(), 6);
        for c in 0..6 {
            assert_eq!(p.cluster(c).len(), 1);
            let i = p.cluster(c)[0];
            assert_eq!(p.centroids()[c], pts[i]);
        }
        check_invariants(&p);
    }

    #[test]
    fn identical_points_single_cluster() {
        let pts = vec![fv(&[1.0, 2.0]); 40];
        let p = kmeans_pp(&pts, 5, &mut RandomSource::new(2, 0), DEFAULT_MAX_ITERS).unwrap();
        assert_eq!(p.k(), 1);
        check_invariants(&p);
    }

    #[test]
    fn more_clusters_than_distinct_points() {
        let pts = vec![fv(&[0.0]), fv(&[0.0]), fv(&[5.0]), fv(&[5.0]), fv(&[9.0])];
        let p = kmeans_pp(&pts, 4, &mut RandomSource::new(3, 0), DEFAULT_MAX_ITERS).unwrap();
        assert_eq!(p.k(), 3);
        check_invariants(&p);
    }

    #[test]
    fn errors() {
        assert!(kmeans_pp(&[], 2, &mut RandomSource::new(0, 0), 10).is_err());
        assert!(kmeans_pp(&[fv(&[1.0])], 0, &mut RandomSource::new(0, 0), 10).is_err());
    }

    #[test]
    fn recovers_separated_blobs() {
        let centers = [[0.0, 0.0, 0.0], [10.0, -6.0, 4.0]];
        for seed in 0..20 {
            let mut rng = RandomSource::new(seed, 9);
            let noise = Normal::new(0.0, 1.0).unwrap();
            let mut pts = Vec::new();
            let mut truth = Vec::new();
            for i in 0..400 {
                let b = i % 2;
                pts.push(fv(&centers[b].map(|c| c + noise.sample(&mut rng))));
                truth.push(b);
            }
            let p = kmeans_pp(&pts, 2, &mut rng, DEFAULT_MAX_ITERS).unwrap();
            check_invariants(&p);
            // Labels are arbitrary; align cluster 0 with whichever blob it mostly holds.
            let agree = (0..pts.len()).filter(|&i| p.assignment()[i] == truth[i]).count();
            let best = agree.max(pts.len() - agree);
            assert!(best as f64 >= 0.99 * pts.len() as f64, "seed {seed}: {best}");
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = RandomSource::new(4, 0);
        let pts: Vec<FeatureVector> = (0..300).map(|_| fv(&[rng.random(), rng.random(), rng.random()])).collect();
        let a = kmeans_pp(&pts, 5, &mut RandomSource::new(8, 1), DEFAULT_MAX_ITERS).unwrap();
        let b = kmeans_pp(&pts, 5, &mut RandomSource::new(8, 1), DEFAULT_MAX_ITERS).unwrap();
        assert_eq!(a.assignment(), b.assignment());
        check_invariants(&a);
    }
}
