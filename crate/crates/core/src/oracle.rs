//! Simulated decision makers and evaluation metrics.
//!
//! A simulated DM answers with a Bradley-Terry model extended by a hard
//! indifference margin. `beta` and `eps_ind` are stated on a normalized
//! utility scale where the DM's utility range over the pool spans
//! [`UTILITY_SPAN`]; [`SimulatedDM::calibrated`] converts them to absolute
//! values for one context.

use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Dirichlet, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learning::sigmoid;
use crate::types::{utility, FeatureVector, Label, WeightVector};

/// Span of the normalized utility scale.
pub const UTILITY_SPAN: f64 = 100.0;
/// Guard for relative-regret denominators and numerators.
pub const REGRET_GUARD: f64 = 1e-12;
pub const CONFIG_WEIGHT_MEAN: f64 = 25.0;
pub const CONFIG_WEIGHT_STD: f64 = 25.0 / 3.0;
pub const CONFIG_KEEP_FRACTION: f64 = 0.2;
pub const DIRICHLET_CONCENTRATION: f64 = 100.0;

/// Response-noise defaults on the normalized scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub beta: f64,
    /// Indifference margin, here 1% of the span.
    pub eps_ind: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { beta: 1.0, eps_ind: 0.01 * UTILITY_SPAN }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatedDM {
    pub id: usize,
    pub w_true: WeightVector,
    pub beta: f64,
    pub eps_ind: f64,
    /// Seed of this DM's response stream.
    pub seed: u64,
}

impl SimulatedDM {
    pub fn new(id: usize, w_true: WeightVector, noise: NoiseConfig, seed: u64) -> Result<Self> {
        let dm = Self { id, w_true, beta: noise.beta, eps_ind: noise.eps_ind, seed };
        dm.validate()?;
        Ok(dm)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Invalid("beta must be positive".into()));
        }
        if !(self.eps_ind.is_finite() && self.eps_ind >= 0.0) {
            return Err(Error::Invalid("eps_ind must be non-negative".into()));
        }
        Ok(())
    }

    pub fn utility(&self, phi: &FeatureVector) -> Result<f64> {
        utility(&self.w_true, phi)
    }

    /// Absolute-scale copy for a context whose pool utilities span `range`.
    /// A zero range leaves the parameters unscaled.
    pub fn calibrated(&self, range: f64) -> Self {
        let mut dm = self.clone();
        if range.is_finite() && range > 0.0 {
            let s = UTILITY_SPAN / range;
            dm.beta = self.beta * s;
            dm.eps_ind = self.eps_ind / s;
        }
        dm
    }
}

/// Config-task DM: `n` weights from `N(25, (25/3)^2)`, then all but a random
/// `ceil(0.2 n)` of them zeroed.
pub fn sample_dm_config<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Result<WeightVector> {
    if n == 0 {
        return Err(Error::Invalid("dimension must be positive".into()));
    }
    let normal = Normal::new(CONFIG_WEIGHT_MEAN, CONFIG_WEIGHT_STD).expect("valid normal");
    let keep = ((CONFIG_KEEP_FRACTION * n as f64).ceil() as usize).clamp(1, n);
    loop {
        let raw: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        let mut w = vec![0.0; n];
        for i in sample(rng, n, keep).iter() {
            w[i] = raw[i];
        }
        if w.iter().any(|&x| x != 0.0) {
            return WeightVector::new(w);
        }
    }
}

/// PC-TSP DM: symmetric Dirichlet(100) over the five sub-objectives.
pub fn sample_dm_tsp<R: Rng + ?Sized>(rng: &mut R) -> Result<WeightVector> {
    let d = Dirichlet::new([DIRICHLET_CONCENTRATION; 5]).expect("valid concentration");
    WeightVector::new(d.sample(rng).to_vec())
}

/// Label for the pair `(phi1, phi2)`: indifferent inside the margin, else
/// `Left` with probability `sigmoid(beta * d)`.
pub fn respond<R: Rng + ?Sized>(
    dm: &SimulatedDM,
    phi1: &FeatureVector,
    phi2: &FeatureVector,
    rng: &mut R,
) -> Result<Label> {
    let d = dm.utility(phi1)? - dm.utility(phi2)?;
    Ok(respond_to_gap(dm, d, rng))
}

pub(crate) fn respond_to_gap<R: Rng + ?Sized>(dm: &SimulatedDM, d: f64, rng: &mut R) -> Label {
    if d.abs() < dm.eps_ind {
        return Label::Indifferent;
    }
    if rng.random::<f64>() < sigmoid(dm.beta * d) {
        Label::Left
    } else {
        Label::Right
    }
}

/// `(u* - u_hat) / |u*|`: relative regret on the cost scale when utilities are
/// negated costs, on the utility scale otherwise.
pub fn relative_regret(u_star_opt: f64, u_hat: f64) -> Result<f64> {
    let num = u_star_opt - u_hat;
    let den = u_star_opt.abs();
    if num < -1e-9 * den.max(1.0) {
        return Err(Error::Invalid(format!(
            "synthesized utility {u_hat} exceeds the optimum {u_star_opt}"
        )));
    }
    let num = num.max(0.0);
    if den < REGRET_GUARD {
        if num < REGRET_GUARD {
            return Ok(0.0);
        }
        return Err(Error::DegenerateRegret { optimum: u_star_opt, gap: num });
    }
    Ok(num / den)
}

/// Indifferent between the synthesized solution and the optimum.
pub fn dm_satisfied(dm: &SimulatedDM, u_star_opt: f64, u_hat: f64) -> bool {
    (u_star_opt - u_hat).abs() < dm.eps_ind
}

/// 1-based position of the first value below `threshold`.
pub fn queries_to_threshold(curve: &[f64], threshold: f64) -> Option<usize> {
    curve.iter().position(|&r| r < threshold).map(|i| i + 1)
}

/// Like [`queries_to_threshold`] for a curve sampled at `(iteration, regret)`
/// points; returns the iteration.
pub fn queries_to_threshold_at(points: &[(usize, f64)], threshold: f64) -> Option<usize> {
    points.iter().find(|&&(_, r)| r < threshold).map(|&(t, _)| t)
}

pub fn write_roster<W: Write>(out: W, dms: &[SimulatedDM]) -> Result<()> {
    serde_json::to_writer_pretty(out, dms)?;
    Ok(())
}

pub fn read_roster<R: Read>(input: R) -> Result<Vec<SimulatedDM>> {
    let dms: Vec<SimulatedDM> = serde_json::from_reader(input)?;
    for dm in &dms {
        dm.validate()?;
    }
    Ok(dms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomSource;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    fn dm(w: &[f64], beta: f64, eps: f64) -> SimulatedDM {
        SimulatedDM { id: 0, w_true: WeightVector::new(w.to_vec()).unwrap(), beta, eps_ind: eps, seed: 0 }
    }

    #[test]
    fn tsp_weights_on_simplex() {
        let mut rng = RandomSource::new(1, 0);
        let n = 10_000;
        let mut inside = 0;
        for _ in 0..n {
            let w = sample_dm_tsp(&mut rng).unwrap();
            let s: f64 = w.values().iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
            assert!(w.values().iter().all(|&x| x > 0.0));
            if w.values().iter().all(|&x| (x - 0.2).abs() <= 0.15) {
                inside += 1;
            }
        }
        assert!(inside as f64 >= 0.99 * n as f64);
    }

    #[test]
    fn config_weights_sparse() {
        let mut rng = RandomSource::new(2, 0);
        for n in [1, 4, 5, 10, 78] {
            for _ in 0..50 {
                let w = sample_dm_config(&mut rng, n).unwrap();
                let nz = w.values().iter().filter(|&&x| x != 0.0).count();
                assert_eq!(nz, (0.2 * n as f64).ceil() as usize);
            }
        }
        // Kept weights follow N(25, 25/3).
        let kept: Vec<f64> = (0..2000)
            .flat_map(|_| sample_dm_config(&mut rng, 10).unwrap().into_inner())
            .filter(|&x| x != 0.0)
            .collect();
        let mean = kept.iter().sum::<f64>() / kept.len() as f64;
        let sd = (kept.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / kept.len() as f64).sqrt();
        assert!((mean - 25.0).abs() < 0.5, "{mean}");
        assert!((sd - 25.0 / 3.0).abs() < 0.4, "{sd}");
    }

    #[test]
    fn respond_examples() {
        let mut rng = RandomSource::new(3, 0);
        let phi = fv(&[1.0, 2.0]);
        assert_eq!(respond(&dm(&[1.0, 1.0], 1.0, 0.1), &phi, &phi, &mut rng).unwrap(), Label::Indifferent);

        let n = 10_000;
        let fair = dm(&[1.0, 1.0], 1.0, 0.0);
        let lefts = (0..n).filter(|_| respond(&fair, &phi, &phi, &mut rng).unwrap() == Label::Left).count();
        assert!((lefts as f64 / n as f64 - 0.5).abs() < 0.02);

        let sharp = dm(&[1.0, 0.0], 1e6, 0.1);
        let lefts = (0..n)
            .filter(|_| respond(&sharp, &fv(&[1.0, 0.0]), &fv(&[0.5, 0.0]), &mut rng).unwrap() == Label::Left)
            .count();
        assert_eq!(lefts, n);

        let bt = dm(&[1.0, 0.0], 1.0, 0.0);
        let d = 3f64.ln();
        let lefts = (0..n)
            .filter(|_| respond(&bt, &fv(&[d, 0.0]), &fv(&[0.0, 0.0]), &mut rng).unwrap() == Label::Left)
            .count();
        assert!((lefts as f64 / n as f64 - 0.75).abs() < 0.02);
    }

    #[test]
    fn respond_is_antisymmetric_in_distribution() {
        let m = dm(&[0.7, -0.2], 2.0, 0.05);
        let (a, b) = (fv(&[1.0, 0.3]), fv(&[0.8, 0.1]));
        let n = 20_000;
        let mut rng = RandomSource::new(4, 0);
        let ab = (0..n).filter(|_| respond(&m, &a, &b, &mut rng).unwrap() == Label::Left).count();
        let ba = (0..n).filter(|_| respond(&m, &b, &a, &mut rng).unwrap() == Label::Right).count();
        let p = 1.0 / (1.0 + (-2.0f64 * 0.10).exp());
        for c in [ab, ba] {
            assert!((c as f64 / n as f64 - p).abs() < 0.015);
        }
    }

    #[test]
    fn calibration_scales_margin_and_rationality() {
        let base = dm(&[1.0], 1.0, 1.0);
        let c = base.calibrated(50.0);
        assert_eq!(c.eps_ind, 0.5);
        assert_eq!(c.beta, 2.0);
        assert_eq!(base.calibrated(0.0), base);
    }

    #[test]
    fn regret_examples() {
        assert_eq!(relative_regret(-10.0, -10.0).unwrap(), 0.0);
        assert!((relative_regret(-10.0, -11.0).unwrap() - 0.10).abs() < 1e-15);
        assert!((relative_regret(40.0, 30.0).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(relative_regret(0.0, 0.0).unwrap(), 0.0);
        assert!(matches!(relative_regret(0.0, -1.0), Err(Error::DegenerateRegret { .. })));
        assert!(relative_regret(1.0, 2.0).is_err());
    }

    #[test]
    fn satisfaction_boundary_and_consistency() {
        let m = dm(&[1.0, 0.0], 1.0, 0.5);
        assert!(dm_satisfied(&m, 3.0, 3.0));
        assert!(!dm_satisfied(&m, 3.0, 2.0));
        let mut rng = RandomSource::new(5, 0);
        for gap in [0.0, 0.1, 0.49] {
            assert!(dm_satisfied(&m, 3.0, 3.0 - gap));
            for _ in 0..100 {
                let l = respond(&m, &fv(&[3.0 - gap, 0.0]), &fv(&[3.0, 0.0]), &mut rng).unwrap();
                assert_eq!(l, Label::Indifferent);
            }
        }
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(queries_to_threshold(&[0.5, 0.2, 0.09, 0.3], 0.10), Some(3));
        assert_eq!(queries_to_threshold(&[0.5, 0.1, 0.2], 0.10), None);
        assert_eq!(queries_to_threshold_at(&[(10, 0.3), (20, 0.05)], 0.10), Some(20));
        let mut rng = RandomSource::new(6, 0);
        for _ in 0..50 {
            let curve: Vec<f64> = (0..100).map(|_| rng.random_range(0.05..0.6)).collect();
            let mut oracle = None;
            for (i, &r) in curve.iter().enumerate() {
                if r < 0.10 {
                    oracle = Some(i + 1);
                    break;
                }
            }
            assert_eq!(queries_to_threshold(&curve, 0.10), oracle);
        }
    }

    #[test]
    fn roster_round_trip() {
        let dms = vec![dm(&[0.2, 0.8], 1.0, 1.0), dm(&[0.0, 25.5], 1.0, 1.0)];
        let mut buf = Vec::new();
        write_roster(&mut buf, &dms).unwrap();
        assert_eq!(read_roster(&buf[..]).unwrap(), dms);
        assert!(read_roster(&br#"[{"id":0,"w_true":[1.0],"beta":0.0,"eps_ind":1.0,"seed":0}]"#[..]).is_err());
    }
}
