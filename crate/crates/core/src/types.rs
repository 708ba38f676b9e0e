//! Shared domain types and the utility arithmetic every other module builds on.
//!
//! Feature vectors are always stored in "higher is better" orientation, so a
//! utility `<w, phi>` is maximized everywhere. Minimization problems negate
//! their raw sub-objective sums before they reach this module.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Invalid(format!("{what} entry {i} is not finite"))),
        None => Ok(()),
    }
}

/// Sub-objective evaluation of one candidate in one context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("feature vector must be non-empty".into()));
        }
        ensure_finite(&values, "feature")?;
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn l1_distance(&self, other: &FeatureVector) -> Result<f64> {
        check_dim(self.dim(), other.dim())?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum())
    }
}

impl std::ops::Index<usize> for FeatureVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// One weight estimate `w`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("weight vector must be non-empty".into()));
        }
        ensure_finite(&values, "weight")?;
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// `m` independently initialized weight vectors; their spread measures
/// uncertainty about the decision maker's weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    members: Vec<WeightVector>,
}

impl Ensemble {
    pub fn new(members: Vec<WeightVector>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Invalid("ensemble needs at least one member".into()))?;
        let dim = first.dim();
        for m in &members {
            check_dim(dim, m.dim())?;
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[WeightVector] {
        &self.members
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn dim(&self) -> usize {
        self.members[0].dim()
    }

    /// Coordinate-wise mean of the members.
    pub fn mean_weights(&self) -> WeightVector {
        let m = self.size() as f64;
        let mut out = vec![0.0; self.dim()];
        for w in &self.members {
            for (o, v) in out.iter_mut().zip(w.values()) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m);
        WeightVector(out)
    }

    /// Coordinate-wise population standard deviation of the members.
    pub fn std_weights(&self) -> Vec<f64> {
        let mean = self.mean_weights();
        let m = self.size() as f64;
        let mut out = vec![0.0; self.dim()];
        for w in &self.members {
            for ((o, v), mu) in out.iter_mut().zip(w.values()).zip(mean.values()) {
                *o += (v - mu) * (v - mu);
            }
        }
        out.iter().map(|s| (s / m).sqrt()).collect()
    }
}

/// A decision maker's answer to a pairwise query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    /// Left (first) candidate preferred, `a = +1`.
    Left,
    /// Right (second) candidate preferred, `a = -1`.
    Right,
    /// No preference, `a = 0`.
    Indifferent,
}

impl Label {
    pub fn as_int(self) -> i8 {
        match self {
            Label::Left => 1,
            Label::Right => -1,
            Label::Indifferent => 0,
        }
    }

    pub fn from_int(a: i8) -> Result<Self> {
        match a {
            1 => Ok(Label::Left),
            -1 => Ok(Label::Right),
            0 => Ok(Label::Indifferent),
            other => Err(Error::Invalid(format!("label must be -1, 0 or 1, got {other}"))),
        }
    }

    pub fn is_strict(self) -> bool {
        self != Label::Indifferent
    }
}

/// One training datum: the context, the compared candidates and the answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceObservation {
    pub context_id: usize,
    pub left: usize,
    pub right: usize,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_time_ms: Option<f64>,
}

impl PreferenceObservation {
    pub fn new(context_id: usize, left: usize, right: usize, label: Label) -> Result<Self> {
        if left == right {
            return Err(Error::Invalid("observation compares a candidate with itself".into()));
        }
        Ok(Self { context_id, left, right, label, response_time_ms: None })
    }

    /// `(winner, loser)` for strict labels.
    pub fn ordered(&self) -> Option<(usize, usize)> {
        match self.label {
            Label::Left => Some((self.left, self.right)),
            Label::Right => Some((self.right, self.left)),
            Label::Indifferent => None,
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `u = <w, phi>`.
pub fn utility(w: &WeightVector, phi: &FeatureVector) -> Result<f64> {
    check_dim(w.dim(), phi.dim())?;
    Ok(dot(w.values(), phi.values()))
}

/// Elementwise `phi_plus - phi_minus`.
pub fn delta(phi_plus: &FeatureVector, phi_minus: &FeatureVector) -> Result<FeatureVector> {
    check_dim(phi_plus.dim(), phi_minus.dim())?;
    Ok(FeatureVector(
        phi_plus.0.iter().zip(&phi_minus.0).map(|(a, b)| a - b).collect(),
    ))
}

/// Mean and population standard deviation of member utilities (two-pass).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    // Shifted by the first value so identical inputs give exactly (x, 0).
    let m = values.len() as f64;
    let x0 = values[0];
    let shift = values.iter().map(|u| u - x0).sum::<f64>() / m;
    let var = values.iter().map(|u| (u - x0 - shift) * (u - x0 - shift)).sum::<f64>() / m;
    (x0 + shift, var.sqrt())
}

/// Ensemble mean and population std of `utility(W_i, phi)`.
pub fn ensemble_stats(ensemble: &Ensemble, phi: &FeatureVector) -> Result<(f64, f64)> {
    check_dim(ensemble.dim(), phi.dim())?;
    let us: Vec<f64> = ensemble
        .members
        .iter()
        .map(|w| dot(w.values(), phi.values()))
        .collect();
    Ok(mean_std(&us))
}
