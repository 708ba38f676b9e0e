//! PC configuration task: one option per component, Boolean "option chosen"
//! sub-objectives plus a normalized price.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{FeatureVector, WeightVector};

pub const CATALOG_FORMAT_VERSION: u32 = 1;
/// Default cap on the Cartesian product size accepted by enumeration.
pub const DEFAULT_ENUMERATION_CAP: u128 = 10_000_000;

const DEFAULT_CATALOG_JSON: &str = include_str!("../../data/catalog.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigOption {
    pub name: String,
    pub price: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub name: String,
    pub options: Vec<ConfigOption>,
}

/// `(component, option)` reference.
pub type OptionRef = (usize, usize);

/// Two options that may not be chosen together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ForbiddenPair(pub OptionRef, pub OptionRef);

impl ForbiddenPair {
    fn violated_by(&self, choice: &[usize]) -> bool {
        choice[self.0 .0] == self.0 .1 && choice[self.1 .0] == self.1 .1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigCatalog {
    pub format_version: u32,
    pub components: Vec<Component>,
    pub constraints: Vec<ForbiddenPair>,
    /// Number of Boolean sub-objectives, i.e. total option count.
    pub boolean_features: usize,
    /// Largest total price over all (not necessarily feasible) assignments.
    pub price_max: f64,
    #[serde(skip)]
    offsets: Vec<usize>,
}

/// One option index per component.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConfigAssignment {
    pub choice: Vec<usize>,
}

impl ConfigAssignment {
    pub fn new(choice: Vec<usize>) -> Self {
        Self { choice }
    }
}

/// Parameters of the synthetic catalog generator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CatalogSpec {
    pub components: Vec<(String, usize, f64, f64)>,
    pub forbidden_pairs: usize,
}

impl Default for CatalogSpec {
    /// Seven components whose option counts sum to 77, with log-uniform
    /// prices in a per-component range.
    fn default() -> Self {
        let c = |n: &str, k, lo, hi| (n.to_string(), k, lo, hi);
        Self {
            components: vec![
                c("cpu", 50, 80.0, 900.0),
                c("memory", 12, 20.0, 400.0),
                c("storage", 5, 30.0, 500.0),
                c("gpu", 4, 50.0, 1200.0),
                c("display", 2, 100.0, 600.0),
                c("os", 2, 1.0, 150.0),
                c("warranty", 2, 10.0, 200.0),
            ],
            forbidden_pairs: 15,
        }
    }
}

impl ConfigCatalog {
    pub fn new(components: Vec<Component>, constraints: Vec<ForbiddenPair>) -> Result<Self> {
        let boolean_features = components.iter().map(|c| c.options.len()).sum();
        let price_max = components
            .iter()
            .map(|c| c.options.iter().map(|o| o.price).fold(f64::NEG_INFINITY, f64::max))
            .sum();
        let mut cat = Self {
            format_version: CATALOG_FORMAT_VERSION,
            components,
            constraints,
            boolean_features,
            price_max,
            offsets: Vec::new(),
        };
        cat.validate()?;
        Ok(cat)
    }

    /// The synthetic catalog shipped with the crate.
    pub fn default_catalog() -> Self {
        Self::from_json(DEFAULT_CATALOG_JSON).expect("bundled catalog is valid")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut cat: Self = serde_json::from_str(s)?;
        cat.validate()?;
        Ok(cat)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn validate(&mut self) -> Result<()> {
        if self.format_version != CATALOG_FORMAT_VERSION {
            return Err(Error::FormatVersion(self.format_version));
        }
        if self.components.is_empty() {
            return Err(Error::Invalid("catalog has no components".into()));
        }
        let mut offsets = Vec::with_capacity(self.components.len());
        let mut total = 0;
        for c in &self.components {
            if c.options.is_empty() {
                return Err(Error::Invalid(format!("component {} has no options", c.name)));
            }
            if c.options.iter().any(|o| !(o.price.is_finite() && o.price >= 0.0)) {
                return Err(Error::Invalid(format!("component {} has an invalid price", c.name)));
            }
            offsets.push(total);
            total += c.options.len();
        }
        if total != self.boolean_features {
            return Err(Error::Invalid(format!(
                "declared {} Boolean features but catalog has {total} options",
                self.boolean_features
            )));
        }
        for p in &self.constraints {
            for &(c, o) in [&p.0, &p.1] {
                if c >= self.components.len() || o >= self.components[c].options.len() {
                    return Err(Error::Invalid(format!("forbidden pair references ({c}, {o})")));
                }
            }
            if p.0 .0 == p.1 .0 {
                return Err(Error::Invalid("forbidden pair within one component".into()));
            }
        }
        if !(self.price_max.is_finite() && self.price_max > 0.0) {
            return Err(Error::Invalid("price_max must be positive".into()));
        }
        self.offsets = offsets;
        Ok(())
    }

    /// Generates a random catalog following `spec`.
    pub fn synthetic<R: Rng + ?Sized>(spec: &CatalogSpec, rng: &mut R) -> Result<Self> {
        let components: Vec<Component> = spec
            .components
            .iter()
            .map(|(name, k, lo, hi)| Component {
                name: name.clone(),
                options: (0..*k)
                    .map(|i| {
                        let u: f64 = rng.random();
                        let price = (lo.ln() + u * (hi.ln() - lo.ln())).exp();
                        ConfigOption {
                            name: format!("{name}-{:02}", i + 1),
                            price: (price * 100.0).round() / 100.0,
                        }
                    })
                    .collect(),
            })
            .collect();
        let nc = components.len();
        let mut seen = HashSet::new();
        let mut constraints = Vec::new();
        let mut attempts = 0;
        while constraints.len() < spec.forbidden_pairs && nc >= 2 && attempts < 10_000 {
            attempts += 1;
            let pick = sample(rng, nc, 2);
            let (mut a, mut b) = (pick.index(0), pick.index(1));
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            let oa = rng.random_range(0..components[a].options.len());
            let ob = rng.random_range(0..components[b].options.len());
            let pair = ForbiddenPair((a, oa), (b, ob));
            if seen.insert(pair) {
                constraints.push(pair);
            }
        }
        Self::new(components, constraints)
    }

    pub fn component_count(&self) -> usize {
        self.components.len()
    }

    /// Feature dimension: one Boolean per option plus the price entry.
    pub fn feature_dim(&self) -> usize {
        self.boolean_features + 1
    }

    pub fn option_offset(&self, component: usize) -> usize {
        self.offsets[component]
    }

    /// Number of assignments in the unconstrained Cartesian product.
    pub fn product_size(&self) -> u128 {
        self.components.iter().map(|c| c.options.len() as u128).product()
    }

    pub fn check_shape(&self, y: &ConfigAssignment) -> Result<()> {
        if y.choice.len() != self.components.len() {
            return Err(Error::Invalid(format!(
                "assignment has {} choices for {} components",
                y.choice.len(),
                self.components.len()
            )));
        }
        for (c, &o) in y.choice.iter().enumerate() {
            if o >= self.components[c].options.len() {
                return Err(Error::Invalid(format!("component {c} has no option {o}")));
            }
        }
        Ok(())
    }

    pub fn total_price(&self, y: &ConfigAssignment) -> f64 {
        y.choice
            .iter()
            .enumerate()
            .map(|(c, &o)| self.components[c].options[o].price)
            .sum()
    }

    pub fn is_feasible(&self, y: &ConfigAssignment) -> bool {
        !self.constraints.iter().any(|p| p.violated_by(&y.choice))
    }

    /// `<w, config_features(y)>` without materializing the feature vector.
    pub fn utility(&self, w: &WeightVector, y: &ConfigAssignment) -> f64 {
        let w = w.values();
        let chosen: f64 = y
            .choice
            .iter()
            .enumerate()
            .map(|(c, &o)| w[self.offsets[c] + o])
            .sum();
        chosen + w[self.boolean_features] * -(self.total_price(y) / self.price_max)
    }

    /// Non-zero feature entries of `y` as `(index, value)`, ascending.
    pub(crate) fn sparse_features(&self, y: &ConfigAssignment) -> Vec<(u32, f64)> {
        let mut out: Vec<(u32, f64)> = y
            .choice
            .iter()
            .enumerate()
            .map(|(c, &o)| ((self.offsets[c] + o) as u32, 1.0))
            .collect();
        let price = -(self.total_price(y) / self.price_max);
        if price != 0.0 {
            out.push((self.boolean_features as u32, price));
        }
        out
    }
}

/// One-hot option indicators followed by `-(total price / price_max)`.
pub fn config_features(catalog: &ConfigCatalog, y: &ConfigAssignment) -> Result<FeatureVector> {
    catalog.check_shape(y)?;
    let mut v = vec![0.0; catalog.feature_dim()];
    for (i, x) in catalog.sparse_features(y) {
        v[i as usize] = x;
    }
    FeatureVector::new(v)
}

/// All assignments violating no forbidden pair, in lexicographic order.
pub fn config_enumerate_feasible(catalog: &ConfigCatalog, cap: u128) -> Result<Vec<ConfigAssignment>> {
    let count = catalog.product_size();
    if count > cap {
        return Err(Error::CapExceeded { count, cap });
    }
    // Constraints indexed by the later component so a partial assignment can
    // be checked as soon as both ends are fixed.
    let nc = catalog.component_count();
    let mut closing: Vec<Vec<ForbiddenPair>> = vec![Vec::new(); nc];
    for p in &catalog.constraints {
        let (a, b) = if p.0 .0 < p.1 .0 { (p.0, p.1) } else { (p.1, p.0) };
        closing[b.0].push(ForbiddenPair(a, b));
    }
    let mut out = Vec::new();
    let mut choice = vec![0usize; nc];
    enumerate_rec(catalog, &closing, 0, &mut choice, &mut out);
    Ok(out)
}

fn enumerate_rec(
    catalog: &ConfigCatalog,
    closing: &[Vec<ForbiddenPair>],
    depth: usize,
    choice: &mut Vec<usize>,
    out: &mut Vec<ConfigAssignment>,
) {
    if depth == choice.len() {
        out.push(ConfigAssignment::new(choice.clone()));
        return;
    }
    for o in 0..catalog.components[depth].options.len() {
        choice[depth] = o;
        if closing[depth].iter().any(|p| p.violated_by(choice)) {
            continue;
        }
        enumerate_rec(catalog, closing, depth + 1, choice, out);
    }
}

/// Result of a relaxed sampler that deduplicates under a retry budget.
#[derive(Clone, Debug)]
pub struct Sampled<T> {
    pub items: Vec<T>,
    /// Set when the retry budget ran out before `count` distinct items.
    pub exhausted: bool,
}

pub(crate) fn retry_budget(count: usize) -> usize {
    count.saturating_mul(20).saturating_add(1000)
}

/// `count` distinct assignments with every option drawn uniformly; constraints
/// are ignored.
pub fn config_sample_relaxed<R: Rng + ?Sized>(
    catalog: &ConfigCatalog,
    rng: &mut R,
    count: usize,
) -> Result<Sampled<ConfigAssignment>> {
    if count == 0 {
        return Err(Error::Invalid("count must be at least 1".into()));
    }
    let radices: Vec<usize> = catalog.components.iter().map(|c| c.options.len()).collect();
    // Mixed-radix code of an assignment, when the product fits in a u128.
    let fits = radices.iter().try_fold(1u128, |acc, &r| acc.checked_mul(r as u128)).is_some();
    let mut codes = HashSet::with_capacity(if fits { count } else { 0 });
    let mut seen = HashSet::with_capacity(if fits { 0 } else { count });
    let mut items = Vec::with_capacity(count);
    let budget = retry_budget(count);
    let mut draws = 0;
    let mut choice = vec![0; radices.len()];
    while items.len() < count && draws < budget {
        draws += 1;
        for (c, &r) in choice.iter_mut().zip(&radices) {
            *c = rng.random_range(0..r);
        }
        let fresh = if fits {
            codes.insert(choice.iter().zip(&radices).fold(0u128, |acc, (&c, &r)| acc * r as u128 + c as u128))
        } else {
            seen.insert(choice.clone())
        };
        if fresh {
            items.push(ConfigAssignment::new(choice.clone()));
        }
    }
    let exhausted = items.len() < count;
    if exhausted {
        log::warn!("relaxed config sampler found only {} of {count} distinct assignments", items.len());
    }
    Ok(Sampled { items, exhausted })
}
