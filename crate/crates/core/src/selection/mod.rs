//! Query selection: clustering, acquisition scores, pair picking.

pub mod acquisition;
pub mod kmeans;

use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::RwLock;

pub use acquisition::{
    gamma_schedule, select_query, select_query_excluding, ucb_score, AcquisitionConfig, AcquisitionMode,
};
pub use kmeans::{kmeans_pp, ClusteredPool, DEFAULT_MAX_ITERS};

use crate::error::Result;

/// Per-context clustered pools, built on first use.
///
/// Readers share the lock; a miss builds outside the lock and the first
/// inserted value wins, so concurrent misses agree as long as `build` is
/// deterministic.
#[derive(Default)]
pub struct ClusterCache {
    inner: RwLock<HashMap<usize, Arc<ClusteredPool>>>,
}

impl ClusterCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_build<F>(&self, context: usize, build: F) -> Result<Arc<ClusteredPool>>
    where
        F: FnOnce() -> Result<ClusteredPool>,
    {
        if let Some(p) = self.inner.read().get(&context) {
            return Ok(Arc::clone(p));
        }
        let built = Arc::new(build()?);
        let mut w = self.inner.write();
        Ok(Arc::clone(w.entry(context).or_insert(built)))
    }

    pub fn len(&self) -> usize {
        self.inner.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
