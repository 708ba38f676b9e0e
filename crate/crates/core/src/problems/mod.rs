//! Benchmark problems: PC configuration and prize-collecting TSP.

pub mod config;
pub mod held_karp;
pub mod pool;
pub mod tsp;

pub use config::{
    config_enumerate_feasible, config_features, config_sample_relaxed, CatalogSpec, ConfigAssignment,
    ConfigCatalog, Sampled,
};
pub use held_karp::{tsp_solve_exact, ExactConfig};
pub use pool::{pool_argmax, FeatureMatrix, PoolRecord, Structure};
pub use tsp::{tsp_features, tsp_generate_instance, tsp_is_feasible, tsp_sample_relaxed, Tour, TspGenConfig, TspInstance};

/// Seed of the bundled synthetic catalog (`data/catalog.json`).
pub const DEFAULT_CATALOG_SEED: u64 = 77;
