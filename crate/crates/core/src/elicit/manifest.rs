//! Run manifests: everything needed to replay a benchmark run.

use serde::{Deserialize, Serialize};

use crate::elicit::session::LoopConfig;
use crate::elicit::setup::{sha256_hex, ProblemKind, ProblemParams, SetupHashes};
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// Fixed policies that are not configurable but affect results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policies {
    pub batch_shuffle: String,
    pub indifference: String,
    pub schedule: String,
    pub satisfaction: String,
}

impl Default for Policies {
    fn default() -> Self {
        Self {
            batch_shuffle: "reshuffle per (member, epoch); final short batch kept; batch-mean gradient".into(),
            indifference: "re-query with fresh clusters excluding shown candidates; iteration ends after the retry cap"
                .into(),
            schedule: "seeded shuffle of the training instances, visited round-robin".into(),
            satisfaction: "dm satisfied when satisfied on at least half of the test instances at the final step".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub problem: ProblemKind,
    pub problem_params: ProblemParams,
    pub loop_config: LoopConfig,
    pub seed: u64,
    pub dms: usize,
    #[serde(default)]
    pub policies: Policies,
    /// Hashes of the generated inputs; filled in once the setup is built.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hashes: Option<SetupHashes>,
}

impl RunManifest {
    pub fn new(problem: ProblemKind, problem_params: ProblemParams, loop_config: LoopConfig, seed: u64, dms: usize) -> Self {
        Self {
            format_version: MANIFEST_FORMAT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            problem,
            problem_params,
            loop_config,
            seed,
            dms,
            policies: Policies::default(),
            hashes: None,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::FormatVersion(m.format_version));
        }
        m.loop_config.validate(m.problem)?;
        if m.dms == 0 {
            return Err(Error::Invalid("dms must be at least 1".into()));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the compact JSON form.
    pub fn sha256(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_hash_stability() {
        let p = ProblemParams::default();
        let m = RunManifest::new(ProblemKind::Pctsp, p.clone(), LoopConfig::defaults_for(ProblemKind::Pctsp, &p), 7, 20);
        let back = RunManifest::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.sha256().unwrap(), m.sha256().unwrap());
        let mut other = m.clone();
        other.seed = 8;
        assert_ne!(other.sha256().unwrap(), m.sha256().unwrap());
        let mut bad = m;
        bad.format_version = 9;
        assert!(matches!(RunManifest::from_json(&bad.to_json().unwrap()), Err(Error::FormatVersion(9))));
    }
}
