//! The elicitation loop: problem setup, sessions, run manifests.

pub mod manifest;
pub mod session;
pub mod setup;

pub use manifest::RunManifest;
pub use session::{
    default_learning_rate, run_simulated, synthesize_with, AnswerSource, EvalRecord, LoopConfig, Query,
    SessionSnapshot, SessionState, SimulatedSource, SubmitOutcome, SynthesisReport, TimingRecord,
};
pub use setup::{PoolKind, PoolSpec, ProblemKind, ProblemParams, ProblemSetup, SolverKind, Synthesis};
