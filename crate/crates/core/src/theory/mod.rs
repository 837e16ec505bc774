//! Exhaustive oracles over tiny enumerable worlds: masked-history conditioning,
//! the downstream visual score, mutual-information identities, the exact gain
//! decomposition and the gain lower bounds.

mod bounds;
mod sweep;
mod world;

pub use bounds::{
    check_assumptions, topk_modular_check, verify_gain_bounds, verify_set_lower_bound,
    AssumptionCheck, BoundCheck, GainBoundReport, SetBoundReport, DELTA_SEARCH_CLOUD,
};
pub use sweep::{random_world, run_sweep, SweepConfig, SweepRecord, SweepStatus, SweepSummary};
pub use world::{
    condition_masked, condition_masked_enumerated, delta_gain, mi_downstream, psi_score,
    verify_exact_decomposition, Intervention, MaskedHistory, Mutation, StepAnalysis, SuffixLaw,
    VisualState, WorldModel, IDENTITY_TOL, MAX_HORIZON, MAX_VISUAL, MAX_VOCAB,
};

use crate::dist::DistError;

/// Which regularity assumption an instance failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assumption {
    AbsoluteContinuity,
    BoundedRatio,
    GenericNonCoincidence,
}

impl std::fmt::Display for Assumption {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Assumption::AbsoluteContinuity => "absolute continuity",
            Assumption::BoundedRatio => "bounded log-ratio",
            Assumption::GenericNonCoincidence => "separated injective scores",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TheoryError {
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("invalid history: {0}")]
    InvalidHistory(String),
    #[error("conditioning event has zero probability")]
    ZeroProbabilityHistory,
    #[error("intervention puts mass on token {token} that the native law excludes for visual state {visual}")]
    AbsoluteContinuityViolation { visual: usize, token: usize },
    #[error("two evaluation routes disagree: {lhs} vs {rhs}")]
    PathDisagreement { lhs: f64, rhs: f64 },
    #[error("assumption violated: {0}")]
    AssumptionViolated(Assumption),
    #[error("top-k budget {k} exceeds {len} scores")]
    InvalidBudget { k: usize, len: usize },
    #[error("score {0} is negative or non-finite")]
    InvalidScore(f64),
    #[error(transparent)]
    Dist(#[from] DistError),
}
