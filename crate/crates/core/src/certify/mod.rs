//! Empirical certificate risks and the joint training loop over the barrier
//! network, the Lyapunov-like network and the policy.

mod optim;
mod risk;
mod train;

pub use optim::{Moments, OptimizerConfig, OptimizerKind};
pub use risk::{
    barrier_risk, barrier_terms, lyapunov_risk, lyapunov_terms, risk_and_grad, total_risk, Aggregation, BarrierTerms,
    BatchSizes, Batches, LyapunovTerms, RiskConfig, RiskGrad, RiskValue,
};
pub use train::{
    train, train_with, ModelSpec, PolicyInit, ProblemSets, RiskRecord, StopReason, TrainConfig, TrainOutcome,
    TrainState, DIVERGENCE_LIMIT,
};
