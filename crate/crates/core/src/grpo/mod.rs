//! Group-relative policy optimization over intent-conditioned rollouts.

pub mod group;
pub mod train;

pub use group::{
    build_group, clipped_term, grpo_loss, k3, normalize_advantages, Composition, GroupSpec, GrpoConfig, GrpoLoss, LossStats,
    RolloutGroup, StdMode,
};
pub use train::{build_batch, train_rl, DiversitySummary, FileSink, MemorySink, MetricsRecord, RlSchedule, RlSink, RlSummary};
