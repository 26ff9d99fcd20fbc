//! Multi-task objective, staged training plans and the training loop.

mod loss;
mod plan;
mod trainer;

pub use loss::{total_loss, total_loss_graph, BranchLossVars, BranchLosses, LossWeights, RegionReduction};
pub use plan::{StageSpec, TrainPlan, CANONICAL_STAGES};
pub use trainer::{attribute_names, branch_losses, run_plan, train_stage, BranchPass, EpochRecord, TrainLog};
