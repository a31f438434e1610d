//! The residual-approximation distillation engine: model assembly, the
//! cascaded forward pass, the training objective and the training loops.

mod model;
mod train;

pub use model::{
    residual_targets, BranchFeed, EraModel, EraNet, ResidualState, ResidualTensors, TeacherModel,
    TeacherTopology, Topology,
};
pub use train::{
    distill, distill_epochs, era_objective, evaluate_losses, kd_fitnet_loss, teacher_accuracy,
    train_kd_fitnet, train_step, train_student_ce, train_teacher, EpochMetrics, KdFitnet,
    Objective, ObjectiveFn, StepMetrics, TeacherEpoch, TrainConfig,
};
