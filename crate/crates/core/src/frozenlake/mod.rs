//! Grid-lake navigation with action-aligned experts.

pub mod env;
pub mod model;

pub use env::{
    bfs_plan, generate_maps, make_rollout, make_rollouts, render, split_maps, Action, Cell, LakeMap, Pos, Rollout,
};
pub use model::{
    evaluate_gate, evaluate_plans, train_planner, GateEval, LakeConfig, LakeLogRecord, LakeModel, LakeTrainConfig,
    Outcome, Plan, PlanReport,
};
