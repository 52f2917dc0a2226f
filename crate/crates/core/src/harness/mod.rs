//! Benchmark tasks, scripted experts, dataset generation and ablation runners.

mod ablation;
mod experts;
mod tasks;

pub use ablation::{
    pooled, run_ablation, verdicts, Ablation, AblationGrid, AblationReport, CellResult,
    CheckpointDir, PolicySource, TrainOnDemand, Variant, Verdict, TWIN_HUNT, TWIN_HUNT_MINE,
};
pub use experts::{
    act_for, audit, expert_episode, generate_dataset, DatasetAudit, Expert, GenConfig, TaskAudit,
};
pub use tasks::{
    task, task_names, tasks, training_tasks, Category, Completion, StepTemplate, TargetDesc,
    TaskSpec,
};
