pub mod engine;
pub mod job;
pub mod plan;

pub use engine::{
    apply_mutations, evaluate_termination, read_gs, two_stage_aggregate, write_gs, Engine,
    EngineConfig, GsRecord, MutationEffect, Partition, StampedMutation, SuperstepStats,
};
pub use job::{drive, prepare_job, run_job, JobReport, Termination};
pub use plan::{generate_plan, Flow, Operator, PartitionMap, PhysicalPlan, PlanEdge};
