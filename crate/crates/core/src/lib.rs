pub mod algorithms;
pub mod api;
pub mod error;
pub mod ft;
pub mod graphio;
pub mod ops;
pub mod runtime;
pub mod storage;

pub use api::*;
pub use error::{Error, Result};
pub use ops::PlanConfig;
pub use runtime::{run_job, Engine, EngineConfig, JobReport, SuperstepStats, Termination};
