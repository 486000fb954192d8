pub mod error;
pub mod model;

pub mod clock;
pub mod config;
pub mod embed;
pub mod evaluator;
pub mod profiling;
pub mod registry;
pub mod scoring;
pub mod trigger;

pub mod a2h;
pub mod batch;
pub mod hitl;
pub mod home;
pub mod memory;
pub mod mitigation;
pub mod pipeline;
#[cfg(feature = "remote")]
pub mod remote;
pub mod trace;

#[cfg(test)]
pub(crate) mod testutil;

pub use config::EngineConfig;
pub use error::{AuraError, Result};
pub use model::{ActionRecord, Decision, RiskProfile};
pub use pipeline::{AssessOptions, Assessment, Engine};
