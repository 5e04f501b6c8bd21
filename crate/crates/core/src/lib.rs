//! Scheduling engine and cluster simulator for multi-replica LLM serving.
//!
//! The pipeline runs in three stages per time span:
//!
//! 1. [`workload`] clusters requests into types and forecasts per-type
//!    arrivals for the next span.
//! 2. [`deploysearch`] searches device partitions and (tp, pp) strategies,
//!    scoring each candidate with the max-flow assignment in [`flowassign`]
//!    over capacities from [`costmodel`].
//! 3. [`switchplan`] plans parameter transfers from the old deployment to the
//!    new one.
//!
//! [`sim`] replays a trace against the resulting timeline and [`pipeline`]
//! wires the stages together.

pub mod costmodel;
pub mod deploysearch;
pub mod error;
pub mod flowassign;
pub mod pipeline;
pub mod scenario;
pub mod sim;
pub mod switchplan;
pub mod types;
pub mod workload;

pub use error::{Error, Result};
pub use types::*;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    pub mod overview {}
    #[doc = include_str!("../../../book/src/cost-model.md")]
    pub mod cost_model {}
    #[doc = include_str!("../../../book/src/assignment.md")]
    pub mod assignment {}
    #[doc = include_str!("../../../book/src/deployment-search.md")]
    pub mod deployment_search {}
    #[doc = include_str!("../../../book/src/workload.md")]
    pub mod workload {}
    #[doc = include_str!("../../../book/src/switching.md")]
    pub mod switching {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    pub mod simulation {}
}
