//! Capacity planning for two-tier LLM inference clusters.
//!
//! Tier-1 accelerators run the non-attention layers while Tier-2 nodes hold
//! the KV cache and run attention. The crate estimates memory, in-flight
//! batch counts and bandwidth in closed form, simulates the resulting
//! pipelines event by event, and searches node counts and batch sizes for
//! the best throughput or cost.

pub mod analytic;
pub mod cli;
pub mod des;
pub mod error;
pub mod model;
pub mod netmodel;
pub mod optimizer;
pub mod profiles;
pub mod units;

pub use error::{BindingConstraint, Error, Result};
pub use model::TransformerSpec;
pub use units::Nanos;
