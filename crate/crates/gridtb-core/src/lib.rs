//! Deterministic discrete-event simulator of a multi-site data-grid
//! testbed: brokered job submission over a hierarchical information
//! service, storage elements with partition-blind replica placement, a
//! GRAM-like gatekeeper with its shared-cache i-node economics, fault
//! injection on named random streams, declarative node configuration, and
//! a staged release-promotion state machine.
//!
//! For a fixed (scenario, seed) pair the full event trace and the canonical
//! report are byte-identical across runs and platforms.

pub mod broker;
pub mod compute;
pub mod engine;
pub mod fabric;
pub mod faults;
pub mod identity;
pub mod infosys;
pub mod jdl;
pub mod release;
pub mod report;
pub mod rng;
pub mod scenario;
pub mod sim;
pub mod storage;

pub use engine::{run, RunError, RunOptions, RunOutput};
pub use report::Report;
pub use scenario::{Scenario, SchemaError};
