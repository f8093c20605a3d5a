//! Simulation harness: an in-process cluster over a deterministic network,
//! Byzantine fault injection, post-hoc oracles and the experiment drivers.

pub mod accuracy;
pub mod bench;
pub mod config;
pub mod fuzz;
pub mod oracle;
pub mod sim;
pub mod trace_log;

pub use config::{Fault, FaultPlan, NodeFault, Scenario, SimConfig, WorkloadSpec};
pub use sim::{run, run_scenario, ScenarioRun};
pub use trace_log::{TraceLog, TraceRecord};
