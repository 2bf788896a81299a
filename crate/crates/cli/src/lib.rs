//! Scenario runner for the Lakat simulator.

pub mod dump;
pub mod runner;
pub mod scenario;

pub use runner::{run, RunReport};
pub use scenario::{parse_scenario, Scenario, ScenarioError};
