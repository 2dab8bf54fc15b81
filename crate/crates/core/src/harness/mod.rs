//! Scenario harness: bundled fixtures, scenario execution and reports.

pub mod fixtures;
pub mod report;
pub mod scenario;

pub use report::{diff_values, Report};
pub use scenario::{run_scenario, verify_exactly_once, HarnessError, ScenarioSpec};
