//! Scenario runner, differential fuzzer and counters behind the `northcape` binary.

pub mod fuzz;
pub mod scenario;
pub mod stats;
