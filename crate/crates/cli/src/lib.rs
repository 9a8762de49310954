//! Scenario runner for the `meanstop` command-line tool.

pub mod expr;
pub mod output;
pub mod run;
pub mod scenario;
