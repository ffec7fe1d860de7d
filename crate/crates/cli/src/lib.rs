//! Config-driven experiment runner for the `mixamp` library: parameter sweeps
//! with state-evolution overlays, sparse-prior heatmaps and EM-AMP traces.

pub mod config;
pub mod labels;
pub mod output;
pub mod run;
pub mod selfcheck;

pub use config::RunConfig;
pub use run::{execute, Command, Outcome};
