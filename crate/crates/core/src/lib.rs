//! Truthfulness dynamics on directed networks of language-model agents.

pub mod abm;
pub mod cli;
pub mod control;
pub mod error;
pub mod graph;
pub mod kernel;
pub mod meanfield;
pub mod ode;
pub mod reconfig;
pub mod seeds;
pub mod twoscale;

pub use error::{Error, Result};
