//! File formats, clocks, reports and the command-line driver around
//! [`sortsimul_core`].

pub mod analyze;
pub mod cli;
pub mod clock;
pub mod config;
pub mod io;
pub mod report;

pub use sortsimul_core as core;
