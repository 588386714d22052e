//! Command-line driver and benchmarks for the cspnet stack.

pub mod bench;
pub mod cli;
pub mod config;
