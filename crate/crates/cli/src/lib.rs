//! Batch runner for annealing bound experiments: JSON configs in, CSV and
//! JSON reports out.

pub mod config;
pub mod runner;
pub mod selftest;
