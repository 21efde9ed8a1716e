//! Support library of the `circuitsynth` binary.

pub mod config;

pub use config::{Config, ConfigError, DEFAULT_FILE};
