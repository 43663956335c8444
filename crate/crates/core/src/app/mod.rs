//! Command-line front end: configuration, command port and pipelines.

pub mod config;
pub mod listener;
pub mod pipeline;

pub use config::{Config, ConfigError, DeviceSpec, OUTPUT_ENV};
pub use listener::{CommandListener, ListenerError};
pub use pipeline::{
    measure_script, open_device, run_explore, run_measure, run_replay, EXIT_FATAL, EXIT_OK,
    EXIT_PARTIAL, EXIT_UNREACHABLE,
};
