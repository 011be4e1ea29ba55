//! Library half of the `seda` binary: the config file schema and the
//! command implementations. Kept separate from `main.rs` so both unit tests
//! and the integration suite can drive commands without spawning processes.

pub mod commands;
pub mod config;
