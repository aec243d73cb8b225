//! Configuration, the per-verb commands and the end-to-end driver.

mod commands;
mod config;
mod demo;

pub use commands::*;
pub use config::*;
pub use demo::*;
