//! Configuration, the seeded parallel ensemble runner and file outputs.

pub mod config;
pub mod plotdata;
pub mod runner;

pub use config::SimConfig;
pub use runner::{execute, run, RunResult};

/// Exit statuses of `simulate`.
pub mod exit {
    pub const PASS: i32 = 0;
    pub const FAIL: i32 = 1;
    pub const INCONCLUSIVE: i32 = 2;
    pub const INVALID_CONFIG: i32 = 64;
    pub const IO_FAILURE: i32 = 74;
}
