//! Batch workflow around the `lkshape` library: landmark CSV ingestion,
//! run configuration, and JSON/CSV reports.

pub mod commands;
pub mod config;
pub mod io;

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "LKSHAPE_THREADS";

/// Exit status for an error: 2 for bad input or configuration, 3 for
/// numerical failures.
pub fn exit_code(e: &lkshape::Error) -> i32 {
    if e.is_input_error() {
        2
    } else {
        3
    }
}
