//! Pipeline front-end for the `infoq` binary: config parsing, stage
//! orchestration, reports and plot data.

pub mod config;
pub mod pipeline;
pub mod plot;
pub mod report;

use infoq_core::ErrorClass;

pub use config::{Budget, ConfigError, RunConfig};
pub use pipeline::Workspace;
pub use report::Report;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_DEGENERATE: i32 = 4;

/// Maps the first recognized cause in the chain to an exit status.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<infoq_core::Error>() {
            return match e.class() {
                ErrorClass::Infeasible => EXIT_INFEASIBLE,
                ErrorClass::Degenerate => EXIT_DEGENERATE,
                ErrorClass::Input | ErrorClass::Io => EXIT_OTHER,
            };
        }
    }
    EXIT_OTHER
}
