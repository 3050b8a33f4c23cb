//! Library side of the `prpo` binary: the JSONL record format, the TOML
//! run configuration and the four subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod records;

pub use commands::{
    analyze_metrics, analyze_records, cmd_fuse, cmd_segment, cmd_train, ArmReport,
    CollapseSummary,
};
pub use config::RunConfig;
pub use error::{CliError, RecordError, Result};
pub use records::TrajectoryRecord;
