//! Command-line front end: experiment config, run directories and one
//! function per verb.

pub mod commands;
pub mod config;

use lesionkit::{Error, ErrorKind};

/// Process exit status for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Runtime => 4,
    }
}
