//! Command-line companion to `caffnet-core`: trains the scenarios, runs the
//! property suites, inspects single systems and exports plot bundles.

pub mod cli;
pub mod config;
pub mod error;
pub mod export;
pub mod formats;
pub mod inspect;
pub mod manifest;
pub mod runs;
pub mod verify;

pub use error::{exit, CliError, CliResult};

/// Writes to stdout. A closed pipe ends the process quietly with success.
pub fn emit(args: std::fmt::Arguments) {
    use std::io::Write;
    if let Err(e) = std::io::stdout().lock().write_fmt(args) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(exit::OK);
        }
        panic!("failed writing to stdout: {e}");
    }
}

/// `println!` through [`emit`].
#[macro_export]
macro_rules! say {
    ($($arg:tt)*) => {
        $crate::emit(format_args!("{}\n", format_args!($($arg)*)))
    };
}
