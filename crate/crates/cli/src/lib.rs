//! `ecgalign` command-line interface. Results go to stdout as JSON, logs to
//! stderr. Exit codes: 0 success, 1 domain error, 2 usage error.

mod commands;
mod config;

use clap::{CommandFactory, Parser};

pub use commands::{Cli, Command};
pub use config::CONFIG_ENV;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub fn run(argv: Vec<String>) -> i32 {
    let argv = match config::expand(argv, &Cli::command()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("ECGALIGN_LOG")
        .target(env_logger::Target::Stderr)
        .try_init();
    match commands::execute(&cli) {
        Ok(value) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&value).expect("JSON output")
            );
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_DOMAIN
        }
    }
}
