//! Command-line front end over the scenario registry.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};

use crate::config::{Resolved, ScenarioConfig};
use crate::scenario::{Registry, ScenarioError};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DOMAIN: u8 = 3;
pub const EXIT_SELFCHECK: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "trapvolt", version, about = "Ion-trap voltage source simulator")]
pub struct Args {
    /// Scenario to run; `list` prints the available names.
    pub scenario: String,
    /// TOML scenario file. Built-in defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

fn resolve(path: Option<&Path>) -> Result<Resolved, ScenarioError> {
    match path {
        None => Ok(Resolved::defaults()),
        Some(p) => {
            let cfg = ScenarioConfig::load(p)?;
            let base = p.parent().unwrap_or(Path::new("."));
            Ok(Resolved::new(cfg, base)?)
        }
    }
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> Result<(), ScenarioError> {
    let result = match out {
        Some(p) => fs::write(p, bytes),
        None => io::stdout().lock().write_all(bytes),
    };
    result.map_err(|e| ScenarioError::Output(e.to_string()))
}

/// Runs one scenario and returns the process exit status.
pub fn run(args: &Args) -> u8 {
    let registry = Registry::builtin();
    if args.scenario == "list" {
        let mut text = String::new();
        for s in registry.iter() {
            text.push_str(&format!("{}\t{}\n", s.name(), s.about()));
        }
        return match write_output(args.out.as_deref(), text.as_bytes()) {
            Ok(()) => EXIT_OK,
            Err(e) => report(&e),
        };
    }
    let Some(scenario) = registry.get(&args.scenario) else {
        eprintln!(
            "error: unknown scenario '{}' (available: {})",
            args.scenario,
            registry.names().join(", ")
        );
        return EXIT_CONFIG;
    };
    let outcome = resolve(args.config.as_deref())
        .and_then(|ctx| scenario.run(&ctx))
        .and_then(|o| {
            let bytes = o.table.to_csv()?;
            write_output(args.out.as_deref(), &bytes)?;
            Ok(o.passed)
        });
    match outcome {
        Ok(true) => EXIT_OK,
        Ok(false) => {
            eprintln!("error: {} reported failing checks", scenario.name());
            EXIT_SELFCHECK
        }
        Err(e) => report(&e),
    }
}

fn report(err: &ScenarioError) -> u8 {
    eprintln!("error: {err}");
    match err {
        ScenarioError::Config(_) => EXIT_CONFIG,
        ScenarioError::Domain { .. } | ScenarioError::Output(_) => EXIT_DOMAIN,
    }
}

pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Args::try_parse_from(args) {
        Ok(a) => run(&a),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_CONFIG
            } else {
                EXIT_OK
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(args: &[&str]) -> u8 {
        main_with_args(std::iter::once("trapvolt").chain(args.iter().copied()))
    }

    #[test]
    fn unknown_scenario_is_config_error() {
        assert_eq!(code(&["bogus"]), EXIT_CONFIG);
    }

    #[test]
    fn missing_config_file_is_config_error() {
        assert_eq!(
            code(&["heating", "--config", "/nonexistent/x.toml"]),
            EXIT_CONFIG
        );
    }

    #[test]
    fn writes_to_out_path() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("leak.csv");
        assert_eq!(
            code(&["leakage", "--out", out.to_str().unwrap()]),
            EXIT_OK
        );
        let text = fs::read_to_string(out).unwrap();
        assert!(text.starts_with("c_couple_f,"));
    }
}
