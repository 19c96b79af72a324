//! Named scenarios, selected at runtime.
//!
//! Each CLI subcommand is a [`Scenario`] trait object held in a
//! [`Registry`]. Scenarios are pure functions of the resolved configuration
//! and return a table that the caller serializes.

use std::fmt;

use thiserror::Error;

use crate::config::{ConfigError, Resolved};
use crate::scenarios;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{module}: {message}")]
    Domain {
        module: &'static str,
        message: String,
    },
    #[error("output: {0}")]
    Output(String),
}

impl ScenarioError {
    pub fn domain(module: &'static str, err: impl fmt::Display) -> Self {
        ScenarioError::Domain {
            module,
            message: err.to_string(),
        }
    }
}

/// Comma-separated output table. The header names units.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<I, S>(header: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<I, S>(&mut self, row: I)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let row: Vec<String> = row.into_iter().map(Into::into).collect();
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, ScenarioError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)
            .map_err(|e| ScenarioError::Output(e.to_string()))?;
        for row in &self.rows {
            w.write_record(row)
                .map_err(|e| ScenarioError::Output(e.to_string()))?;
        }
        w.into_inner()
            .map_err(|e| ScenarioError::Output(e.to_string()))
    }

    /// Cell at `row` in the named column.
    pub fn cell(&self, row: usize, column: &str) -> Option<&str> {
        let col = self.header.iter().position(|h| h == column)?;
        self.rows.get(row).map(|r| r[col].as_str())
    }
}

/// Result of running a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub table: Table,
    /// False only when a scenario evaluates checks and one failed.
    pub passed: bool,
}

impl From<Table> for Outcome {
    fn from(table: Table) -> Self {
        Outcome {
            table,
            passed: true,
        }
    }
}

pub trait Scenario: Send + Sync {
    fn name(&self) -> &'static str;
    fn about(&self) -> &'static str;
    fn run(&self, ctx: &Resolved) -> Result<Outcome, ScenarioError>;
}

#[derive(Default)]
pub struct Registry {
    entries: Vec<Box<dyn Scenario>>,
}

impl Registry {
    pub fn new() -> Self {
        Registry::default()
    }

    /// Registry with every built-in scenario.
    pub fn builtin() -> Self {
        let mut r = Registry::new();
        r.register(Box::new(scenarios::TransferSweep));
        r.register(Box::new(scenarios::Calibrate));
        r.register(Box::new(scenarios::NoiseSpectrum));
        r.register(Box::new(scenarios::Heating));
        r.register(Box::new(scenarios::Leakage));
        r.register(Box::new(scenarios::Transport));
        r.register(Box::new(scenarios::SelfCheck));
        r
    }

    /// Adds a scenario, replacing any existing one with the same name.
    pub fn register(&mut self, scenario: Box<dyn Scenario>) {
        self.entries.retain(|s| s.name() != scenario.name());
        self.entries.push(scenario);
    }

    pub fn get(&self, name: &str) -> Option<&dyn Scenario> {
        self.entries
            .iter()
            .find(|s| s.name() == name)
            .map(|s| s.as_ref())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|s| s.name()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &dyn Scenario> {
        self.entries.iter().map(|s| s.as_ref())
    }
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.names()).finish()
    }
}

/// Number formatting shared by all tables.
pub fn num(x: f64) -> String {
    format!("{x:e}")
}
