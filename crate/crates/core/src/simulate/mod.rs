//! Finite-difference data generators and the closed-form potentials they
//! are built from.

pub mod bessel;
pub mod diffusion;
mod io;
pub mod phase;
pub mod visco;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::potentials::Experiment;

pub use io::{read_trajectory, write_trajectory};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("unstable run: {what} = {value} left [{lo}, {hi}] at step {step}")]
    Unstable {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
        step: usize,
    },
    #[error("time step {dt} exceeds the stability limit {limit}")]
    StepTooLarge { dt: f64, limit: f64 },
    #[error("{what} = {value} outside ({lo}, {hi})")]
    OutOfRange {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("invalid simulation parameter: {0}")]
    Invalid(String),
    #[error("field '{0}' missing from trajectory")]
    MissingField(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed dataset file {path}: {msg}")]
    Format { path: String, msg: String },
}

/// Values of one quantity at a fixed set of stations for every recorded
/// time, stored time-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub units: String,
    /// Position of each station along the bar or domain.
    pub positions: Vec<f64>,
    pub values: Vec<f64>,
}

impl Field {
    pub fn new(units: &str, positions: Vec<f64>) -> Self {
        Field {
            units: units.to_string(),
            positions,
            values: Vec::new(),
        }
    }

    pub fn stations(&self) -> usize {
        self.positions.len()
    }

    pub fn n_times(&self) -> usize {
        if self.positions.is_empty() {
            0
        } else {
            self.values.len() / self.positions.len()
        }
    }

    pub fn row(&self, n: usize) -> &[f64] {
        let s = self.stations();
        &self.values[n * s..(n + 1) * s]
    }

    pub fn push_row(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.stations());
        self.values.extend_from_slice(row);
    }
}

/// Recorded output of a simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryField {
    pub experiment: Experiment,
    pub n_x: usize,
    pub dx: f64,
    pub times: Vec<f64>,
    pub fields: BTreeMap<String, Field>,
    /// Physical constants, scheme description, stability record.
    pub meta: serde_json::Map<String, serde_json::Value>,
}

impl TrajectoryField {
    pub fn new(experiment: Experiment, n_x: usize, dx: f64) -> Self {
        TrajectoryField {
            experiment,
            n_x,
            dx,
            times: Vec::new(),
            fields: BTreeMap::new(),
            meta: serde_json::Map::new(),
        }
    }

    pub fn field(&self, name: &str) -> Result<&Field, SimError> {
        self.fields
            .get(name)
            .ok_or_else(|| SimError::MissingField(name.to_string()))
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn set_meta(&mut self, key: &str, value: impl Serialize) {
        self.meta.insert(
            key.to_string(),
            serde_json::to_value(value).expect("metadata is serializable"),
        );
    }

    /// All field values are finite and every field has one row per time.
    pub fn check_consistent(&self) -> Result<(), SimError> {
        for (name, f) in &self.fields {
            if f.values.len() != f.stations() * self.times.len() {
                return Err(SimError::Format {
                    path: name.clone(),
                    msg: format!(
                        "{} values for {} stations x {} times",
                        f.values.len(),
                        f.stations(),
                        self.times.len()
                    ),
                });
            }
            if let Some(v) = f.values.iter().find(|v| !v.is_finite()) {
                return Err(SimError::Format {
                    path: name.clone(),
                    msg: format!("non-finite value {v}"),
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn positions(n: usize, start: f64, step: f64) -> Vec<f64> {
    (0..n).map(|i| start + i as f64 * step).collect()
}
