//! Objectives the tuner evaluates: the db_bench subprocess adapter and a
//! deterministic decomposable surrogate.

mod benchmark;
mod synthetic;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::space::Configuration;

pub use benchmark::{
    extract_metrics, render_command, BenchmarkObjective, MetricExtraction, MetricSource, ObjectiveSpec, Reducer,
};
pub use synthetic::{
    default_rocksdb_optima, synthetic_objective, SurrogateCluster, SyntheticObjective, SyntheticSurrogateSpec, NOISY_PROFILE_STD,
};

/// Raw measurements of one evaluation, keyed by task name.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub values: BTreeMap<String, f64>,
    /// Seconds spent producing the measurement, as reported by the objective.
    pub wall_time: f64,
}

/// The objective could not produce a measurement for a configuration.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{message}")]
pub struct ObjectiveFailure {
    pub message: String,
    /// Trailing part of the captured output, if any.
    pub output_tail: String,
}

impl ObjectiveFailure {
    pub fn new(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            output_tail: String::new(),
        }
    }

    pub fn with_output(mut self, output: &str) -> Self {
        self.output_tail = tail(output, 2000).to_string();
        self
    }
}

fn tail(s: &str, max_bytes: usize) -> &str {
    if s.len() <= max_bytes {
        return s;
    }
    let mut start = s.len() - max_bytes;
    while !s.is_char_boundary(start) {
        start += 1;
    }
    &s[start..]
}

pub trait Objective {
    fn evaluate(&mut self, config: &Configuration) -> Result<Evaluation, ObjectiveFailure>;
}

impl<F> Objective for F
where
    F: FnMut(&Configuration) -> Result<Evaluation, ObjectiveFailure>,
{
    fn evaluate(&mut self, config: &Configuration) -> Result<Evaluation, ObjectiveFailure> {
        self(config)
    }
}
