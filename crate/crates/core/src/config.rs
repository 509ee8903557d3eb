//! The tuner config file: one JSON document with the sections
//! `space`, `tasks`, `clusters`, `acquisition`, `objective` and `synthetic`.
//!
//! Only `space` is required. `space` is either the name of a built-in space or
//! an array of `{name, lower, upper, default}`; `tasks` defaults to the RocksDB
//! registry.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use serde_json::Value;

use crate::acquisition::AcquisitionSpec;
use crate::error::{Error, Result};
use crate::multitask::{rocksdb_tasks, ClusterSpec, TaskRegistry};
use crate::objective::{default_rocksdb_optima, BenchmarkObjective, ObjectiveSpec, SyntheticObjective, SyntheticSurrogateSpec};
use crate::space::ParamSpace;
use crate::tuner::{Strategy, TunerConfig};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    space: Value,
    #[serde(default)]
    tasks: Option<Value>,
    #[serde(default)]
    clusters: Option<Value>,
    #[serde(default)]
    acquisition: Option<Value>,
    #[serde(default)]
    objective: Option<Value>,
    #[serde(default)]
    synthetic: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    /// Unit-cube optimum per parameter; defaults to the built-in RocksDB optima.
    #[serde(default)]
    pub optima: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TunerFile {
    pub space: ParamSpace,
    pub tasks: TaskRegistry,
    pub clusters: Option<ClusterSpec>,
    pub acquisition: AcquisitionSpec,
    pub objective: Option<ObjectiveSpec>,
    pub synthetic: Option<SyntheticSection>,
}

fn section<T: serde::de::DeserializeOwned>(field: &str, value: Value) -> Result<T> {
    serde_json::from_value(value).map_err(|e| Error::config(field, e.to_string()))
}

/// Re-label a validation failure with the section it came from.
fn in_section<T>(field: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config { .. } => e,
        Error::InvalidArgument(m) => Error::config(field, m),
        other => Error::config(field, other.to_string()),
    })
}

impl TunerFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config { field, message } => Error::Config {
                field,
                message: format!("{message} (in {})", path.display()),
            },
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        // serde_json reports line and column for syntax and top-level shape errors.
        let raw: RawFile = serde_json::from_str(text).map_err(|e| Error::config("<document>", e.to_string()))?;
        let space = match raw.space {
            Value::String(name) => in_section("space", ParamSpace::builtin(&name))?,
            other => section("space", other)?,
        };
        let tasks = match raw.tasks {
            Some(v) => section("tasks", v)?,
            None => rocksdb_tasks(),
        };
        let clusters: Option<ClusterSpec> = raw.clusters.map(|v| section("clusters", v)).transpose()?;
        if let Some(c) = &clusters {
            in_section("clusters", c.resolve(&space, &tasks))?;
        }
        let acquisition: AcquisitionSpec = match raw.acquisition {
            Some(v) => section("acquisition", v)?,
            None => AcquisitionSpec::default(),
        };
        in_section("acquisition", acquisition.validate())?;
        let objective: Option<ObjectiveSpec> = raw.objective.map(|v| section("objective", v)).transpose()?;
        if let Some(o) = &objective {
            in_section("objective", o.validate(&space, &tasks))?;
        }
        let synthetic = raw.synthetic.map(|v| section("synthetic", v)).transpose()?;
        Ok(Self {
            space,
            tasks,
            clusters,
            acquisition,
            objective,
            synthetic,
        })
    }

    pub fn tuner_config(&self, strategy: Strategy, budget: usize, init_random: usize, seed: u64) -> Result<TunerConfig> {
        let clusters = if strategy == Strategy::ClusteredMt {
            Some(
                self.clusters
                    .clone()
                    .ok_or_else(|| Error::config("clusters", "strategy clustered-mt needs a `clusters` section"))?,
            )
        } else {
            None
        };
        let config = TunerConfig {
            strategy,
            budget,
            init_random,
            seed,
            space: self.space.clone(),
            tasks: self.tasks.clone(),
            clusters,
            acquisition: self.acquisition.clone(),
        };
        config.validate()?;
        Ok(config)
    }

    /// The synthetic surrogate shaped after the `clusters` section.
    pub fn synthetic_spec(&self) -> Result<SyntheticSurrogateSpec> {
        let clusters = self
            .clusters
            .as_ref()
            .ok_or_else(|| Error::config("clusters", "the synthetic objective is shaped by the `clusters` section"))?;
        let section = self.synthetic.clone().unwrap_or(SyntheticSection {
            optima: None,
            noise_std: 0.0,
        });
        let optima = section.optima.unwrap_or_else(default_rocksdb_optima);
        in_section(
            "synthetic",
            SyntheticSurrogateSpec::from_clusters(clusters, &self.space, &self.tasks, &optima, section.noise_std),
        )
    }

    pub fn synthetic_objective(&self, seed: u64) -> Result<SyntheticObjective> {
        SyntheticObjective::new(self.space.clone(), self.synthetic_spec()?, seed)
    }

    pub fn benchmark_objective(&self) -> Result<BenchmarkObjective> {
        let spec = self
            .objective
            .clone()
            .ok_or_else(|| Error::config("objective", "the benchmark objective needs an `objective` section"))?;
        BenchmarkObjective::new(spec, self.space.clone(), &self.tasks)
    }
}
