//! Multi-task surrogate assembly.
//!
//! Observations of every task are normalized onto the unit cube, sign-flipped
//! so that larger is better, standardized per task and stacked into one ICM
//! training set. The clustered variant repeats this per parameter cluster on
//! the projection of each configuration onto the cluster's parameters.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{self, FitOptions, GpModel, TaskInput, TrainingData};
use crate::space::{Configuration, ParamSpace, UnitPoint};

/// Below this sample standard deviation a task is standardized with `std = 1`.
pub const STD_FALLBACK_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Maximize,
    Minimize,
}

impl Direction {
    /// Multiplier that turns the raw value into a larger-is-better value.
    pub fn sign(self) -> f64 {
        match self {
            Direction::Maximize => 1.0,
            Direction::Minimize => -1.0,
        }
    }

    /// Whether `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        self.sign() * a > self.sign() * b
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub direction: Direction,
    #[serde(default)]
    pub primary: bool,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, direction: Direction, primary: bool) -> Self {
        Self {
            name: name.into(),
            direction,
            primary,
        }
    }
}

/// Ordered task list with exactly one primary task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TaskSpec>", into = "Vec<TaskSpec>")]
pub struct TaskRegistry {
    tasks: Vec<TaskSpec>,
    primary: usize,
}

impl TryFrom<Vec<TaskSpec>> for TaskRegistry {
    type Error = Error;

    fn try_from(tasks: Vec<TaskSpec>) -> Result<Self> {
        TaskRegistry::new(tasks)
    }
}

impl From<TaskRegistry> for Vec<TaskSpec> {
    fn from(r: TaskRegistry) -> Self {
        r.tasks
    }
}

impl TaskRegistry {
    pub fn new(tasks: Vec<TaskSpec>) -> Result<Self> {
        let mut seen = HashSet::new();
        for t in &tasks {
            if t.name.is_empty() {
                return Err(Error::invalid("task name must not be empty"));
            }
            if !seen.insert(t.name.as_str()) {
                return Err(Error::invalid(format!("duplicate task name `{}`", t.name)));
            }
        }
        let primaries: Vec<usize> = tasks.iter().enumerate().filter(|(_, t)| t.primary).map(|(i, _)| i).collect();
        match primaries.as_slice() {
            [p] => Ok(Self { primary: *p, tasks }),
            [] => Err(Error::invalid("task registry has no primary task")),
            _ => Err(Error::invalid("task registry has more than one primary task")),
        }
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn primary_index(&self) -> usize {
        self.primary
    }

    pub fn primary(&self) -> &TaskSpec {
        &self.tasks[self.primary]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tasks.iter().map(|t| t.name.as_str())
    }

    /// The tasks at `indices` (kept in registry order); must include the primary.
    pub fn subset(&self, indices: &[usize]) -> Result<TaskRegistry> {
        let mut idx = indices.to_vec();
        idx.sort_unstable();
        idx.dedup();
        let tasks = idx
            .iter()
            .map(|&i| {
                self.tasks
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("task index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        TaskRegistry::new(tasks)
    }

    /// Registry with only the primary task.
    pub fn primary_only(&self) -> TaskRegistry {
        self.subset(&[self.primary]).expect("primary subset is valid")
    }
}

pub const IOPS: &str = "iops";
pub const WRITE_AMPLIFICATION: &str = "write_amplification";
pub const READ_BLOCK_GET_P99: &str = "read_block_get_p99";
pub const LEVEL0_TO_LEVEL1_P99: &str = "level0_to_level1_p99";

/// IOPS (primary, maximized) and the three adjacent RocksDB component metrics (minimized).
///
/// Latency tasks are in microseconds.
pub fn rocksdb_tasks() -> TaskRegistry {
    TaskRegistry::new(vec![
        TaskSpec::new(IOPS, Direction::Maximize, true),
        TaskSpec::new(WRITE_AMPLIFICATION, Direction::Minimize, false),
        TaskSpec::new(READ_BLOCK_GET_P99, Direction::Minimize, false),
        TaskSpec::new(LEVEL0_TO_LEVEL1_P99, Direction::Minimize, false),
    ])
    .expect("built-in registry is valid")
}

/// One evaluated configuration with its raw measurement for every task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskObservation {
    pub config: Configuration,
    pub values: BTreeMap<String, f64>,
}

impl TaskObservation {
    pub fn new(config: Configuration, values: BTreeMap<String, f64>) -> Self {
        Self { config, values }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub mean: f64,
    pub std: f64,
    pub sign: f64,
    /// The sample deviation was degenerate and `std = 1` was used instead.
    pub fallback: bool,
}

impl TaskStats {
    pub fn standardize(&self, raw: f64) -> f64 {
        (self.sign * raw - self.mean) / self.std
    }

    pub fn destandardize(&self, z: f64) -> f64 {
        (z * self.std + self.mean) * self.sign
    }
}

/// Per-task standardization, aligned with the dataset's task registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub tasks: Vec<TaskStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub point: UnitPoint,
    pub task: usize,
    pub value: f64,
}

/// Stacked `(point, task, standardized value)` rows, observation-major and task-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskDataset {
    pub rows: Vec<DatasetRow>,
    pub stats: StandardizationStats,
    pub tasks: TaskRegistry,
    pub num_observations: usize,
}

impl MultiTaskDataset {
    pub fn primary_task(&self) -> usize {
        self.tasks.primary_index()
    }

    /// Standardized values of task `task`, in observation order.
    pub fn task_column(&self, task: usize) -> Vec<f64> {
        self.rows.iter().filter(|r| r.task == task).map(|r| r.value).collect()
    }

    /// Best standardized primary value (the EI incumbent).
    pub fn incumbent(&self) -> f64 {
        self.task_column(self.primary_task())
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_training_data(&self) -> Result<TrainingData> {
        TrainingData::new(
            self.rows.iter().map(|r| TaskInput::new(r.point.clone(), r.task)).collect(),
            self.rows.iter().map(|r| r.value).collect(),
            self.tasks.len(),
        )
    }
}

/// Normalize, sign-flip, standardize and stack `history` for every task in `tasks`.
pub fn build_dataset(history: &[TaskObservation], space: &ParamSpace, tasks: &TaskRegistry) -> Result<MultiTaskDataset> {
    let all: Vec<usize> = (0..space.dimension()).collect();
    build_projected(history, space, &all, tasks)
}

/// As [`build_dataset`], with configurations projected onto the parameters at `indices`.
pub fn build_projected(
    history: &[TaskObservation],
    space: &ParamSpace,
    indices: &[usize],
    tasks: &TaskRegistry,
) -> Result<MultiTaskDataset> {
    if history.is_empty() {
        return Err(Error::invalid("cannot build a dataset from an empty history"));
    }
    let sub = space.subspace(indices)?;
    let mut points = Vec::with_capacity(history.len());
    for obs in history {
        space.validate(&obs.config)?;
        points.push(sub.normalize(&obs.config.project(indices))?);
    }

    let mut stats = Vec::with_capacity(tasks.len());
    for task in tasks.tasks() {
        let sign = task.direction.sign();
        let signed = history
            .iter()
            .map(|obs| {
                obs.values
                    .get(&task.name)
                    .copied()
                    .filter(|v| v.is_finite())
                    .map(|v| sign * v)
                    .ok_or_else(|| Error::invalid(format!("observation is missing a finite value for task `{}`", task.name)))
            })
            .collect::<Result<Vec<f64>>>()?;
        let n = signed.len() as f64;
        let mean = signed.iter().sum::<f64>() / n;
        let var = signed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        let fallback = std.is_nan() || std < STD_FALLBACK_THRESHOLD;
        stats.push(TaskStats {
            mean,
            std: if fallback { 1.0 } else { std },
            sign,
            fallback,
        });
    }

    let mut rows = Vec::with_capacity(history.len() * tasks.len());
    for (obs, point) in history.iter().zip(points) {
        for (t, (task, st)) in tasks.tasks().iter().zip(&stats).enumerate() {
            rows.push(DatasetRow {
                point: point.clone(),
                task: t,
                value: st.standardize(obs.values[&task.name]),
            });
        }
    }

    Ok(MultiTaskDataset {
        rows,
        stats: StandardizationStats { tasks: stats },
        tasks: tasks.clone(),
        num_observations: history.len(),
    })
}

/// ICM GP over every task of the dataset (a plain GP when there is a single task).
pub fn fit_multitask(dataset: &MultiTaskDataset, options: &FitOptions) -> Result<GpModel> {
    gp::fit(dataset.to_training_data()?, options)
}

/// A group of tasks that owns a subset of the parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub tasks: Vec<String>,
    pub params: Vec<String>,
}

impl Cluster {
    pub fn new<T: Into<String>, P: Into<String>>(
        tasks: impl IntoIterator<Item = T>,
        params: impl IntoIterator<Item = P>,
    ) -> Self {
        Self {
            tasks: tasks.into_iter().map(Into::into).collect(),
            params: params.into_iter().map(Into::into).collect(),
        }
    }
}

/// Decomposition of the parameter space into disjoint, covering clusters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClusterSpec {
    pub clusters: Vec<Cluster>,
}

/// A cluster resolved against a space and registry.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedCluster {
    pub cluster: Cluster,
    pub param_indices: Vec<usize>,
    /// Registry indices of the cluster's tasks plus the primary, ascending.
    pub task_indices: Vec<usize>,
}

impl ClusterSpec {
    pub fn new(clusters: Vec<Cluster>) -> Self {
        Self { clusters }
    }

    /// One cluster owning every task and parameter.
    pub fn trivial(space: &ParamSpace, tasks: &TaskRegistry) -> Self {
        Self::new(vec![Cluster::new(tasks.names(), space.names())])
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    /// Check names, disjointness and coverage; the primary task joins every cluster.
    pub fn resolve(&self, space: &ParamSpace, tasks: &TaskRegistry) -> Result<Vec<ResolvedCluster>> {
        if self.clusters.is_empty() {
            return Err(Error::invalid("cluster spec has no clusters"));
        }
        let mut param_owner: Vec<Option<usize>> = vec![None; space.dimension()];
        let mut task_owner: Vec<Option<usize>> = vec![None; tasks.len()];
        let primary = tasks.primary_index();
        let mut resolved = Vec::with_capacity(self.clusters.len());

        for (c, cluster) in self.clusters.iter().enumerate() {
            if cluster.params.is_empty() {
                return Err(Error::invalid(format!("cluster {c} owns no parameters")));
            }
            let mut param_indices = Vec::with_capacity(cluster.params.len());
            for name in &cluster.params {
                let i = space
                    .index_of(name)
                    .ok_or_else(|| Error::invalid(format!("cluster {c} references unknown parameter `{name}`")))?;
                if let Some(prev) = param_owner[i] {
                    return Err(Error::invalid(format!(
                        "parameter `{name}` is assigned to clusters {prev} and {c}; clusters must be disjoint"
                    )));
                }
                param_owner[i] = Some(c);
                param_indices.push(i);
            }
            let mut task_indices = vec![primary];
            for name in &cluster.tasks {
                let t = tasks
                    .index_of(name)
                    .ok_or_else(|| Error::invalid(format!("cluster {c} references unknown task `{name}`")))?;
                if t == primary {
                    continue;
                }
                if let Some(prev) = task_owner[t] {
                    return Err(Error::invalid(format!(
                        "task `{name}` is assigned to clusters {prev} and {c}"
                    )));
                }
                task_owner[t] = Some(c);
                task_indices.push(t);
            }
            task_indices.sort_unstable();
            resolved.push(ResolvedCluster {
                cluster: cluster.clone(),
                param_indices,
                task_indices,
            });
        }

        if let Some(i) = param_owner.iter().position(Option::is_none) {
            return Err(Error::invalid(format!(
                "parameter `{}` is not covered by any cluster",
                space.params()[i].name()
            )));
        }
        if let Some(t) = (0..tasks.len()).find(|&t| t != primary && task_owner[t].is_none()) {
            return Err(Error::invalid(format!(
                "task `{}` is not assigned to any cluster",
                tasks.tasks()[t].name
            )));
        }
        Ok(resolved)
    }
}

/// Three-cluster decomposition of the RocksDB space by component semantics.
///
/// This is a reconstruction: level0/flush parameters go with the
/// level0-to-level1 compaction latency, compaction-shaping parameters with
/// write amplification, and the block size with block read latency.
pub fn default_rocksdb_clusters() -> ClusterSpec {
    ClusterSpec::new(vec![
        Cluster::new(
            [LEVEL0_TO_LEVEL1_P99],
            [
                "write_buffer_size",
                "max_write_buffer_number",
                "min_write_buffer_number_to_merge",
                "max_background_flushes",
                "level0_file_num_compaction_trigger",
            ],
        ),
        Cluster::new(
            [WRITE_AMPLIFICATION],
            [
                "max_background_compactions",
                "max_bytes_for_level_multiplier",
                "level0_slowdown_writes_trigger",
                "level0_stop_writes_trigger",
            ],
        ),
        Cluster::new([READ_BLOCK_GET_P99], ["block_size"]),
    ])
}

/// A fitted per-cluster surrogate.
#[derive(Debug, Clone)]
pub struct ClusterModel {
    pub resolved: ResolvedCluster,
    pub subspace: ParamSpace,
    pub dataset: MultiTaskDataset,
    pub model: GpModel,
}

impl ClusterModel {
    /// Index of the primary task inside this cluster's model.
    pub fn primary_task(&self) -> usize {
        self.dataset.primary_task()
    }
}

/// One independent surrogate per cluster over the cluster's parameter projection.
pub fn fit_clustered(
    history: &[TaskObservation],
    space: &ParamSpace,
    tasks: &TaskRegistry,
    clusters: &ClusterSpec,
    options: &FitOptions,
) -> Result<Vec<ClusterModel>> {
    clusters
        .resolve(space, tasks)?
        .into_iter()
        .map(|resolved| {
            let sub_tasks = tasks.subset(&resolved.task_indices)?;
            let subspace = space.subspace(&resolved.param_indices)?;
            let dataset = build_projected(history, space, &resolved.param_indices, &sub_tasks)?;
            let model = fit_multitask(&dataset, options)?;
            Ok(ClusterModel {
                resolved,
                subspace,
                dataset,
                model,
            })
        })
        .collect()
}
