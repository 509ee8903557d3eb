//! The outer optimization loop, trial history and the JSON-lines trial log.
//!
//! A log starts with one header line holding the tuner configuration, followed by
//! one [`TrialRecord`] per line. Records are flushed as soon as they are produced,
//! so an interrupted run can be resumed from its log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{propose, propose_clustered, AcquisitionSpec, Proposal};
use crate::error::{Error, Result};
use crate::gp::FitOptions;
use crate::multitask::{build_dataset, fit_clustered, fit_multitask, ClusterSpec, TaskObservation, TaskRegistry};
use crate::objective::Objective;
use crate::space::{Configuration, ParamSpace};

pub const LOG_FORMAT: &str = "rockstune-trial-log/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Random,
    Gp,
    Multitask,
    ClusteredMt,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Random, Strategy::Gp, Strategy::Multitask, Strategy::ClusteredMt];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Gp => "gp",
            Strategy::Multitask => "multitask",
            Strategy::ClusteredMt => "clustered-mt",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL.into_iter().find(|st| st.as_str() == s).ok_or_else(|| {
            Error::invalid(format!(
                "unknown strategy `{s}` (expected random, gp, multitask or clustered-mt)"
            ))
        })
    }
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TunerConfig {
    pub strategy: Strategy,
    /// Total number of evaluations, including the random initialization.
    pub budget: usize,
    #[serde(default = "one")]
    pub init_random: usize,
    pub seed: u64,
    pub space: ParamSpace,
    pub tasks: TaskRegistry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clusters: Option<ClusterSpec>,
    #[serde(default)]
    pub acquisition: AcquisitionSpec,
}

impl TunerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.init_random == 0 {
            return Err(Error::config("init_random", "must be at least 1"));
        }
        if self.budget < self.init_random {
            return Err(Error::config(
                "budget",
                format!("budget {} is smaller than init_random {}", self.budget, self.init_random),
            ));
        }
        match (&self.clusters, self.strategy) {
            (None, Strategy::ClusteredMt) => {
                return Err(Error::config(
                    "clusters",
                    "strategy clustered-mt requires a cluster specification",
                ));
            }
            (Some(c), Strategy::ClusteredMt) => {
                c.resolve(&self.space, &self.tasks)?;
            }
            (Some(_), s) => {
                return Err(Error::config(
                    "clusters",
                    format!("clusters are only used by clustered-mt, not {s}"),
                ));
            }
            (None, _) => {}
        }
        self.acquisition.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrialStatus {
    Ok,
    Failed,
}

/// Where the evaluated configuration came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrialSource {
    Random,
    Model,
    /// The surrogate could not be fitted or searched; a random configuration was used.
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub step: usize,
    pub config: Configuration,
    pub values: BTreeMap<String, f64>,
    pub status: TrialStatus,
    pub wall_time: f64,
    pub source: TrialSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acquisition_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TrialRecord {
    pub fn is_ok(&self) -> bool {
        self.status == TrialStatus::Ok
    }
}

/// Measurement of the default configuration, stored alongside a run for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub config: Configuration,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format: String,
    pub tuner: TunerConfig,
    pub baseline: Option<Baseline>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub tuner: TunerConfig,
    pub baseline: Option<Baseline>,
    pub records: Vec<TrialRecord>,
}

impl History {
    pub fn new(tuner: TunerConfig, baseline: Option<Baseline>) -> Self {
        Self {
            tuner,
            baseline,
            records: Vec::new(),
        }
    }

    /// Read a trial log. A torn final line is ignored.
    pub fn load(path: &Path) -> Result<Self> {
        Ok(read_log(path)?.0)
    }

    pub fn primary(&self) -> &str {
        &self.tuner.tasks.primary().name
    }

    fn primary_value(&self, r: &TrialRecord) -> Option<f64> {
        if r.is_ok() {
            r.values.get(self.primary()).copied()
        } else {
            None
        }
    }

    /// Ok trial with the best primary value; the earliest step wins ties.
    pub fn best_so_far(&self) -> Result<&TrialRecord> {
        let direction = self.tuner.tasks.primary().direction;
        let mut best: Option<(&TrialRecord, f64)> = None;
        for r in &self.records {
            let Some(v) = self.primary_value(r) else { continue };
            if best.is_none_or(|(_, b)| direction.better(v, b)) {
                best = Some((r, v));
            }
        }
        best.map(|(r, _)| r)
            .ok_or_else(|| Error::NotFound("no successful trial in history".into()))
    }

    /// Running best primary value per step, starting at the first ok trial.
    pub fn convergence_trace(&self) -> Vec<(usize, f64)> {
        let direction = self.tuner.tasks.primary().direction;
        let mut best: Option<f64> = None;
        let mut out = Vec::with_capacity(self.records.len());
        for r in &self.records {
            if let Some(v) = self.primary_value(r) {
                if best.is_none_or(|b| direction.better(v, b)) {
                    best = Some(v);
                }
            }
            if let Some(b) = best {
                out.push((r.step, b));
            }
        }
        out
    }

    /// Ok trials as model observations.
    pub fn observations(&self) -> Vec<TaskObservation> {
        self.records
            .iter()
            .filter(|r| r.is_ok())
            .map(|r| TaskObservation::new(r.config.clone(), r.values.clone()))
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub log_path: Option<PathBuf>,
    /// Continue an existing log instead of refusing to overwrite it.
    pub resume: bool,
    /// Written to the header of a new log.
    pub baseline: Option<Baseline>,
}

const STREAM_RANDOM: u64 = 1;
const STREAM_FIT: u64 = 2;
const STREAM_ACQUISITION: u64 = 3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for one random stream of one step.
pub fn step_seed(seed: u64, step: usize, stream: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ step as u64) ^ stream)
}

/// Fit options the loop uses for the surrogate of `step`.
pub fn fit_options(config: &TunerConfig, step: usize) -> FitOptions {
    FitOptions::with_seed(step_seed(config.seed, step, STREAM_FIT))
}

fn read_log(path: &Path) -> Result<(History, u64)> {
    let log_err = |message: String| Error::TrialLog {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(path)?;
    // Only newline-terminated lines are complete.
    let complete = text.rfind('\n').map_or(0, |i| i + 1);
    let mut lines = text[..complete].lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| log_err("missing header line".into()))?;
    let header: LogHeader = serde_json::from_str(first).map_err(|e| log_err(format!("line 1: {e}")))?;
    if header.format != LOG_FORMAT {
        return Err(log_err(format!("unsupported format `{}`", header.format)));
    }
    header.tuner.validate()?;
    let mut history = History::new(header.tuner, header.baseline);
    for (i, line) in lines {
        let record: TrialRecord = serde_json::from_str(line).map_err(|e| log_err(format!("line {}: {e}", i + 1)))?;
        if record.step != history.records.len() + 1 {
            return Err(log_err(format!(
                "line {}: expected step {}, found {}",
                i + 1,
                history.records.len() + 1,
                record.step
            )));
        }
        history.records.push(record);
    }
    if history.records.len() > history.tuner.budget {
        return Err(log_err(format!(
            "{} trials exceed the budget of {}",
            history.records.len(),
            history.tuner.budget
        )));
    }
    Ok((history, complete as u64))
}

fn write_line<T: Serialize>(out: &mut BufWriter<File>, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn open_log(config: &TunerConfig, options: &RunOptions) -> Result<(History, Option<BufWriter<File>>)> {
    let Some(path) = &options.log_path else {
        return Ok((History::new(config.clone(), options.baseline.clone()), None));
    };
    if path.exists() {
        if !options.resume {
            return Err(Error::TrialLog {
                path: path.clone(),
                message: "log already exists; resume it or choose another path".into(),
            });
        }
        let (history, valid_len) = read_log(path)?;
        if serde_json::to_value(&history.tuner)? != serde_json::to_value(config)? {
            return Err(Error::TrialLog {
                path: path.clone(),
                message: "tuner configuration differs from the one recorded in the log".into(),
            });
        }
        let file = OpenOptions::new().write(true).open(path)?;
        file.set_len(valid_len)?;
        let mut out = BufWriter::new(file);
        use std::io::Seek;
        out.seek(std::io::SeekFrom::End(0))?;
        return Ok((history, Some(out)));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = BufWriter::new(File::create(path)?);
    let history = History::new(config.clone(), options.baseline.clone());
    write_line(
        &mut out,
        &LogHeader {
            format: LOG_FORMAT.into(),
            tuner: history.tuner.clone(),
            baseline: history.baseline.clone(),
        },
    )?;
    Ok((history, Some(out)))
}

fn model_proposal(
    config: &TunerConfig,
    observations: &[TaskObservation],
    evaluated: &[Configuration],
    step: usize,
) -> Result<Proposal> {
    if observations.is_empty() {
        return Err(Error::NotFound("no successful trial to fit a surrogate on".into()));
    }
    let fit = fit_options(config, step);
    let acq_seed = step_seed(config.seed, step, STREAM_ACQUISITION);
    let single = |tasks: &TaskRegistry| -> Result<Proposal> {
        let dataset = build_dataset(observations, &config.space, tasks)?;
        let model = fit_multitask(&dataset, &fit)?;
        propose(
            &model,
            dataset.primary_task(),
            &config.space,
            dataset.incumbent(),
            &config.acquisition,
            acq_seed,
            evaluated,
        )
    };
    match config.strategy {
        Strategy::Random => unreachable!("random strategy never consults a model"),
        Strategy::Gp => single(&config.tasks.primary_only()),
        Strategy::Multitask => single(&config.tasks),
        Strategy::ClusteredMt => {
            let clusters = config.clusters.as_ref().ok_or_else(|| Error::config("clusters", "missing"))?;
            let models = fit_clustered(observations, &config.space, &config.tasks, clusters, &fit)?;
            // Every cluster sees the full primary history, so the incumbents agree.
            let incumbent = models[0].dataset.incumbent();
            propose_clustered(&models, &config.space, incumbent, &config.acquisition, acq_seed, evaluated)
        }
    }
}

fn check_values(tasks: &TaskRegistry, values: &BTreeMap<String, f64>) -> std::result::Result<(), String> {
    for name in tasks.names() {
        match values.get(name) {
            None => return Err(format!("objective returned no value for task `{name}`")),
            Some(v) if !v.is_finite() => return Err(format!("objective returned non-finite {v} for task `{name}`")),
            Some(_) => {}
        }
    }
    Ok(())
}

/// Run (or resume) the loop until `config.budget` trials exist.
pub fn run(config: &TunerConfig, objective: &mut dyn Objective, options: &RunOptions) -> Result<History> {
    config.validate()?;
    let (mut history, mut out) = open_log(config, options)?;
    for step in history.records.len() + 1..=config.budget {
        let random = || {
            let mut rng = ChaCha8Rng::seed_from_u64(step_seed(config.seed, step, STREAM_RANDOM));
            config.space.sample_uniform(&mut rng)
        };
        let (candidate, source, acquisition_value) = if config.strategy == Strategy::Random || step <= config.init_random {
            (random(), TrialSource::Random, None)
        } else {
            let evaluated: Vec<Configuration> = history.records.iter().map(|r| r.config.clone()).collect();
            match model_proposal(config, &history.observations(), &evaluated, step) {
                Ok(p) => (p.config, TrialSource::Model, Some(p.acquisition_value)),
                Err(e) => {
                    log::warn!("step {step}: surrogate proposal failed ({e}); using a random configuration");
                    (random(), TrialSource::Fallback, None)
                }
            }
        };
        config.space.validate(&candidate)?;

        let record = match objective.evaluate(&candidate) {
            Ok(eval) => match check_values(&config.tasks, &eval.values) {
                Ok(()) => TrialRecord {
                    step,
                    config: candidate,
                    values: eval.values,
                    status: TrialStatus::Ok,
                    wall_time: eval.wall_time,
                    source,
                    acquisition_value,
                    error: None,
                },
                Err(message) => TrialRecord {
                    step,
                    config: candidate,
                    values: BTreeMap::new(),
                    status: TrialStatus::Failed,
                    wall_time: eval.wall_time,
                    source,
                    acquisition_value,
                    error: Some(message),
                },
            },
            Err(failure) => {
                log::warn!("step {step}: objective failed: {}", failure.message);
                TrialRecord {
                    step,
                    config: candidate,
                    values: BTreeMap::new(),
                    status: TrialStatus::Failed,
                    wall_time: 0.0,
                    source,
                    acquisition_value,
                    error: Some(failure.message),
                }
            }
        };
        if let Some(out) = out.as_mut() {
            write_line(out, &record)?;
        }
        history.records.push(record);
    }
    Ok(history)
}
