//! Run-set reports (convergence curves, best-found summary) and model replay diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gp::GpModel;
use crate::multitask::{build_dataset, fit_clustered, fit_multitask, MultiTaskDataset};
use crate::space::Configuration;
use crate::tuner::{fit_options, History, Strategy};

/// Threshold multiple of the default measurement tracked in the summary.
pub const IMPROVEMENT_TARGET: f64 = 1.3;

/// A loaded trial log and the path it came from.
#[derive(Debug, Clone)]
pub struct Run {
    pub path: PathBuf,
    pub history: History,
}

fn collect_logs(dir: &Path, recurse: bool, out: &mut Vec<PathBuf>) -> Result<Vec<PathBuf>> {
    let mut subdirs = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() && recurse {
            subdirs.push(path);
        } else if path.extension().is_some_and(|e| e == "jsonl") {
            out.push(path);
        }
    }
    Ok(subdirs)
}

/// Trial logs under `root`: `root` itself if it is a file, else every `*.jsonl` one
/// directory level down (`<root>/<strategy>/run-<seed>.jsonl`) or directly in `root`.
pub fn find_logs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut out = Vec::new();
    for dir in collect_logs(root, true, &mut out)? {
        collect_logs(&dir, false, &mut out)?;
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::NotFound(format!("no trial logs under {}", root.display())));
    }
    Ok(out)
}

pub fn load_runs(paths: &[PathBuf]) -> Result<Vec<Run>> {
    paths
        .iter()
        .map(|p| {
            Ok(Run {
                path: p.clone(),
                history: History::load(p)?,
            })
        })
        .collect()
}

fn group(runs: &[Run]) -> BTreeMap<Strategy, Vec<&Run>> {
    let mut by: BTreeMap<Strategy, Vec<&Run>> = BTreeMap::new();
    for r in runs {
        by.entry(r.history.tuner.strategy).or_default().push(r);
    }
    for v in by.values_mut() {
        v.sort_by(|a, b| (a.history.tuner.seed, &a.path).cmp(&(b.history.tuner.seed, &b.path)));
    }
    by
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub strategy: Strategy,
    pub step: usize,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Per-step order statistics of best-so-far across the runs of one strategy.
/// Runs without an ok trial yet at a step do not contribute to it.
pub fn aggregate(histories: &[&History]) -> Vec<(usize, f64, f64, f64)> {
    let traces: Vec<BTreeMap<usize, f64>> = histories
        .iter()
        .map(|h| h.convergence_trace().into_iter().collect())
        .collect();
    let last = histories.iter().map(|h| h.records.len()).max().unwrap_or(0);
    (1..=last)
        .filter_map(|step| {
            let v = sorted(traces.iter().filter_map(|t| t.get(&step).copied()).collect());
            (!v.is_empty()).then(|| (step, median(&v), v[0], v[v.len() - 1]))
        })
        .collect()
}

pub fn convergence_rows(runs: &[Run]) -> Vec<ConvergenceRow> {
    let mut rows = Vec::new();
    for (strategy, group) in group(runs) {
        let histories: Vec<&History> = group.iter().map(|r| &r.history).collect();
        for (step, median, min, max) in aggregate(&histories) {
            rows.push(ConvergenceRow {
                strategy,
                step,
                median,
                min,
                max,
            });
        }
    }
    rows
}

pub fn convergence_csv(rows: &[ConvergenceRow]) -> String {
    let mut out = String::from("strategy,step,median,min,max\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.strategy, r.step, r.median, r.min, r.max);
    }
    out
}

/// First step whose running best reaches `target`.
pub fn steps_to(trace: &[(usize, f64)], target: f64) -> Option<usize> {
    trace.iter().find(|(_, v)| *v >= target).map(|(s, _)| *s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub log: String,
    pub seed: u64,
    pub trials: usize,
    pub failed: usize,
    pub best_value: Option<f64>,
    pub best_step: Option<usize>,
    pub best_config: Option<Configuration>,
    pub default_value: Option<f64>,
    pub improvement_ratio: Option<f64>,
    #[serde(rename = "steps_to_1.3x")]
    pub steps_to_target: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategySummary {
    pub runs: Vec<RunSummary>,
    /// Best value over all runs.
    pub best_value: Option<f64>,
    pub best_config: Option<Configuration>,
    pub median_best_value: Option<f64>,
    pub min_best_value: Option<f64>,
    pub max_best_value: Option<f64>,
    pub default_value: Option<f64>,
    /// Median best over the default measurement.
    pub improvement_ratio: Option<f64>,
    /// First step where the median curve reaches 1.3x the default.
    #[serde(rename = "steps_to_1.3x")]
    pub steps_to_target: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub primary: String,
    pub strategies: BTreeMap<Strategy, StrategySummary>,
}

fn ratio(best: Option<f64>, default: Option<f64>) -> Option<f64> {
    match (best, default) {
        (Some(b), Some(d)) if d != 0.0 => Some(b / d),
        _ => None,
    }
}

fn default_value(h: &History) -> Option<f64> {
    h.baseline.as_ref()?.values.get(h.primary()).copied()
}

fn display_path(path: &Path, root: Option<&Path>) -> String {
    root.and_then(|r| path.strip_prefix(r).ok())
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

pub fn summarize(runs: &[Run], root: Option<&Path>) -> Result<Summary> {
    let primary = runs
        .first()
        .ok_or_else(|| Error::NotFound("no runs to summarize".into()))?
        .history
        .primary()
        .to_string();
    let mut strategies = BTreeMap::new();
    for (strategy, group) in group(runs) {
        let mut run_summaries = Vec::new();
        for run in &group {
            let h = &run.history;
            if h.primary() != primary {
                return Err(Error::invalid(format!(
                    "{} optimizes `{}`, other logs optimize `{primary}`",
                    run.path.display(),
                    h.primary()
                )));
            }
            let best = h.best_so_far().ok();
            let default = default_value(h);
            let best_value = best.map(|b| b.values[&primary]);
            run_summaries.push(RunSummary {
                log: display_path(&run.path, root),
                seed: h.tuner.seed,
                trials: h.records.len(),
                failed: h.records.iter().filter(|r| !r.is_ok()).count(),
                best_value,
                best_step: best.map(|b| b.step),
                best_config: best.map(|b| b.config.clone()),
                default_value: default,
                improvement_ratio: ratio(best_value, default),
                steps_to_target: default.and_then(|d| steps_to(&h.convergence_trace(), IMPROVEMENT_TARGET * d)),
            });
        }
        let bests = sorted(run_summaries.iter().filter_map(|r| r.best_value).collect());
        let overall = run_summaries
            .iter()
            .filter(|r| r.best_value.is_some())
            .fold(None::<&RunSummary>, |acc, r| match acc {
                Some(a) if a.best_value >= r.best_value => Some(a),
                _ => Some(r),
            });
        let default = group.iter().find_map(|r| default_value(&r.history));
        let median_best = (!bests.is_empty()).then(|| median(&bests));
        let histories: Vec<&History> = group.iter().map(|r| &r.history).collect();
        let median_curve: Vec<(usize, f64)> = aggregate(&histories).into_iter().map(|(s, m, _, _)| (s, m)).collect();
        strategies.insert(
            strategy,
            StrategySummary {
                best_value: overall.and_then(|r| r.best_value),
                best_config: overall.and_then(|r| r.best_config.clone()),
                median_best_value: median_best,
                min_best_value: bests.first().copied(),
                max_best_value: bests.last().copied(),
                default_value: default,
                improvement_ratio: ratio(median_best, default),
                steps_to_target: default.and_then(|d| steps_to(&median_curve, IMPROVEMENT_TARGET * d)),
                runs: run_summaries,
            },
        );
    }
    Ok(Summary { primary, strategies })
}

/// Write `convergence.csv` and `summary.json` into `out_dir`.
pub fn write_report(runs: &[Run], root: Option<&Path>, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("convergence.csv"), convergence_csv(&convergence_rows(runs)))?;
    let mut json = serde_json::to_string_pretty(&summarize(runs, root)?)?;
    json.push('\n');
    std::fs::write(out_dir.join("summary.json"), json)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskResiduals {
    pub task: String,
    /// Observed minus posterior mean, standardized units, in observation order.
    pub residuals: Vec<f64>,
    pub max_abs: f64,
    /// The standardization fell back to `std = 1` (fewer than two distinct values).
    pub std_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelDiagnostics {
    pub label: String,
    pub params: Vec<String>,
    pub tasks: Vec<String>,
    pub observations: usize,
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_std: f64,
    pub log_marginal_likelihood: f64,
    /// Learned task similarity `B`.
    pub task_covariance: Vec<Vec<f64>>,
    pub residuals: Vec<TaskResiduals>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub strategy: Strategy,
    pub trials: usize,
    pub ok_trials: usize,
    pub models: Vec<ModelDiagnostics>,
}

fn diagnose(label: String, params: Vec<String>, dataset: &MultiTaskDataset, model: &GpModel) -> Result<ModelDiagnostics> {
    let mut residuals = Vec::new();
    for (t, task) in dataset.tasks.tasks().iter().enumerate() {
        let mut res = Vec::new();
        for row in dataset.rows.iter().filter(|r| r.task == t) {
            res.push(row.value - model.posterior(&row.point, t)?.mean);
        }
        residuals.push(TaskResiduals {
            task: task.name.clone(),
            max_abs: res.iter().fold(0.0, |m: f64, r| m.max(r.abs())),
            residuals: res,
            std_fallback: dataset.stats.tasks[t].fallback,
        });
    }
    let b = model.task_covariance();
    Ok(ModelDiagnostics {
        label,
        params,
        tasks: dataset.tasks.names().map(str::to_string).collect(),
        observations: dataset.num_observations,
        lengthscales: model.kernel().lengthscales().to_vec(),
        signal_variance: model.kernel().signal_variance(),
        noise_std: model.kernel().noise_variance().sqrt(),
        log_marginal_likelihood: model.log_marginal_likelihood(),
        task_covariance: (0..b.nrows()).map(|i| b.row(i).iter().copied().collect()).collect(),
        residuals,
    })
}

/// Refit the surrogate the log's strategy would use for its next step.
pub fn replay(history: &History) -> Result<ReplayReport> {
    let config = &history.tuner;
    let observations = history.observations();
    if observations.is_empty() {
        return Err(Error::NotFound("the log has no successful trial to fit on".into()));
    }
    let fit = fit_options(config, history.records.len() + 1);
    let all_params: Vec<String> = config.space.names().map(str::to_string).collect();
    let full = |tasks| -> Result<Vec<ModelDiagnostics>> {
        let dataset = build_dataset(&observations, &config.space, tasks)?;
        let model = fit_multitask(&dataset, &fit)?;
        Ok(vec![diagnose("full space".into(), all_params.clone(), &dataset, &model)?])
    };
    let models = match config.strategy {
        Strategy::Random => {
            return Err(Error::invalid("a random-strategy log has no surrogate to replay"));
        }
        Strategy::Gp => full(&config.tasks.primary_only())?,
        Strategy::Multitask => full(&config.tasks)?,
        Strategy::ClusteredMt => {
            let clusters = config.clusters.as_ref().ok_or_else(|| Error::config("clusters", "missing"))?;
            fit_clustered(&observations, &config.space, &config.tasks, clusters, &fit)?
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    diagnose(
                        format!("cluster {i}"),
                        m.resolved.cluster.params.clone(),
                        &m.dataset,
                        &m.model,
                    )
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(ReplayReport {
        strategy: config.strategy,
        trials: history.records.len(),
        ok_trials: observations.len(),
        models,
    })
}

impl ReplayReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "strategy {}: {} trials, {} ok", self.strategy, self.trials, self.ok_trials);
        for m in &self.models {
            let _ = writeln!(s, "\n[{}] {} observations", m.label, m.observations);
            let _ = writeln!(s, "  params: {}", m.params.join(", "));
            let _ = writeln!(s, "  lengthscales: {}", fmt_list(&m.lengthscales));
            let _ = writeln!(
                s,
                "  signal variance {:.6}, noise std {:.3e}, log marginal likelihood {:.4}",
                m.signal_variance, m.noise_std, m.log_marginal_likelihood
            );
            let _ = writeln!(s, "  task covariance B ({}):", m.tasks.join(", "));
            for row in &m.task_covariance {
                let _ = writeln!(s, "    {}", fmt_list(row));
            }
            for r in &m.residuals {
                let _ = writeln!(s, "  residuals {}: max |r| = {:.3e}", r.task, r.max_abs);
                if r.std_fallback {
                    let _ = writeln!(
                        s,
                        "    note: {} has fewer than two distinct values; standardized with std = 1",
                        r.task
                    );
                }
            }
        }
        s
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}
