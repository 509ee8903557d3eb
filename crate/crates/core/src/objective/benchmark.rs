//! db_bench subprocess adapter.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{Evaluation, Objective, ObjectiveFailure};
use crate::error::{Error, Result};
use crate::multitask::TaskRegistry;
use crate::space::{Configuration, ParamSpace};

/// Extra time granted to the process group after SIGKILL before giving up on its pipes.
const KILL_GRACE: Duration = Duration::from_secs(5);
const POLL_INTERVAL: Duration = Duration::from_millis(20);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricSource {
    Stdout,
    StatsFile,
}

/// How repeated matches of one pattern are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reducer {
    #[default]
    Last,
    Max,
    Mean,
}

impl Reducer {
    fn reduce(self, values: &[f64]) -> Option<f64> {
        let last = *values.last()?;
        Some(match self {
            Reducer::Last => last,
            Reducer::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Reducer::Mean => values.iter().sum::<f64>() / values.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricExtraction {
    pub task: String,
    /// Regular expression with exactly one capture group holding the number.
    pub pattern: String,
    pub source: MetricSource,
    #[serde(default)]
    pub reducer: Reducer,
}

impl MetricExtraction {
    fn compile(&self) -> Result<Regex> {
        let re = Regex::new(&self.pattern)
            .map_err(|e| Error::config("objective.extraction", format!("pattern for `{}`: {e}", self.task)))?;
        if re.captures_len() != 2 {
            return Err(Error::config(
                "objective.extraction",
                format!(
                    "pattern for `{}` must have exactly one capture group, found {}",
                    self.task,
                    re.captures_len() - 1
                ),
            ));
        }
        Ok(re)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    /// Shell command; `{name}` is replaced by the value of parameter `name`.
    pub command_template: String,
    #[serde(default)]
    pub working_dir: Option<PathBuf>,
    pub timeout_s: f64,
    /// File read for `stats-file` rules, relative to `working_dir`. Removed before each run.
    #[serde(default)]
    pub stats_file: Option<PathBuf>,
    pub extraction: Vec<MetricExtraction>,
}

fn placeholder_re() -> Regex {
    Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("static pattern")
}

impl ObjectiveSpec {
    pub fn validate(&self, space: &ParamSpace, tasks: &TaskRegistry) -> Result<()> {
        if !(self.timeout_s.is_finite() && self.timeout_s > 0.0) {
            return Err(Error::config("objective.timeout_s", "must be positive"));
        }
        let mut seen = BTreeSet::new();
        for cap in placeholder_re().captures_iter(&self.command_template) {
            let name = &cap[1];
            if space.index_of(name).is_none() {
                return Err(Error::config(
                    "objective.command_template",
                    format!("unknown placeholder `{{{name}}}`"),
                ));
            }
            if !seen.insert(name.to_string()) {
                return Err(Error::config(
                    "objective.command_template",
                    format!("parameter `{name}` appears more than once"),
                ));
            }
        }
        let mut rules: BTreeMap<&str, usize> = BTreeMap::new();
        for rule in &self.extraction {
            if tasks.index_of(&rule.task).is_none() {
                return Err(Error::config("objective.extraction", format!("unknown task `{}`", rule.task)));
            }
            rule.compile()?;
            *rules.entry(rule.task.as_str()).or_default() += 1;
            if rule.source == MetricSource::StatsFile && self.stats_file.is_none() {
                return Err(Error::config(
                    "objective.stats_file",
                    format!("rule for `{}` reads the stats file but none is configured", rule.task),
                ));
            }
        }
        for task in tasks.names() {
            match rules.get(task).copied().unwrap_or(0) {
                1 => {}
                0 => {
                    return Err(Error::config(
                        "objective.extraction",
                        format!("no extraction rule for task `{task}`"),
                    ))
                }
                n => {
                    return Err(Error::config(
                        "objective.extraction",
                        format!("task `{task}` has {n} extraction rules"),
                    ))
                }
            }
        }
        Ok(())
    }

    fn stats_path(&self) -> Option<PathBuf> {
        let file = self.stats_file.as_ref()?;
        Some(match &self.working_dir {
            Some(dir) if file.is_relative() => dir.join(file),
            _ => file.clone(),
        })
    }
}

/// Substitute every `{param}` placeholder with its value in `config`.
pub fn render_command(template: &str, space: &ParamSpace, config: &Configuration) -> Result<String> {
    space.validate(config)?;
    let mut err = None;
    let out = placeholder_re().replace_all(template, |cap: &regex::Captures<'_>| match space.index_of(&cap[1]) {
        Some(i) => config.values()[i].to_string(),
        None => {
            err.get_or_insert_with(|| Error::invalid(format!("unknown placeholder `{}`", &cap[0])));
            String::new()
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out.into_owned()),
    }
}

/// Apply every rule to its source text. Pure: the same text always gives the same values.
pub fn extract_metrics(
    rules: &[MetricExtraction],
    stdout: &str,
    stats: Option<&str>,
) -> Result<BTreeMap<String, f64>, ObjectiveFailure> {
    let mut out = BTreeMap::new();
    for rule in rules {
        let re = rule.compile().map_err(|e| ObjectiveFailure::new(e.to_string()))?;
        let text = match rule.source {
            MetricSource::Stdout => stdout,
            MetricSource::StatsFile => {
                stats.ok_or_else(|| ObjectiveFailure::new(format!("stats file unavailable for task `{}`", rule.task)))?
            }
        };
        let mut values = Vec::new();
        for cap in re.captures_iter(text) {
            let raw = &cap[1];
            let v: f64 = raw
                .parse()
                .map_err(|_| ObjectiveFailure::new(format!("task `{}`: captured `{raw}` is not a number", rule.task)))?;
            values.push(v);
        }
        let value = rule
            .reducer
            .reduce(&values)
            .ok_or_else(|| ObjectiveFailure::new(format!("no match for task `{}` (pattern `{}`)", rule.task, rule.pattern)))?;
        out.insert(rule.task.clone(), value);
    }
    Ok(out)
}

struct Captured {
    status: Option<ExitStatus>,
    stdout: String,
    stderr: String,
    timed_out: bool,
}

fn spawn_reader<R: Read + Send + 'static>(mut pipe: R) -> mpsc::Receiver<String> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = pipe.read_to_end(&mut buf);
        let _ = tx.send(String::from_utf8_lossy(&buf).into_owned());
    });
    rx
}

fn kill_group(child: &Child) {
    // The child leads its own process group, so this also reaches db_bench under `sh -c`.
    let pgid = child.id() as libc::pid_t;
    unsafe {
        libc::kill(-pgid, libc::SIGKILL);
    }
}

fn run_shell(command: &str, working_dir: Option<&Path>, timeout: Duration) -> std::io::Result<Captured> {
    let mut cmd = Command::new("sh");
    cmd.arg("-c")
        .arg(command)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    if let Some(dir) = working_dir {
        cmd.current_dir(dir);
    }
    let mut child = cmd.spawn()?;
    let out_rx = spawn_reader(child.stdout.take().expect("piped stdout"));
    let err_rx = spawn_reader(child.stderr.take().expect("piped stderr"));

    let deadline = Instant::now() + timeout;
    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break Some(status);
        }
        if Instant::now() >= deadline {
            timed_out = true;
            kill_group(&child);
            let grace = Instant::now() + KILL_GRACE;
            let mut status = None;
            while Instant::now() < grace {
                if let Some(s) = child.try_wait()? {
                    status = Some(s);
                    break;
                }
                thread::sleep(POLL_INTERVAL);
            }
            break status;
        }
        thread::sleep(POLL_INTERVAL);
    };
    // Leftover grandchildren may still hold the pipes open; don't wait on them forever.
    let wait = if timed_out { KILL_GRACE } else { KILL_GRACE + timeout };
    let stdout = out_rx.recv_timeout(wait).unwrap_or_default();
    let stderr = err_rx.recv_timeout(KILL_GRACE).unwrap_or_default();
    Ok(Captured {
        status,
        stdout,
        stderr,
        timed_out,
    })
}

/// Runs the rendered command through `sh -c` and extracts the task metrics.
#[derive(Debug, Clone)]
pub struct BenchmarkObjective {
    spec: ObjectiveSpec,
    space: ParamSpace,
}

impl BenchmarkObjective {
    pub fn new(spec: ObjectiveSpec, space: ParamSpace, tasks: &TaskRegistry) -> Result<Self> {
        spec.validate(&space, tasks)?;
        Ok(Self { spec, space })
    }

    pub fn spec(&self) -> &ObjectiveSpec {
        &self.spec
    }
}

impl Objective for BenchmarkObjective {
    fn evaluate(&mut self, config: &Configuration) -> Result<Evaluation, ObjectiveFailure> {
        let command =
            render_command(&self.spec.command_template, &self.space, config).map_err(|e| ObjectiveFailure::new(e.to_string()))?;
        let stats_path = self.spec.stats_path();
        if let Some(p) = &stats_path {
            // A stale file from the previous trial must not be mistaken for this one.
            let _ = std::fs::remove_file(p);
        }
        let started = Instant::now();
        let timeout = Duration::from_secs_f64(self.spec.timeout_s);
        let run = run_shell(&command, self.spec.working_dir.as_deref(), timeout)
            .map_err(|e| ObjectiveFailure::new(format!("failed to launch benchmark: {e}")))?;
        let wall_time = started.elapsed().as_secs_f64();
        let transcript = format!("{}{}", run.stdout, run.stderr);
        if run.timed_out {
            return Err(
                ObjectiveFailure::new(format!("benchmark timed out after {} s", self.spec.timeout_s)).with_output(&transcript),
            );
        }
        match run.status {
            Some(s) if s.success() => {}
            Some(s) => {
                return Err(ObjectiveFailure::new(format!("benchmark exited with {s}")).with_output(&transcript));
            }
            None => return Err(ObjectiveFailure::new("benchmark did not exit").with_output(&transcript)),
        }
        let stats = match &stats_path {
            Some(p) => std::fs::read_to_string(p).ok(),
            None => None,
        };
        let values =
            extract_metrics(&self.spec.extraction, &run.stdout, stats.as_deref()).map_err(|e| e.with_output(&transcript))?;
        Ok(Evaluation { values, wall_time })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multitask::{Direction, TaskSpec};
    use crate::space::ParamSpec;

    fn space() -> ParamSpace {
        ParamSpace::new(vec![
            ParamSpec::new("write_buffer_size", 1 << 20, 1 << 30, 64 << 20).unwrap(),
            ParamSpec::new("block_size", 1024, 1 << 20, 4096).unwrap(),
        ])
        .unwrap()
    }

    fn tasks() -> TaskRegistry {
        TaskRegistry::new(vec![
            TaskSpec::new("iops", Direction::Maximize, true),
            TaskSpec::new("lat", Direction::Minimize, false),
        ])
        .unwrap()
    }

    fn rule(task: &str, pattern: &str) -> MetricExtraction {
        MetricExtraction {
            task: task.into(),
            pattern: pattern.into(),
            source: MetricSource::Stdout,
            reducer: Reducer::Last,
        }
    }

    fn spec(template: &str) -> ObjectiveSpec {
        ObjectiveSpec {
            command_template: template.into(),
            working_dir: None,
            timeout_s: 5.0,
            stats_file: None,
            extraction: vec![rule("iops", r"iops=([0-9.]+)"), rule("lat", r"lat=([0-9.]+)")],
        }
    }

    #[test]
    fn renders_flags() {
        let s = space();
        let c = Configuration::new(vec![67108864, 8192]);
        let cmd = render_command("db --write_buffer_size={write_buffer_size} -b={block_size}", &s, &c).unwrap();
        assert_eq!(cmd, "db --write_buffer_size=67108864 -b=8192");
        assert!(render_command("x={nope}", &s, &c).is_err());
    }

    #[test]
    fn validation() {
        let s = space();
        let t = tasks();
        spec("echo {block_size}").validate(&s, &t).unwrap();
        assert!(spec("echo {block_size} {block_size}").validate(&s, &t).is_err());
        assert!(spec("echo {unknown}").validate(&s, &t).is_err());
        let mut two = spec("echo");
        two.extraction.push(rule("lat", "x([0-9])"));
        assert!(two.validate(&s, &t).is_err());
        let mut groups = spec("echo");
        groups.extraction[0].pattern = r"(a)(b)".into();
        assert!(groups
            .validate(&s, &t)
            .unwrap_err()
            .to_string()
            .contains("exactly one capture group"));
        let mut missing = spec("echo");
        missing.extraction.pop();
        assert!(missing.validate(&s, &t).unwrap_err().to_string().contains("lat"));
    }

    #[test]
    fn reducers() {
        let text = "lat=3\nlat=9\nlat=6\n";
        for (reducer, want) in [(Reducer::Last, 6.0), (Reducer::Max, 9.0), (Reducer::Mean, 6.0)] {
            let mut r = rule("lat", r"lat=([0-9.]+)");
            r.reducer = reducer;
            assert_eq!(extract_metrics(&[r], text, None).unwrap()["lat"], want);
        }
    }

    #[test]
    fn runs_subprocess() {
        let s = space();
        let mut obj = BenchmarkObjective::new(spec("echo iops={block_size}; echo lat=2.5"), s, &tasks()).unwrap();
        let e = obj.evaluate(&Configuration::new(vec![1 << 20, 4096])).unwrap();
        assert_eq!(e.values["iops"], 4096.0);
        assert_eq!(e.values["lat"], 2.5);
    }

    #[test]
    fn failure_paths() {
        let s = space();
        let c = Configuration::new(vec![1 << 20, 4096]);
        let mut obj = BenchmarkObjective::new(spec("echo iops=1; echo boom >&2; exit 3"), s.clone(), &tasks()).unwrap();
        let f = obj.evaluate(&c).unwrap_err();
        assert!(f.message.contains("exited"), "{}", f.message);
        assert!(f.output_tail.contains("boom"));

        let mut obj = BenchmarkObjective::new(spec("echo iops=1"), s.clone(), &tasks()).unwrap();
        assert!(obj.evaluate(&c).unwrap_err().message.contains("`lat`"));
    }

    #[test]
    fn timeout_kills_process_group() {
        let mut sp = spec("sleep 30 & sleep 30; echo iops=1 lat=1");
        sp.timeout_s = 0.3;
        let mut obj = BenchmarkObjective::new(sp, space(), &tasks()).unwrap();
        let started = Instant::now();
        let f = obj.evaluate(&Configuration::new(vec![1 << 20, 4096])).unwrap_err();
        assert!(f.message.contains("timed out"));
        assert!(started.elapsed() < Duration::from_secs(5));
    }
}
