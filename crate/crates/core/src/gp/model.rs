use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::kernel::{KernelParams, TaskKernel};
use crate::error::{Error, Result};
use crate::space::UnitPoint;

/// Diagonal jitter levels tried in order when the Cholesky factorization fails.
pub const JITTER_LEVELS: [f64; 3] = [1e-8, 1e-6, 1e-4];

/// A training input: a unit-cube point tagged with the task it was observed on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInput {
    pub point: UnitPoint,
    pub task: usize,
}

impl TaskInput {
    pub fn new(point: UnitPoint, task: usize) -> Self {
        Self { point, task }
    }
}

/// Stacked `(point, task) -> target` rows for exact GP regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingData {
    pub inputs: Vec<TaskInput>,
    pub targets: Vec<f64>,
    pub num_tasks: usize,
}

impl TrainingData {
    pub fn new(inputs: Vec<TaskInput>, targets: Vec<f64>, num_tasks: usize) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::invalid("training data must contain at least one row"));
        }
        if inputs.len() != targets.len() {
            return Err(Error::invalid(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        if num_tasks == 0 {
            return Err(Error::invalid("num_tasks must be positive"));
        }
        let dim = inputs[0].point.len();
        if dim == 0 {
            return Err(Error::invalid("inputs must have at least one dimension"));
        }
        for row in &inputs {
            if row.point.len() != dim {
                return Err(Error::invalid("all training points must share one dimension"));
            }
            if row.task >= num_tasks {
                return Err(Error::invalid(format!(
                    "task id {} out of range for {num_tasks} tasks",
                    row.task
                )));
            }
        }
        if targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("targets must be finite"));
        }
        Ok(Self {
            inputs,
            targets,
            num_tasks,
        })
    }

    /// Single-task data; every row gets task id 0.
    pub fn single_task(points: Vec<UnitPoint>, targets: Vec<f64>) -> Result<Self> {
        let inputs = points.into_iter().map(|p| TaskInput::new(p, 0)).collect();
        Self::new(inputs, targets, 1)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.inputs[0].point.len()
    }

    pub fn target_mean(&self) -> f64 {
        self.targets.iter().sum::<f64>() / self.targets.len() as f64
    }
}

/// Gaussian predictive marginal at one query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorGaussian {
    pub mean: f64,
    pub variance: f64,
}

impl PosteriorGaussian {
    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Exact GP conditioned on training data, with an optional ICM task kernel.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "GpSnapshot", try_from = "GpSnapshot")]
pub struct GpModel {
    data: TrainingData,
    mean: f64,
    params: KernelParams,
    tasks: Option<TaskKernel>,
    jitter: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

/// Serialized form of a fitted model. The factorization is recomputed on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpSnapshot {
    pub kernel: KernelParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_kernel: Option<TaskKernel>,
    pub mean: f64,
    pub data: TrainingData,
}

impl From<GpModel> for GpSnapshot {
    fn from(m: GpModel) -> Self {
        GpSnapshot {
            kernel: m.params,
            task_kernel: m.tasks,
            mean: m.mean,
            data: m.data,
        }
    }
}

impl TryFrom<GpSnapshot> for GpModel {
    type Error = Error;

    fn try_from(s: GpSnapshot) -> Result<Self> {
        GpModel::condition_with_mean(s.data, s.kernel, s.task_kernel, s.mean)
    }
}

pub(crate) fn task_cov(tasks: Option<&TaskKernel>, m: usize, m2: usize) -> f64 {
    tasks.map_or(1.0, |tk| tk.get(m, m2))
}

/// Prior covariance of the training inputs, without noise.
pub(crate) fn prior_covariance(params: &KernelParams, tasks: Option<&TaskKernel>, inputs: &[TaskInput]) -> DMatrix<f64> {
    let n = inputs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        let a = &inputs[i];
        for j in 0..=i {
            let b = &inputs[j];
            let v = params.eval_unchecked(a.point.coords(), b.point.coords()) * task_cov(tasks, a.task, b.task);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky of `k + (noise + jitter) I`, escalating the jitter on failure.
pub(crate) fn factorize(k: &DMatrix<f64>, noise: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    for &jitter in &JITTER_LEVELS {
        let mut reg = k.clone();
        for i in 0..reg.nrows() {
            reg[(i, i)] += noise + jitter;
        }
        if let Some(chol) = reg.cholesky() {
            return Ok((chol, jitter));
        }
        log::debug!("cholesky failed with jitter {jitter:e}; escalating");
    }
    Err(Error::NotPositiveDefinite {
        attempted: JITTER_LEVELS.to_vec(),
    })
}

pub(crate) fn check_model_shape(data: &TrainingData, params: &KernelParams, tasks: Option<&TaskKernel>) -> Result<()> {
    if params.dimension() != data.dimension() {
        return Err(Error::invalid(format!(
            "kernel has {} lengthscales but inputs are {}-dimensional",
            params.dimension(),
            data.dimension()
        )));
    }
    match tasks {
        Some(tk) if tk.num_tasks() != data.num_tasks => Err(Error::invalid(format!(
            "task kernel covers {} tasks but data has {}",
            tk.num_tasks(),
            data.num_tasks
        ))),
        None if data.num_tasks > 1 => Err(Error::invalid("multi-task data requires a task kernel")),
        _ => Ok(()),
    }
}

impl GpModel {
    /// Condition on `data` with fixed hyperparameters; the constant mean is the target mean.
    pub fn condition(data: TrainingData, params: KernelParams, tasks: Option<TaskKernel>) -> Result<Self> {
        let mean = data.target_mean();
        Self::condition_with_mean(data, params, tasks, mean)
    }

    pub fn condition_with_mean(data: TrainingData, params: KernelParams, tasks: Option<TaskKernel>, mean: f64) -> Result<Self> {
        check_model_shape(&data, &params, tasks.as_ref())?;
        let k = prior_covariance(&params, tasks.as_ref(), &data.inputs);
        let (chol, jitter) = factorize(&k, params.noise_variance())?;
        let resid = DVector::from_iterator(data.len(), data.targets.iter().map(|y| y - mean));
        let alpha = chol.solve(&resid);
        Ok(Self {
            data,
            mean,
            params,
            tasks,
            jitter,
            chol,
            alpha,
        })
    }

    pub fn data(&self) -> &TrainingData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.params.dimension()
    }

    pub fn num_tasks(&self) -> usize {
        self.data.num_tasks
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.params
    }

    pub fn task_kernel(&self) -> Option<&TaskKernel> {
        self.tasks.as_ref()
    }

    /// The `T x T` task covariance (`[[1]]` for a plain single-task model).
    pub fn task_covariance(&self) -> DMatrix<f64> {
        match &self.tasks {
            Some(tk) => tk.covariance().clone(),
            None => DMatrix::from_element(1, 1, 1.0),
        }
    }

    /// Jitter that was added to the diagonal on top of the noise variance.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower-triangular Cholesky factor of `K + (noise + jitter) I`.
    pub fn factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// `K + (noise + jitter) I` over the training inputs.
    pub fn regularized_covariance(&self) -> DMatrix<f64> {
        let mut k = prior_covariance(&self.params, self.tasks.as_ref(), &self.data.inputs);
        for i in 0..k.nrows() {
            k[(i, i)] += self.params.noise_variance() + self.jitter;
        }
        k
    }

    pub fn prior_variance(&self, task: usize) -> f64 {
        self.params.signal_variance() * task_cov(self.tasks.as_ref(), task, task)
    }

    fn check_query(&self, x: &UnitPoint, task: usize) -> Result<()> {
        if x.len() != self.dimension() {
            return Err(Error::invalid(format!(
                "query has dimension {} but model expects {}",
                x.len(),
                self.dimension()
            )));
        }
        if task >= self.num_tasks() {
            return Err(Error::invalid(format!(
                "task id {task} out of range for {} tasks",
                self.num_tasks()
            )));
        }
        Ok(())
    }

    fn cross_covariance(&self, x: &[f64], task: usize) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.data
                .inputs
                .iter()
                .map(|row| self.params.eval_unchecked(x, row.point.coords()) * task_cov(self.tasks.as_ref(), task, row.task)),
        )
    }

    /// Predictive mean and latent variance of task `task` at `x`.
    pub fn posterior(&self, x: &UnitPoint, task: usize) -> Result<PosteriorGaussian> {
        self.check_query(x, task)?;
        Ok(self.posterior_unchecked(x.coords(), task))
    }

    pub(crate) fn posterior_unchecked(&self, x: &[f64], task: usize) -> PosteriorGaussian {
        let kstar = self.cross_covariance(x, task);
        let mean = self.mean + kstar.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&kstar)
            .expect("cholesky factor has a non-zero diagonal");
        let variance = (self.prior_variance(task) - v.norm_squared()).max(0.0);
        PosteriorGaussian { mean, variance }
    }

    /// `-1/2 r^T alpha - sum log diag(L) - n/2 log 2 pi` with `r = y - mean`.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.len() as f64;
        let fit: f64 = self
            .data
            .targets
            .iter()
            .zip(self.alpha.iter())
            .map(|(y, a)| (y - self.mean) * a)
            .sum();
        let l = self.chol.l_dirty();
        let log_det_half: f64 = (0..self.len()).map(|i| l[(i, i)].ln()).sum();
        -0.5 * fit - log_det_half - 0.5 * n * (2.0 * PI).ln()
    }
}
