//! Exact Gaussian-process regression over unit-cube inputs, single- or multi-task.

mod fit;
mod kernel;
mod model;

pub use fit::{fit, initial_log_marginal_likelihood, FitOptions};
pub use kernel::{base_kernel, icm_kernel, KernelParams, TaskKernel};
pub use model::{GpModel, GpSnapshot, PosteriorGaussian, TaskInput, TrainingData, JITTER_LEVELS};
