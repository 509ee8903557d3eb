use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::UnitPoint;

/// Hyperparameters of the ARD squared-exponential input kernel plus observation noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKernelParams")]
pub struct KernelParams {
    lengthscales: Vec<f64>,
    signal_variance: f64,
    noise_variance: f64,
}

#[derive(Deserialize)]
struct RawKernelParams {
    lengthscales: Vec<f64>,
    signal_variance: f64,
    noise_variance: f64,
}

impl TryFrom<RawKernelParams> for KernelParams {
    type Error = Error;

    fn try_from(raw: RawKernelParams) -> Result<Self> {
        KernelParams::new(raw.lengthscales, raw.signal_variance, raw.noise_variance)
    }
}

impl KernelParams {
    pub fn new(lengthscales: Vec<f64>, signal_variance: f64, noise_variance: f64) -> Result<Self> {
        if lengthscales.is_empty() {
            return Err(Error::invalid("at least one lengthscale is required"));
        }
        if lengthscales.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::invalid("lengthscales must be positive and finite"));
        }
        if !(signal_variance.is_finite() && signal_variance > 0.0) {
            return Err(Error::invalid("signal variance must be positive and finite"));
        }
        if !(noise_variance.is_finite() && noise_variance >= 0.0) {
            return Err(Error::invalid("noise variance must be non-negative and finite"));
        }
        Ok(Self {
            lengthscales,
            signal_variance,
            noise_variance,
        })
    }

    /// Same lengthscale `ell` for all `dim` inputs.
    pub fn isotropic(dim: usize, ell: f64, signal_variance: f64, noise_variance: f64) -> Result<Self> {
        Self::new(vec![ell; dim], signal_variance, noise_variance)
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn signal_variance(&self) -> f64 {
        self.signal_variance
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn dimension(&self) -> usize {
        self.lengthscales.len()
    }

    pub(crate) fn eval_unchecked(&self, x: &[f64], x2: &[f64]) -> f64 {
        let r2: f64 = x
            .iter()
            .zip(x2)
            .zip(&self.lengthscales)
            .map(|((a, b), l)| {
                let d = (a - b) / l;
                d * d
            })
            .sum();
        self.signal_variance * (-0.5 * r2).exp()
    }
}

/// `signal_variance * exp(-1/2 * sum_d ((x_d - x2_d) / l_d)^2)`.
pub fn base_kernel(params: &KernelParams, x: &UnitPoint, x2: &UnitPoint) -> Result<f64> {
    let d = params.dimension();
    if x.len() != d || x2.len() != d {
        return Err(Error::invalid(format!(
            "kernel expects {d}-dimensional inputs, got {} and {}",
            x.len(),
            x2.len()
        )));
    }
    Ok(params.eval_unchecked(x.coords(), x2.coords()))
}

/// Task-similarity matrix `B = L L^T + diag(v)` of the intrinsic coregionalization model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTaskKernel", into = "RawTaskKernel")]
pub struct TaskKernel {
    factor: DMatrix<f64>,
    diag: Vec<f64>,
    covariance: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawTaskKernel {
    /// Row-major rows of `L`.
    factor: Vec<Vec<f64>>,
    diag: Vec<f64>,
}

impl TryFrom<RawTaskKernel> for TaskKernel {
    type Error = Error;

    fn try_from(raw: RawTaskKernel) -> Result<Self> {
        let rows = raw.factor.len();
        let cols = raw.factor.first().map_or(0, Vec::len);
        if raw.factor.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("task kernel factor rows have unequal length"));
        }
        let factor = DMatrix::from_fn(rows, cols, |i, j| raw.factor[i][j]);
        TaskKernel::new(factor, raw.diag)
    }
}

impl From<TaskKernel> for RawTaskKernel {
    fn from(tk: TaskKernel) -> Self {
        let factor = (0..tk.factor.nrows())
            .map(|i| tk.factor.row(i).iter().copied().collect())
            .collect();
        RawTaskKernel { factor, diag: tk.diag }
    }
}

impl TaskKernel {
    pub fn new(factor: DMatrix<f64>, diag: Vec<f64>) -> Result<Self> {
        let t = diag.len();
        if t == 0 {
            return Err(Error::invalid("task kernel needs at least one task"));
        }
        if factor.nrows() != t {
            return Err(Error::invalid(format!(
                "task kernel factor has {} rows for {t} tasks",
                factor.nrows()
            )));
        }
        if diag.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || factor.iter().any(|f| !f.is_finite()) {
            return Err(Error::invalid(
                "task kernel entries must be finite with non-negative diagonal",
            ));
        }
        let mut covariance = &factor * factor.transpose();
        for (i, v) in diag.iter().enumerate() {
            covariance[(i, i)] += v;
        }
        // L L^T is symmetric only up to rounding; store an exactly symmetric copy.
        for i in 0..t {
            for j in 0..i {
                let s = 0.5 * (covariance[(i, j)] + covariance[(j, i)]);
                covariance[(i, j)] = s;
                covariance[(j, i)] = s;
            }
        }
        if (0..t).any(|i| covariance[(i, i)] <= 0.0) {
            return Err(Error::invalid("task kernel has a non-positive diagonal entry"));
        }
        Ok(Self {
            factor,
            diag,
            covariance,
        })
    }

    /// `B = I`: tasks are independent.
    pub fn identity(num_tasks: usize) -> Self {
        Self::new(DMatrix::zeros(num_tasks, num_tasks), vec![1.0; num_tasks]).expect("identity task kernel is valid")
    }

    /// Starting point of fitting: `L = 0.5 I`, `v = 0.1`.
    pub fn initial(num_tasks: usize) -> Self {
        Self::new(DMatrix::identity(num_tasks, num_tasks) * 0.5, vec![0.1; num_tasks]).expect("initial task kernel is valid")
    }

    /// Task kernel with a prescribed covariance matrix `B` (factored via Cholesky, `v = 0`).
    pub fn from_covariance(b: &DMatrix<f64>) -> Result<Self> {
        if !b.is_square() {
            return Err(Error::invalid("task covariance must be square"));
        }
        let chol = b
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("task covariance is not positive definite"))?;
        Self::new(chol.l(), vec![0.0; b.nrows()])
    }

    pub fn num_tasks(&self) -> usize {
        self.diag.len()
    }

    pub fn rank(&self) -> usize {
        self.factor.ncols()
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn get(&self, m: usize, m2: usize) -> f64 {
        self.covariance[(m, m2)]
    }
}

/// `k((x, m), (x2, m2)) = k_x(x, x2) * B[m][m2]`.
pub fn icm_kernel(params: &KernelParams, tasks: &TaskKernel, x: &UnitPoint, m: usize, x2: &UnitPoint, m2: usize) -> Result<f64> {
    let t = tasks.num_tasks();
    if m >= t || m2 >= t {
        return Err(Error::invalid(format!("task ids ({m}, {m2}) out of range for {t} tasks")));
    }
    Ok(base_kernel(params, x, x2)? * tasks.get(m, m2))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(c: &[f64]) -> UnitPoint {
        UnitPoint::new(c.to_vec()).unwrap()
    }

    #[test]
    fn base_kernel_values() {
        let p = KernelParams::new(vec![1.0], 1.0, 0.0).unwrap();
        let a = pt(&[0.0]);
        let b = pt(&[1.0]);
        assert_eq!(base_kernel(&p, &a, &a).unwrap(), 1.0);
        assert_eq!(base_kernel(&p, &a, &b).unwrap(), (-0.5f64).exp());

        let p = KernelParams::new(vec![0.3, 2.0], 2.5, 0.0).unwrap();
        let a = pt(&[0.1, 0.9]);
        let b = pt(&[0.7, 0.2]);
        assert_eq!(base_kernel(&p, &a, &a).unwrap(), 2.5);
        assert_eq!(base_kernel(&p, &a, &b).unwrap(), base_kernel(&p, &b, &a).unwrap());
        assert!(base_kernel(&p, &a, &pt(&[0.1])).is_err());
    }

    #[test]
    fn icm_products() {
        let p = KernelParams::new(vec![0.5], 1.0, 0.0).unwrap();
        let a = pt(&[0.2]);
        let b = pt(&[0.6]);
        let id = TaskKernel::identity(2);
        assert_eq!(icm_kernel(&p, &id, &a, 0, &b, 1).unwrap(), 0.0);
        assert_eq!(icm_kernel(&p, &id, &a, 1, &b, 1).unwrap(), base_kernel(&p, &a, &b).unwrap());
        assert!(icm_kernel(&p, &id, &a, 2, &b, 0).is_err());

        // B[0][1] = 0.5 and a base kernel value of 0.8.
        let b01 = TaskKernel::from_covariance(&DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0])).unwrap();
        let x = pt(&[0.0]);
        let dist = (-2.0 * 0.8f64.ln()).sqrt();
        let x2 = pt(&[dist]);
        let p1 = KernelParams::new(vec![1.0], 1.0, 0.0).unwrap();
        let k = icm_kernel(&p1, &b01, &x, 0, &x2, 1).unwrap();
        assert!((k - 0.4).abs() < 1e-12, "{k}");
    }

    #[test]
    fn task_kernel_is_symmetric_psd() {
        let f = DMatrix::from_row_slice(3, 3, &[0.5, 0.0, 0.0, -0.3, 0.2, 0.0, 1.1, 0.4, 0.7]);
        let tk = TaskKernel::new(f, vec![0.1, 0.0, 0.2]).unwrap();
        let b = tk.covariance();
        assert_eq!(b, &b.transpose());
        let eig = b.clone().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&e| e >= -1e-12));
        assert!(TaskKernel::new(DMatrix::zeros(2, 2), vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn task_kernel_json_round_trip() {
        let tk = TaskKernel::initial(3);
        let back: TaskKernel = serde_json::from_str(&serde_json::to_string(&tk).unwrap()).unwrap();
        assert_eq!(back, tk);
    }
}
