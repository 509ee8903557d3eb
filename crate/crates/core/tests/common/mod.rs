//! Reference implementations used as test oracles. Nothing here calls into the
//! library's linear algebra or kernels.

#![allow(dead_code)]

use std::path::PathBuf;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Jitter the model always adds to the diagonal at the first escalation level.
pub const BASE_JITTER: f64 = 1e-8;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("data")
}

/// Gauss-Jordan inverse with partial pivoting. Returns the inverse and `ln |det a|`.
pub fn invert(a: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut inv: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
        .collect();
    let mut log_det = 0.0;
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).unwrap();
        assert!(m[pivot][col].abs() > 0.0, "singular matrix");
        m.swap(col, pivot);
        inv.swap(col, pivot);
        let p = m[col][col];
        log_det += p.abs().ln();
        for j in 0..n {
            m[col][j] /= p;
            inv[col][j] /= p;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = m[i][col];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                m[i][j] -= f * m[col][j];
                inv[i][j] -= f * inv[col][j];
            }
        }
    }
    (inv, log_det)
}

pub fn mat_vec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Squared-exponential ARD kernel.
pub fn se_ard(x: &[f64], y: &[f64], ell: &[f64], s2: f64) -> f64 {
    let mut r2 = 0.0;
    for d in 0..x.len() {
        r2 += ((x[d] - y[d]) / ell[d]).powi(2);
    }
    s2 * (-0.5 * r2).exp()
}

/// Dense-inverse GP on `(point, task)` rows with task covariance `b`.
pub struct DenseGp {
    pub points: Vec<Vec<f64>>,
    pub tasks: Vec<usize>,
    pub b: Vec<Vec<f64>>,
    pub ell: Vec<f64>,
    pub s2: f64,
    pub mean: f64,
    pub kinv: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub lml: f64,
}

impl DenseGp {
    /// `diag_add` is added to every diagonal entry (noise plus jitter).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        points: Vec<Vec<f64>>,
        tasks: Vec<usize>,
        targets: &[f64],
        b: Vec<Vec<f64>>,
        ell: Vec<f64>,
        s2: f64,
        diag_add: f64,
        mean: f64,
    ) -> Self {
        let n = points.len();
        let k: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        se_ard(&points[i], &points[j], &ell, s2) * b[tasks[i]][tasks[j]] + if i == j { diag_add } else { 0.0 }
                    })
                    .collect()
            })
            .collect();
        let (kinv, log_det) = invert(&k);
        let r: Vec<f64> = targets.iter().map(|y| y - mean).collect();
        let alpha = mat_vec(&kinv, &r);
        let lml = -0.5 * dot(&r, &alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        Self {
            points,
            tasks,
            b,
            ell,
            s2,
            mean,
            kinv,
            alpha,
            lml,
        }
    }

    pub fn posterior(&self, x: &[f64], task: usize) -> (f64, f64) {
        let kstar: Vec<f64> = self
            .points
            .iter()
            .zip(&self.tasks)
            .map(|(p, &t)| se_ard(x, p, &self.ell, self.s2) * self.b[task][t])
            .collect();
        let mean = self.mean + dot(&kstar, &self.alpha);
        let var = self.s2 * self.b[task][task] - dot(&kstar, &mat_vec(&self.kinv, &kstar));
        (mean, var.max(0.0))
    }
}

pub fn uniform_point(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random::<f64>()).collect()
}

/// `|a - b| <= tol * max(|b|, floor)`.
pub fn close(a: f64, b: f64, tol: f64, floor: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(floor)
}

/// Population mean and variance.
pub fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
