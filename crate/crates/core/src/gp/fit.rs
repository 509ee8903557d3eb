//! Type-II maximum likelihood for [`GpModel`] hyperparameters.
//!
//! The search runs over log-transformed kernel parameters (and the raw entries
//! of the task-kernel factor) with a derivative-free multi-start coordinate
//! search. Every line search is a bracketed golden-section step around the
//! current value, and a step is only taken when it improves the likelihood,
//! so the first start (the initial hyperparameters) bounds the result from
//! below.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernel::{KernelParams, TaskKernel};
use super::model::{factorize, prior_covariance, GpModel, TrainingData};
use crate::error::{Error, Result};

const GOLDEN: f64 = 0.618_033_988_749_894_9;

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub seed: u64,
    pub starts: usize,
    pub evals_per_start: usize,
    /// Golden-section iterations per coordinate line search.
    pub line_iters: usize,
    pub lengthscale_bounds: (f64, f64),
    pub signal_bounds: (f64, f64),
    pub noise_bounds: (f64, f64),
    pub task_factor_bounds: (f64, f64),
    pub task_diag_bounds: (f64, f64),
    pub initial_lengthscale: f64,
    pub initial_signal: f64,
    pub initial_noise: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            starts: 8,
            evals_per_start: 200,
            line_iters: 3,
            lengthscale_bounds: (1e-3, 10.0),
            signal_bounds: (1e-4, 10.0),
            noise_bounds: (1e-6, 1.0),
            task_factor_bounds: (-2.0, 2.0),
            task_diag_bounds: (1e-4, 10.0),
            initial_lengthscale: 0.5,
            initial_signal: 1.0,
            initial_noise: 1e-2,
        }
    }
}

impl FitOptions {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }
}

/// Layout of the flat search vector:
/// `[ln l_1..ln l_D, ln s2, ln noise, L_ij (i >= j, row-major), ln v_1..ln v_T]`,
/// the task block present only when `T > 1`.
struct Encoding {
    dim: usize,
    num_tasks: usize,
}

impl Encoding {
    fn multitask(&self) -> bool {
        self.num_tasks > 1
    }

    fn factor_len(&self) -> usize {
        self.num_tasks * (self.num_tasks + 1) / 2
    }

    fn len(&self) -> usize {
        let base = self.dim + 2;
        if self.multitask() {
            base + self.factor_len() + self.num_tasks
        } else {
            base
        }
    }

    fn layout(&self, opts: &FitOptions) -> Vec<(f64, f64)> {
        let log = |(lo, hi): (f64, f64)| (lo.ln(), hi.ln());
        let mut out = Vec::with_capacity(self.len());
        out.extend((0..self.dim).map(|_| log(opts.lengthscale_bounds)));
        out.push(log(opts.signal_bounds));
        out.push(log(opts.noise_bounds));
        if self.multitask() {
            let (lo, hi) = opts.task_factor_bounds;
            out.extend((0..self.factor_len()).map(|_| (lo, hi)));
            out.extend((0..self.num_tasks).map(|_| log(opts.task_diag_bounds)));
        }
        out
    }

    fn initial(&self, opts: &FitOptions) -> Vec<f64> {
        let mut theta = vec![opts.initial_lengthscale.ln(); self.dim];
        theta.push(opts.initial_signal.ln());
        theta.push(opts.initial_noise.ln());
        if self.multitask() {
            let tk = TaskKernel::initial(self.num_tasks);
            for i in 0..self.num_tasks {
                for j in 0..=i {
                    theta.push(tk.factor()[(i, j)]);
                }
            }
            theta.extend(tk.diag().iter().map(|v| v.ln()));
        }
        theta
    }

    /// Random start inside a box of plausible values for standardized targets on the unit cube.
    fn random_start(&self, rng: &mut ChaCha8Rng, layout: &[(f64, f64)]) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.len());
        let unif = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| rng.random_range(lo..=hi);
        theta.extend((0..self.dim).map(|_| unif(rng, 0.05f64.ln(), 2.0f64.ln())));
        theta.push(unif(rng, 0.1f64.ln(), 3.0f64.ln()));
        theta.push(unif(rng, 1e-6f64.ln(), 0.1f64.ln()));
        if self.multitask() {
            theta.extend((0..self.factor_len()).map(|_| unif(rng, -1.0, 1.0)));
            theta.extend((0..self.num_tasks).map(|_| unif(rng, 0.01f64.ln(), 1.0f64.ln())));
        }
        clamp_into(&mut theta, layout);
        theta
    }

    fn decode(&self, theta: &[f64]) -> Result<(KernelParams, Option<TaskKernel>)> {
        let ls = theta[..self.dim].iter().map(|v| v.exp()).collect();
        let params = KernelParams::new(ls, theta[self.dim].exp(), theta[self.dim + 1].exp())?;
        if !self.multitask() {
            return Ok((params, None));
        }
        let t = self.num_tasks;
        let mut factor = DMatrix::zeros(t, t);
        let mut k = self.dim + 2;
        for i in 0..t {
            for j in 0..=i {
                factor[(i, j)] = theta[k];
                k += 1;
            }
        }
        let diag = theta[k..k + t].iter().map(|v| v.exp()).collect();
        Ok((params, Some(TaskKernel::new(factor, diag)?)))
    }
}

fn clamp_into(theta: &mut [f64], layout: &[(f64, f64)]) {
    for (v, (lo, hi)) in theta.iter_mut().zip(layout) {
        *v = v.clamp(*lo, *hi);
    }
}

/// Log marginal likelihood for a hyperparameter setting, `None` when it cannot be factorized.
fn lml_at(data: &TrainingData, params: &KernelParams, tasks: Option<&TaskKernel>, mean: f64) -> Option<f64> {
    let k = prior_covariance(params, tasks, &data.inputs);
    let (chol, _) = factorize(&k, params.noise_variance()).ok()?;
    let resid = DVector::from_iterator(data.len(), data.targets.iter().map(|y| y - mean));
    let alpha = chol.solve(&resid);
    let l = chol.l_dirty();
    let log_det_half: f64 = (0..data.len()).map(|i| l[(i, i)].ln()).sum();
    let value = -0.5 * resid.dot(&alpha) - log_det_half - 0.5 * data.len() as f64 * (2.0 * std::f64::consts::PI).ln();
    value.is_finite().then_some(value)
}

struct Search<'a, F> {
    objective: F,
    layout: &'a [(f64, f64)],
    budget: usize,
    evals: usize,
    line_iters: usize,
}

impl<F: FnMut(&[f64]) -> f64> Search<'_, F> {
    fn eval(&mut self, theta: &[f64]) -> f64 {
        self.evals += 1;
        (self.objective)(theta)
    }

    /// Coordinate-wise golden-section ascent from `start`, shrinking the bracket each sweep.
    fn run(&mut self, start: Vec<f64>) -> (Vec<f64>, f64) {
        let mut x = start;
        let mut fx = self.eval(&x);
        let mut radius: Vec<f64> = self.layout.iter().map(|(lo, hi)| 0.25 * (hi - lo)).collect();

        'sweeps: while self.evals < self.budget {
            for i in 0..x.len() {
                if self.evals + 2 > self.budget {
                    break 'sweeps;
                }
                let (lo, hi) = self.layout[i];
                let mut a = (x[i] - radius[i]).max(lo);
                let mut b = (x[i] + radius[i]).min(hi);
                if b - a <= 1e-12 {
                    continue;
                }
                let mut probe = x.clone();
                let mut at = |v: f64, s: &mut Self| {
                    probe[i] = v;
                    s.eval(&probe)
                };
                let mut c = b - GOLDEN * (b - a);
                let mut d = a + GOLDEN * (b - a);
                let mut fc = at(c, self);
                let mut fd = at(d, self);
                let (mut best_v, mut best_f) = if fd > fc { (d, fd) } else { (c, fc) };
                for _ in 0..self.line_iters {
                    if self.evals >= self.budget {
                        break;
                    }
                    if fc >= fd {
                        b = d;
                        d = c;
                        fd = fc;
                        c = b - GOLDEN * (b - a);
                        fc = at(c, self);
                        if fc > best_f {
                            (best_v, best_f) = (c, fc);
                        }
                    } else {
                        a = c;
                        c = d;
                        fc = fd;
                        d = a + GOLDEN * (b - a);
                        fd = at(d, self);
                        if fd > best_f {
                            (best_v, best_f) = (d, fd);
                        }
                    }
                }
                if best_f > fx {
                    x[i] = best_v;
                    fx = best_f;
                }
            }
            for r in &mut radius {
                *r *= 0.5;
            }
            if radius.iter().all(|r| *r < 1e-6) {
                break;
            }
        }
        (x, fx)
    }
}

/// Fit kernel (and, for `num_tasks > 1`, task-kernel) hyperparameters by maximizing
/// the log marginal likelihood, then condition on `data`.
pub fn fit(data: TrainingData, options: &FitOptions) -> Result<GpModel> {
    let enc = Encoding {
        dim: data.dimension(),
        num_tasks: data.num_tasks,
    };
    let layout = enc.layout(options);
    let mean = data.target_mean();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);

    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in 0..options.starts.max(1) {
        let init = if start == 0 {
            let mut theta = enc.initial(options);
            clamp_into(&mut theta, &layout);
            theta
        } else {
            enc.random_start(&mut rng, &layout)
        };
        let mut search = Search {
            objective: |theta: &[f64]| match enc.decode(theta) {
                Ok((params, tasks)) => lml_at(&data, &params, tasks.as_ref(), mean).unwrap_or(f64::NEG_INFINITY),
                Err(_) => f64::NEG_INFINITY,
            },
            layout: &layout,
            budget: options.evals_per_start.max(1),
            evals: 0,
            line_iters: options.line_iters,
        };
        let (theta, value) = search.run(init);
        log::trace!("fit start {start}: lml {value:.6}");
        if best.as_ref().is_none_or(|(_, b)| value > *b) {
            best = Some((theta, value));
        }
    }

    let (theta, value) = best.expect("at least one start");
    if value == f64::NEG_INFINITY {
        return Err(Error::NotPositiveDefinite {
            attempted: super::model::JITTER_LEVELS.to_vec(),
        });
    }
    let (params, tasks) = enc.decode(&theta)?;
    GpModel::condition_with_mean(data, params, tasks, mean)
}

/// Log marginal likelihood at the default starting hyperparameters (the first start of [`fit`]).
pub fn initial_log_marginal_likelihood(data: &TrainingData, options: &FitOptions) -> Option<f64> {
    let enc = Encoding {
        dim: data.dimension(),
        num_tasks: data.num_tasks,
    };
    let layout = enc.layout(options);
    let mut theta = enc.initial(options);
    clamp_into(&mut theta, &layout);
    let (params, tasks) = enc.decode(&theta).ok()?;
    lml_at(data, &params, tasks.as_ref(), data.target_mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::model::TaskInput;
    use crate::space::UnitPoint;

    fn pt(c: &[f64]) -> UnitPoint {
        UnitPoint::new(c.to_vec()).unwrap()
    }

    fn smooth_data() -> TrainingData {
        let xs: Vec<f64> = (0..9).map(|i| i as f64 / 8.0).collect();
        let pts = xs.iter().map(|&x| pt(&[x, 1.0 - x * x])).collect();
        let ys = xs.iter().map(|x| (3.0 * x).sin()).collect();
        TrainingData::single_task(pts, ys).unwrap()
    }

    #[test]
    fn fit_never_worse_than_initial() {
        let data = smooth_data();
        let opts = FitOptions::with_seed(3);
        let initial = initial_log_marginal_likelihood(&data, &opts).unwrap();
        let model = fit(data, &opts).unwrap();
        assert!(model.log_marginal_likelihood() >= initial);
    }

    #[test]
    fn fit_is_deterministic() {
        let a = fit(smooth_data(), &FitOptions::with_seed(11)).unwrap();
        let b = fit(smooth_data(), &FitOptions::with_seed(11)).unwrap();
        assert_eq!(a.kernel(), b.kernel());
    }

    #[test]
    fn fitted_hyperparameters_respect_bounds() {
        let opts = FitOptions::default();
        let data = TrainingData::new(
            (0..6).map(|i| TaskInput::new(pt(&[i as f64 / 5.0]), i % 2)).collect(),
            vec![0.1, 0.2, 0.5, 0.4, 0.9, 1.0],
            2,
        )
        .unwrap();
        let model = fit(data, &opts).unwrap();
        let k = model.kernel();
        assert!(k.lengthscales().iter().all(|&l| (1e-3 * 0.999..=10.0 * 1.001).contains(&l)));
        assert!((1e-4 * 0.999..=10.0 * 1.001).contains(&k.signal_variance()));
        assert!((1e-6 * 0.999..=1.001).contains(&k.noise_variance()));
        let b = model.task_covariance();
        assert!(b[(0, 0)] > 0.0 && b[(1, 1)] > 0.0);
        assert_eq!(b[(0, 1)], b[(1, 0)]);
    }

    #[test]
    fn single_observation_fits_and_interpolates() {
        let data = TrainingData::single_task(vec![pt(&[0.2, 0.4])], vec![0.0]).unwrap();
        let model = fit(data, &FitOptions::default()).unwrap();
        let post = model.posterior(&pt(&[0.2, 0.4]), 0).unwrap();
        assert!(post.mean.abs() < 1e-9);
    }
}
