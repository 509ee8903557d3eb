//! Expected improvement and candidate search over discrete ordinal spaces.

use std::collections::HashSet;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::gp::{GpModel, PosteriorGaussian};
use crate::multitask::ClusterModel;
use crate::space::{Configuration, ParamSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AcquisitionKind {
    #[default]
    ExpectedImprovement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionSpec {
    pub kind: AcquisitionKind,
    /// Exploration margin subtracted from the improvement.
    pub jitter: f64,
    pub n_candidates: usize,
    pub n_neighbor_refinements: usize,
}

impl Default for AcquisitionSpec {
    fn default() -> Self {
        Self {
            kind: AcquisitionKind::ExpectedImprovement,
            jitter: 0.0,
            n_candidates: 2048,
            n_neighbor_refinements: 64,
        }
    }
}

impl AcquisitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_candidates == 0 {
            return Err(Error::invalid("acquisition n_candidates must be at least 1"));
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(Error::invalid("acquisition jitter must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub config: Configuration,
    pub acquisition_value: f64,
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * FRAC_1_SQRT_2)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Closed-form `E[max(0, X - best - xi)]` for `X ~ N(mean, variance)`.
pub fn expected_improvement(post: PosteriorGaussian, best: f64, xi: f64) -> f64 {
    let improvement = post.mean - best - xi;
    let sigma = post.variance.max(0.0).sqrt();
    if sigma == 0.0 {
        return improvement.max(0.0);
    }
    let z = improvement / sigma;
    (improvement * std_normal_cdf(z) + sigma * std_normal_pdf(z)).max(0.0)
}

/// Scored candidates in generation order.
struct Scored {
    candidates: Vec<(Configuration, f64)>,
}

impl Scored {
    /// Candidate indices by descending score, generation order breaking ties.
    fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.candidates.len()).collect();
        order.sort_by(|&a, &b| self.candidates[b].1.total_cmp(&self.candidates[a].1).then(a.cmp(&b)));
        order
    }
}

fn first_argmax(candidates: &[(Configuration, f64)]) -> usize {
    let mut best = 0;
    for (i, (_, s)) in candidates.iter().enumerate() {
        if *s > candidates[best].1 {
            best = i;
        }
    }
    best
}

fn neighbor_steps(space: &ParamSpace) -> Vec<i64> {
    space
        .params()
        .iter()
        .map(|p| (((p.upper() - p.lower()) as f64) * 0.01).round().max(1.0) as i64)
        .collect()
}

/// Single-coordinate moves from `center`: ordinal +-1, then +-1% of the range.
fn neighbors(space: &ParamSpace, steps: &[i64], center: &Configuration) -> Vec<Configuration> {
    let mut out = Vec::new();
    for (d, p) in space.params().iter().enumerate() {
        let mut deltas = vec![-1, 1];
        if steps[d] > 1 {
            deltas.extend([-steps[d], steps[d]]);
        }
        for delta in deltas {
            let mut values = center.values().to_vec();
            values[d] = p.clamp(values[d] + delta);
            if values[d] != center.values()[d] {
                out.push(Configuration::new(values));
            }
        }
    }
    out
}

/// Uniform random candidates plus greedy neighbor refinement, or full enumeration
/// when the space is no larger than the candidate budget.
fn search(space: &ParamSpace, spec: &AcquisitionSpec, seed: u64, score: impl Fn(&Configuration) -> f64) -> Scored {
    let exhaustive = space.cardinality().is_some_and(|n| n <= spec.n_candidates as u128);
    if exhaustive {
        let candidates = space.enumerate().map(|c| {
            let s = score(&c);
            (c, s)
        });
        return Scored {
            candidates: candidates.collect(),
        };
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates: Vec<(Configuration, f64)> = (0..spec.n_candidates)
        .map(|_| {
            let c = space.sample_uniform(&mut rng);
            let s = score(&c);
            (c, s)
        })
        .collect();

    let steps = neighbor_steps(space);
    let mut best = first_argmax(&candidates);
    let mut budget = spec.n_neighbor_refinements;
    'refine: while budget > 0 {
        let (center, center_score) = candidates[best].clone();
        for n in neighbors(space, &steps, &center) {
            if budget == 0 {
                break 'refine;
            }
            budget -= 1;
            let s = score(&n);
            candidates.push((n, s));
            if s > center_score {
                best = candidates.len() - 1;
                continue 'refine;
            }
        }
        break;
    }
    Scored { candidates }
}

fn ei_scorer<'a>(
    model: &'a GpModel,
    task: usize,
    space: &'a ParamSpace,
    best: f64,
    xi: f64,
) -> impl Fn(&Configuration) -> f64 + 'a {
    move |c: &Configuration| {
        let x = space.normalize(c).expect("candidate matches space");
        expected_improvement(model.posterior_unchecked(x.coords(), task), best, xi)
    }
}

fn check_model(model: &GpModel, task: usize, space: &ParamSpace) -> Result<()> {
    if model.dimension() != space.dimension() {
        return Err(Error::invalid(format!(
            "model is {}-dimensional but the space has {} parameters",
            model.dimension(),
            space.dimension()
        )));
    }
    if task >= model.num_tasks() {
        return Err(Error::invalid(format!("primary task id {task} out of range")));
    }
    Ok(())
}

/// Maximize EI of `model`'s task `primary_task` over `space`.
///
/// A maximizer that duplicates one of `evaluated` is replaced by the best distinct
/// candidate; if every candidate was already evaluated, the maximizer is kept.
pub fn propose(
    model: &GpModel,
    primary_task: usize,
    space: &ParamSpace,
    incumbent_best: f64,
    spec: &AcquisitionSpec,
    seed: u64,
    evaluated: &[Configuration],
) -> Result<Proposal> {
    spec.validate()?;
    check_model(model, primary_task, space)?;
    let scored = search(
        space,
        spec,
        seed,
        ei_scorer(model, primary_task, space, incumbent_best, spec.jitter),
    );
    let seen: HashSet<&Configuration> = evaluated.iter().collect();
    let ranking = scored.ranking();
    let pick = ranking
        .iter()
        .copied()
        .find(|&i| !seen.contains(&scored.candidates[i].0))
        .unwrap_or(ranking[0]);
    let (config, acquisition_value) = scored.candidates[pick].clone();
    Ok(Proposal {
        config,
        acquisition_value,
    })
}

/// Seed of the candidate stream for cluster `index`; cluster 0 uses `seed` itself.
pub fn cluster_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Per-cluster EI search, concatenated into one full configuration.
///
/// The reported acquisition value is the sum of the per-cluster EI values.
pub fn propose_clustered(
    models: &[ClusterModel],
    space: &ParamSpace,
    incumbent_best: f64,
    spec: &AcquisitionSpec,
    seed: u64,
    evaluated: &[Configuration],
) -> Result<Proposal> {
    spec.validate()?;
    let mut owner = vec![false; space.dimension()];
    for m in models {
        for &i in &m.resolved.param_indices {
            if i >= owner.len() || owner[i] {
                return Err(Error::invalid("cluster models must partition the parameter space"));
            }
            owner[i] = true;
        }
    }
    if models.is_empty() || owner.iter().any(|o| !o) {
        return Err(Error::invalid("cluster models do not cover the parameter space"));
    }

    let mut per_cluster = Vec::with_capacity(models.len());
    for (c, m) in models.iter().enumerate() {
        check_model(&m.model, m.primary_task(), &m.subspace)?;
        let scored = search(
            &m.subspace,
            spec,
            cluster_seed(seed, c),
            ei_scorer(&m.model, m.primary_task(), &m.subspace, incumbent_best, spec.jitter),
        );
        let ranking = scored.ranking();
        per_cluster.push((scored, ranking));
    }

    let assemble = |choice: &[usize]| {
        let mut values = vec![0i64; space.dimension()];
        let mut total = 0.0;
        for ((m, (scored, ranking)), &rank) in models.iter().zip(&per_cluster).zip(choice) {
            let (sub, s) = &scored.candidates[ranking[rank]];
            for (&i, &v) in m.resolved.param_indices.iter().zip(sub.values()) {
                values[i] = v;
            }
            total += s;
        }
        (Configuration::new(values), total)
    };

    let seen: HashSet<&Configuration> = evaluated.iter().collect();
    let top = vec![0usize; models.len()];
    let (config, total) = assemble(&top);
    if !seen.contains(&config) {
        return Ok(Proposal {
            config,
            acquisition_value: total,
        });
    }

    // Swap one cluster's choice for a lower-ranked candidate; keep the best distinct result.
    let mut replacement: Option<(Configuration, f64)> = None;
    for (c, (_, ranking)) in per_cluster.iter().enumerate() {
        for rank in 1..ranking.len() {
            let mut choice = top.clone();
            choice[c] = rank;
            let (cand, value) = assemble(&choice);
            if seen.contains(&cand) {
                continue;
            }
            if replacement.as_ref().is_none_or(|(_, v)| value > *v) {
                replacement = Some((cand, value));
            }
            break;
        }
    }
    let (config, acquisition_value) = replacement.unwrap_or((config, total));
    Ok(Proposal {
        config,
        acquisition_value,
    })
}
