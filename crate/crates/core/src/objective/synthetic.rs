//! Decomposable quadratic stand-in for RocksDB.
//!
//! Every cluster `c` owns a parameter subset `S_c` and an optimum `o_c` on the
//! unit cube. Its loss is `mean_{d in S_c} (x_d - o_{c,d})^2`, its adjacent
//! task reports `100 * loss_c`, and the primary task reports
//! `100000 * (1 - mean_c loss_c)` plus optional Gaussian noise. The global
//! optimum is therefore 100000 at the concatenation of the cluster optima.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Evaluation, Objective, ObjectiveFailure};
use crate::error::{Error, Result};
use crate::multitask::{ClusterSpec, TaskRegistry};
use crate::space::{Configuration, ParamSpace};

pub const PRIMARY_SCALE: f64 = 100_000.0;
pub const ADJACENT_SCALE: f64 = 100.0;
/// Noise level of the robustness profile.
pub const NOISY_PROFILE_STD: f64 = 500.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateCluster {
    pub task: String,
    pub params: Vec<String>,
    /// Unit-cube optimum, one coordinate per entry of `params`.
    pub optimum: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSurrogateSpec {
    pub primary: String,
    pub clusters: Vec<SurrogateCluster>,
    #[serde(default)]
    pub noise_std: f64,
}

/// Default cluster optima for the RocksDB space, chosen away from the cube center.
pub fn default_rocksdb_optima() -> BTreeMap<String, f64> {
    [
        ("write_buffer_size", 0.8),
        ("max_write_buffer_number", 0.25),
        ("min_write_buffer_number_to_merge", 0.75),
        ("max_background_flushes", 0.2),
        ("level0_file_num_compaction_trigger", 0.7),
        ("max_background_compactions", 0.3),
        ("max_bytes_for_level_multiplier", 0.8),
        ("level0_slowdown_writes_trigger", 0.7),
        ("level0_stop_writes_trigger", 0.25),
        ("block_size", 0.15),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

impl SyntheticSurrogateSpec {
    /// Surrogate whose structure mirrors `clusters`: each cluster must own exactly one
    /// non-primary task, and every parameter needs an entry in `optima`.
    pub fn from_clusters(
        clusters: &ClusterSpec,
        space: &ParamSpace,
        tasks: &TaskRegistry,
        optima: &BTreeMap<String, f64>,
        noise_std: f64,
    ) -> Result<Self> {
        let resolved = clusters.resolve(space, tasks)?;
        let primary = tasks.primary_index();
        let mut out = Vec::with_capacity(resolved.len());
        for (c, r) in resolved.iter().enumerate() {
            let adjacent: Vec<usize> = r.task_indices.iter().copied().filter(|&t| t != primary).collect();
            let [task] = adjacent.as_slice() else {
                return Err(Error::invalid(format!(
                    "synthetic surrogate needs exactly one adjacent task in cluster {c}, found {}",
                    adjacent.len()
                )));
            };
            let optimum = r
                .cluster
                .params
                .iter()
                .map(|p| {
                    optima
                        .get(p)
                        .copied()
                        .ok_or_else(|| Error::config("synthetic.optima", format!("missing optimum for parameter `{p}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(SurrogateCluster {
                task: tasks.tasks()[*task].name.clone(),
                params: r.cluster.params.clone(),
                optimum,
            });
        }
        let spec = Self {
            primary: tasks.primary().name.clone(),
            clusters: out,
            noise_std,
        };
        spec.validate(space)?;
        Ok(spec)
    }

    pub fn validate(&self, space: &ParamSpace) -> Result<()> {
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::config("synthetic.noise_std", "must be non-negative"));
        }
        for c in &self.clusters {
            if c.params.len() != c.optimum.len() || c.params.is_empty() {
                return Err(Error::invalid(format!(
                    "cluster for `{}` needs one optimum per parameter",
                    c.task
                )));
            }
            if let Some(o) = c.optimum.iter().find(|o| !(0.0..=1.0).contains(*o)) {
                return Err(Error::config("synthetic.optima", format!("optimum {o} outside [0, 1]")));
            }
            if let Some(p) = c.params.iter().find(|p| space.index_of(p).is_none()) {
                return Err(Error::invalid(format!("unknown parameter `{p}` in synthetic surrogate")));
            }
        }
        Ok(())
    }

    /// Per-cluster losses of `config`, in cluster order.
    pub fn cluster_losses(&self, space: &ParamSpace, config: &Configuration) -> Result<Vec<f64>> {
        let point = space.normalize(config)?;
        self.clusters
            .iter()
            .map(|c| {
                let mut sum = 0.0;
                for (p, o) in c.params.iter().zip(&c.optimum) {
                    let i = space
                        .index_of(p)
                        .ok_or_else(|| Error::invalid(format!("unknown parameter `{p}`")))?;
                    sum += (point.coords()[i] - o).powi(2);
                }
                Ok(sum / c.params.len() as f64)
            })
            .collect()
    }
}

fn noise_seed(seed: u64, config: &Configuration) -> u64 {
    // splitmix64 folded over the configuration values
    let mut h = seed;
    for &v in config.values() {
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(v as u64);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Evaluate the surrogate. Pure in `(config, spec, seed)`; `seed` only affects the noise.
pub fn synthetic_objective(
    config: &Configuration,
    space: &ParamSpace,
    spec: &SyntheticSurrogateSpec,
    seed: u64,
) -> Result<BTreeMap<String, f64>> {
    space.validate(config)?;
    let losses = spec.cluster_losses(space, config)?;
    let mut values = BTreeMap::new();
    for (c, loss) in spec.clusters.iter().zip(&losses) {
        values.insert(c.task.clone(), ADJACENT_SCALE * loss);
    }
    let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
    let mut primary = PRIMARY_SCALE * (1.0 - mean_loss);
    if spec.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed(seed, config));
        let normal = Normal::new(0.0, spec.noise_std).expect("noise std validated");
        primary += normal.sample(&mut rng);
    }
    values.insert(spec.primary.clone(), primary);
    Ok(values)
}

/// [`Objective`] adapter around [`synthetic_objective`]. Reports zero wall time.
#[derive(Debug, Clone)]
pub struct SyntheticObjective {
    pub space: ParamSpace,
    pub spec: SyntheticSurrogateSpec,
    pub seed: u64,
}

impl SyntheticObjective {
    pub fn new(space: ParamSpace, spec: SyntheticSurrogateSpec, seed: u64) -> Result<Self> {
        spec.validate(&space)?;
        Ok(Self { space, spec, seed })
    }

    /// The analytic maximum of the primary task (noise-free).
    pub fn optimum_value(&self) -> f64 {
        PRIMARY_SCALE
    }
}

impl Objective for SyntheticObjective {
    fn evaluate(&mut self, config: &Configuration) -> Result<Evaluation, ObjectiveFailure> {
        let values =
            synthetic_objective(config, &self.space, &self.spec, self.seed).map_err(|e| ObjectiveFailure::new(e.to_string()))?;
        Ok(Evaluation { values, wall_time: 0.0 })
    }
}
