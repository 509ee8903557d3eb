//! Discrete ordinal search spaces and their unit-cube normalization.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name under which the built-in RocksDB space can be referenced from config files.
pub const ROCKSDB_SPACE_NAME: &str = "rocksdb-v6.17-table1";

/// One integer-valued ordinal parameter with an inclusive range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawParamSpec")]
pub struct ParamSpec {
    name: String,
    lower: i64,
    upper: i64,
    default: i64,
}

#[derive(Deserialize)]
struct RawParamSpec {
    name: String,
    lower: i64,
    upper: i64,
    default: i64,
}

impl TryFrom<RawParamSpec> for ParamSpec {
    type Error = Error;

    fn try_from(raw: RawParamSpec) -> Result<Self> {
        ParamSpec::new(raw.name, raw.lower, raw.upper, raw.default)
    }
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, lower: i64, upper: i64, default: i64) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::invalid("parameter name must not be empty"));
        }
        if lower >= upper {
            return Err(Error::invalid(format!(
                "parameter `{name}`: lower bound {lower} must be below upper bound {upper}"
            )));
        }
        if default < lower || default > upper {
            return Err(Error::invalid(format!(
                "parameter `{name}`: default {default} outside [{lower}, {upper}]"
            )));
        }
        Ok(Self {
            name,
            lower,
            upper,
            default,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn lower(&self) -> i64 {
        self.lower
    }

    pub fn upper(&self) -> i64 {
        self.upper
    }

    pub fn default_value(&self) -> i64 {
        self.default
    }

    /// Number of distinct values, `upper - lower + 1`.
    pub fn cardinality(&self) -> u64 {
        (self.upper - self.lower) as u64 + 1
    }

    fn width(&self) -> f64 {
        (self.upper - self.lower) as f64
    }

    pub fn contains(&self, value: i64) -> bool {
        value >= self.lower && value <= self.upper
    }

    pub fn clamp(&self, value: i64) -> i64 {
        value.clamp(self.lower, self.upper)
    }

    pub fn normalize(&self, value: i64) -> f64 {
        (value - self.lower) as f64 / self.width()
    }

    /// Nearest integer to the scaled coordinate (half away from zero), clamped into range.
    pub fn denormalize(&self, coord: f64) -> i64 {
        let raw = (self.lower as f64 + coord * self.width()).round();
        // f64 -> i64 `as` saturates, so out-of-range coordinates still clamp cleanly.
        self.clamp(raw as i64)
    }
}

/// Ordered list of parameters; the dimension of the space is its length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ParamSpec>", into = "Vec<ParamSpec>")]
pub struct ParamSpace {
    params: Vec<ParamSpec>,
}

impl TryFrom<Vec<ParamSpec>> for ParamSpace {
    type Error = Error;

    fn try_from(params: Vec<ParamSpec>) -> Result<Self> {
        ParamSpace::new(params)
    }
}

impl From<ParamSpace> for Vec<ParamSpec> {
    fn from(space: ParamSpace) -> Self {
        space.params
    }
}

impl ParamSpace {
    pub fn new(params: Vec<ParamSpec>) -> Result<Self> {
        if params.is_empty() {
            return Err(Error::invalid("parameter space must have at least one parameter"));
        }
        let mut seen = HashSet::new();
        for p in &params {
            if !seen.insert(p.name.as_str()) {
                return Err(Error::invalid(format!("duplicate parameter name `{}`", p.name)));
            }
        }
        Ok(Self { params })
    }

    /// Look up a built-in space by name.
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            ROCKSDB_SPACE_NAME => Ok(rocksdb_space()),
            other => Err(Error::NotFound(format!("no built-in parameter space named `{other}`"))),
        }
    }

    pub fn dimension(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Total number of configurations, or `None` if it overflows `u128`.
    pub fn cardinality(&self) -> Option<u128> {
        self.params
            .iter()
            .try_fold(1u128, |acc, p| acc.checked_mul(p.cardinality() as u128))
    }

    /// The space restricted to the parameters at `indices`, in that order.
    pub fn subspace(&self, indices: &[usize]) -> Result<ParamSpace> {
        let params = indices
            .iter()
            .map(|&i| {
                self.params
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("parameter index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        ParamSpace::new(params)
    }

    pub fn validate(&self, config: &Configuration) -> Result<()> {
        self.check_dimension(config.len())?;
        for (p, &v) in self.params.iter().zip(config.values()) {
            if !p.contains(v) {
                return Err(Error::invalid(format!(
                    "parameter `{}` = {v} outside [{}, {}]",
                    p.name, p.lower, p.upper
                )));
            }
        }
        Ok(())
    }

    fn check_dimension(&self, len: usize) -> Result<()> {
        if len != self.dimension() {
            return Err(Error::invalid(format!(
                "dimension mismatch: expected {}, got {len}",
                self.dimension()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, config: &Configuration) -> Result<UnitPoint> {
        self.check_dimension(config.len())?;
        let coords = self
            .params
            .iter()
            .zip(config.values())
            .map(|(p, &v)| p.normalize(v).clamp(0.0, 1.0))
            .collect();
        Ok(UnitPoint(coords))
    }

    pub fn denormalize(&self, point: &UnitPoint) -> Result<Configuration> {
        self.check_dimension(point.len())?;
        let values = self
            .params
            .iter()
            .zip(point.coords())
            .map(|(p, &c)| p.denormalize(c))
            .collect();
        Ok(Configuration(values))
    }

    pub fn default_config(&self) -> Configuration {
        Configuration(self.params.iter().map(|p| p.default).collect())
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Configuration {
        Configuration(self.params.iter().map(|p| rng.random_range(p.lower..=p.upper)).collect())
    }

    /// Every configuration in lexicographic order (last parameter varies fastest).
    pub fn enumerate(&self) -> Enumerate<'_> {
        Enumerate {
            space: self,
            next: Some(self.params.iter().map(|p| p.lower).collect()),
        }
    }
}

pub struct Enumerate<'a> {
    space: &'a ParamSpace,
    next: Option<Vec<i64>>,
}

impl Iterator for Enumerate<'_> {
    type Item = Configuration;

    fn next(&mut self) -> Option<Configuration> {
        let current = self.next.take()?;
        let mut succ = current.clone();
        for (i, p) in self.space.params.iter().enumerate().rev() {
            if succ[i] < p.upper {
                succ[i] += 1;
                self.next = Some(succ);
                break;
            }
            succ[i] = p.lower;
        }
        Some(Configuration(current))
    }
}

/// Concrete integer assignment aligned index-for-index with a [`ParamSpace`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Configuration(Vec<i64>);

impl Configuration {
    pub fn new(values: Vec<i64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[i64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn project(&self, indices: &[usize]) -> Configuration {
        Configuration(indices.iter().map(|&i| self.0[i]).collect())
    }
}

impl From<Vec<i64>> for Configuration {
    fn from(values: Vec<i64>) -> Self {
        Self(values)
    }
}

/// Point of the unit cube `[0, 1]^D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct UnitPoint(Vec<f64>);

impl TryFrom<Vec<f64>> for UnitPoint {
    type Error = Error;

    fn try_from(coords: Vec<f64>) -> Result<Self> {
        UnitPoint::new(coords)
    }
}

impl From<UnitPoint> for Vec<f64> {
    fn from(p: UnitPoint) -> Self {
        p.0
    }
}

impl UnitPoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if let Some(c) = coords.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::invalid(format!("unit-cube coordinate {c} outside [0, 1]")));
        }
        Ok(Self(coords))
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// The ten RocksDB v6.17 parameters under tuning.
///
/// Two entries of the source table are read rather than copied: the
/// `max_background_flushes` range is printed without a comma and is taken as
/// `[1, 10]`, and `level0_slowdown_writes_trigger` lists a default of 0 that
/// lies outside its own range `[1, 1024]`, so the stored default is 1.
pub fn rocksdb_space() -> ParamSpace {
    let p = |name: &str, lower: i64, upper: i64, default: i64| {
        ParamSpec::new(name, lower, upper, default).expect("built-in parameter is valid")
    };
    ParamSpace::new(vec![
        p("max_background_compactions", 1, 1 << 8, 1),
        p("max_background_flushes", 1, 10, 1),
        p("write_buffer_size", 1, 150_000_000, 1 << 26),
        p("max_write_buffer_number", 1, 1 << 7, 2),
        p("min_write_buffer_number_to_merge", 1, 1 << 5, 1),
        p("max_bytes_for_level_multiplier", 5, 15, 10),
        p("block_size", 1, 500_000, 1 << 12),
        p("level0_file_num_compaction_trigger", 1, 1 << 8, 1 << 2),
        p("level0_slowdown_writes_trigger", 1, 1 << 10, 1),
        p("level0_stop_writes_trigger", 1, 1 << 10, 36),
    ])
    .expect("built-in space is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> ParamSpace {
        ParamSpace::new(vec![
            ParamSpec::new("a", 0, 10, 3).unwrap(),
            ParamSpec::new("b", -2, 2, 0).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn bounds_map_to_cube_corners() {
        let space = rocksdb_space();
        let lows = Configuration::new(space.params().iter().map(|p| p.lower()).collect());
        let highs = Configuration::new(space.params().iter().map(|p| p.upper()).collect());
        assert!(space.normalize(&lows).unwrap().coords().iter().all(|&c| c == 0.0));
        assert!(space.normalize(&highs).unwrap().coords().iter().all(|&c| c == 1.0));

        let zeros = UnitPoint::new(vec![0.0; 10]).unwrap();
        let ones = UnitPoint::new(vec![1.0; 10]).unwrap();
        assert_eq!(space.denormalize(&zeros).unwrap(), lows);
        assert_eq!(space.denormalize(&ones).unwrap(), highs);
    }

    #[test]
    fn write_buffer_default_normalizes_exactly() {
        let space = rocksdb_space();
        let idx = space.index_of("write_buffer_size").unwrap();
        let point = space.normalize(&space.default_config()).unwrap();
        assert_eq!(point.coords()[idx], (67_108_864.0 - 1.0) / (150_000_000.0 - 1.0));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let space = small();
        assert!(matches!(
            space.normalize(&Configuration::new(vec![1])),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            space.denormalize(&UnitPoint::new(vec![0.5; 3]).unwrap()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn rocksdb_table() {
        let space = rocksdb_space();
        assert_eq!(space.dimension(), 10);
        assert_eq!(space.param("block_size").unwrap().default_value(), 4096);
        let m = space.param("max_bytes_for_level_multiplier").unwrap();
        assert_eq!((m.lower(), m.upper()), (5, 15));
        assert_eq!(space.default_config().values(), &[1, 1, 1 << 26, 2, 1, 10, 1 << 12, 4, 1, 36]);
        space.validate(&space.default_config()).unwrap();
        assert_eq!(ParamSpace::builtin(ROCKSDB_SPACE_NAME).unwrap(), space);
    }

    #[test]
    fn single_param_default() {
        let space = ParamSpace::new(vec![ParamSpec::new("x", 0, 10, 3).unwrap()]).unwrap();
        assert_eq!(space.default_config().values(), &[3]);
    }

    #[test]
    fn construction_rejects_bad_specs() {
        assert!(ParamSpec::new("x", 5, 5, 5).is_err());
        assert!(ParamSpec::new("x", 0, 5, 6).is_err());
        assert!(ParamSpace::new(vec![]).is_err());
        let p = ParamSpec::new("x", 0, 1, 0).unwrap();
        assert!(ParamSpace::new(vec![p.clone(), p]).is_err());
        assert!(UnitPoint::new(vec![1.5]).is_err());
    }

    #[test]
    fn json_loading() {
        let space: ParamSpace = serde_json::from_str(
            r#"[{"name":"a","lower":0,"upper":10,"default":3},{"name":"b","lower":-2,"upper":2,"default":0}]"#,
        )
        .unwrap();
        assert_eq!(space, small());
        let bad = serde_json::from_str::<ParamSpace>(r#"[{"name":"a","lower":3,"upper":1,"default":2}]"#);
        assert!(bad.is_err());
    }

    #[test]
    fn enumeration_is_lexicographic_and_complete() {
        let space = small();
        let all: Vec<_> = space.enumerate().collect();
        assert_eq!(all.len() as u128, space.cardinality().unwrap());
        assert_eq!(all[0].values(), &[0, -2]);
        assert_eq!(all[1].values(), &[0, -1]);
        assert_eq!(all.last().unwrap().values(), &[10, 2]);
        assert!(all.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn denormalize_rounds_half_away_and_clamps() {
        let space = ParamSpace::new(vec![ParamSpec::new("x", 0, 2, 0).unwrap()]).unwrap();
        let at = |c: f64| space.params()[0].denormalize(c);
        assert_eq!(at(0.25), 1); // 0.5 rounds up
        assert_eq!(at(0.24), 0);
        assert_eq!(at(1.7), 2);
        assert_eq!(at(-3.0), 0);
    }

    fn rocksdb_config() -> impl Strategy<Value = Configuration> {
        let space = rocksdb_space();
        space
            .params()
            .iter()
            .map(|p| p.lower()..=p.upper())
            .collect::<Vec<_>>()
            .prop_map(Configuration::new)
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(config in rocksdb_config()) {
            let space = rocksdb_space();
            let point = space.normalize(&config).unwrap();
            prop_assert!(point.coords().iter().all(|c| (0.0..=1.0).contains(c)));
            prop_assert_eq!(space.denormalize(&point).unwrap(), config);
        }

        #[test]
        fn normalize_is_monotone(a in 1i64..=150_000_000, b in 1i64..=150_000_000) {
            let p = ParamSpec::new("w", 1, 150_000_000, 1).unwrap();
            if a < b {
                prop_assert!(p.normalize(a) < p.normalize(b));
            }
        }
    }
}
