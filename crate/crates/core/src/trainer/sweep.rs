use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::train::{train, write_run, Data, TrainReport};
use super::TrainPlan;
use crate::aggregators::ProbeConfig;
use crate::error::{ProbeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    Exhaustive,
    /// `n` distinct grid points drawn uniformly without replacement.
    Random(usize),
}

/// Candidate values per field. Keys name fields of either [`ProbeConfig`] or
/// [`TrainPlan`], e.g. `{"learning_rate": [1e-4, 1e-3], "batch_size": [16, 32]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub params: BTreeMap<String, Vec<Value>>,
    #[serde(default = "default_sampling")]
    pub sampling: Sampling,
    /// Seed for random sampling of grid points.
    #[serde(default)]
    pub seed: u64,
}

fn default_sampling() -> Sampling {
    Sampling::Exhaustive
}

impl SweepGrid {
    pub fn cardinality(&self) -> usize {
        self.params.values().map(Vec::len).product()
    }

    /// Grid points in lexicographic key order, sub-sampled for `Random`.
    pub fn points(&self) -> Vec<BTreeMap<String, Value>> {
        let keys: Vec<&String> = self.params.keys().collect();
        let total = self.cardinality();
        let chosen: Vec<usize> = match self.sampling {
            Sampling::Exhaustive => (0..total).collect(),
            Sampling::Random(n) if n >= total => (0..total).collect(),
            Sampling::Random(n) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let mut idx = rand::seq::index::sample(&mut rng, total, n).into_vec();
                idx.sort_unstable();
                idx
            }
        };
        chosen
            .into_iter()
            .map(|mut flat| {
                let mut point = BTreeMap::new();
                for k in keys.iter().rev() {
                    let vals = &self.params[*k];
                    point.insert((*k).clone(), vals[flat % vals.len()].clone());
                    flat /= vals.len();
                }
                point
            })
            .collect()
    }
}

fn apply<T: Serialize + serde::de::DeserializeOwned>(base: &T, point: &BTreeMap<String, Value>) -> Result<T> {
    let mut v = serde_json::to_value(base).map_err(|e| ProbeError::Config(e.to_string()))?;
    let obj = v.as_object_mut().expect("struct serializes to an object");
    for (k, val) in point {
        if obj.contains_key(k) {
            obj.insert(k.clone(), val.clone());
        }
    }
    serde_json::from_value(v).map_err(|e| ProbeError::Config(format!("grid point {point:?}: {e}")))
}

/// Config and plan for one grid point.
pub fn resolve(
    base_config: &ProbeConfig,
    base_plan: &TrainPlan,
    point: &BTreeMap<String, Value>,
) -> Result<(ProbeConfig, TrainPlan)> {
    let cfg_keys = serde_json::to_value(base_config).map_err(|e| ProbeError::Config(e.to_string()))?;
    let plan_keys = serde_json::to_value(base_plan).map_err(|e| ProbeError::Config(e.to_string()))?;
    for k in point.keys() {
        if cfg_keys.get(k).is_none() && plan_keys.get(k).is_none() {
            return Err(ProbeError::Config(format!("unknown sweep field {k:?}")));
        }
    }
    Ok((apply(base_config, point)?, apply(base_plan, point)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub index: usize,
    pub point: BTreeMap<String, Value>,
    pub metric: Option<f64>,
    pub report: Option<TrainReport>,
    pub error: Option<String>,
}

/// Trains every grid point and returns runs ranked by best validation metric
/// (failed runs last, ties by grid index). Runs execute on `jobs` threads;
/// each run is itself sequential, so results do not depend on `jobs`. When
/// `out` is given, run `i` is written to `out/runs/<i>/`.
pub fn sweep(
    grid: &SweepGrid,
    base_config: &ProbeConfig,
    base_plan: &TrainPlan,
    data: &Data,
    jobs: usize,
    out: Option<&Path>,
) -> Result<Vec<SweepRun>> {
    let points = grid.points();
    for p in &points {
        resolve(base_config, base_plan, p)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ProbeError::Config(format!("thread pool: {e}")))?;
    let run_one = |(index, point): (usize, &BTreeMap<String, Value>)| -> SweepRun {
        let result = resolve(base_config, base_plan, point).and_then(|(cfg, plan)| {
            let mut outcome = train(&cfg, &plan, data)?;
            if let Some(dir) = out {
                write_run(dir.join("runs").join(index.to_string()), &mut outcome, Some(data.store().dir()))?;
            }
            Ok(outcome.report)
        });
        match result {
            Ok(report) => SweepRun {
                index,
                point: point.clone(),
                metric: report.best_val_metric,
                report: Some(report),
                error: None,
            },
            Err(e) => {
                log::warn!("sweep run {index} failed: {e}");
                SweepRun {
                    index,
                    point: point.clone(),
                    metric: None,
                    report: None,
                    error: Some(e.to_string()),
                }
            }
        }
    };
    let mut runs: Vec<SweepRun> = pool.install(|| points.par_iter().enumerate().map(run_one).collect());
    runs.sort_by(|a, b| match (a.metric, b.metric) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.index.cmp(&b.index)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.index.cmp(&b.index),
    });
    Ok(runs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub hyperparameter: String,
    pub value: String,
    pub metric_mean: f64,
    pub metric_min: f64,
    pub metric_max: f64,
    pub n_runs: usize,
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Marginal distribution of the run metric for each value of each swept
/// field, over successful runs. Rows follow key order, then the grid's value
/// order.
pub fn sensitivity(grid: &SweepGrid, runs: &[SweepRun]) -> Vec<SensitivityRow> {
    let mut rows = Vec::new();
    for (key, values) in &grid.params {
        for v in values {
            let metrics: Vec<f64> = runs
                .iter()
                .filter(|r| r.point.get(key) == Some(v))
                .filter_map(|r| r.metric)
                .collect();
            if metrics.is_empty() {
                continue;
            }
            rows.push(SensitivityRow {
                hyperparameter: key.clone(),
                value: value_label(v),
                metric_mean: metrics.iter().sum::<f64>() / metrics.len() as f64,
                metric_min: metrics.iter().copied().fold(f64::INFINITY, f64::min),
                metric_max: metrics.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                n_runs: metrics.len(),
            });
        }
    }
    rows
}

pub fn sensitivity_csv(rows: &[SensitivityRow]) -> String {
    let mut s = String::from("hyperparameter,value,metric_mean,metric_min,metric_max,n_runs\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.hyperparameter, r.value, r.metric_mean, r.metric_min, r.metric_max, r.n_runs
        );
    }
    s
}
