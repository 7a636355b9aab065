use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::optim::{adamw_step, cosine_lr, AdamState};
use super::{EarlyStopMetric, Schedule, TrainPlan};
use crate::aggregators::{backward, forward, probabilities, save_checkpoint, ProbeConfig, ProbeParams};
use crate::error::{ProbeError, Result};
use crate::hstore::{batch_tight, Batch, HStoreManifest, HiddenStateRecord, Split, Store};
use crate::metrics::{self, MetricReport, ScoredPredictions};

/// Stores up to this many decoded bytes are held in memory for training.
const CACHE_LIMIT_BYTES: u64 = 1 << 30;
const EVAL_BATCH: usize = 64;

/// Record access for training and evaluation: decoded once into memory when
/// the store is small enough, read on demand otherwise.
pub struct Data<'a> {
    store: &'a Store,
    cache: Option<Vec<HiddenStateRecord>>,
}

impl<'a> Data<'a> {
    pub fn new(store: &'a Store) -> Result<Self> {
        let m = store.manifest();
        let floats: u64 = m.records.iter().map(|r| (m.n_layers * r.t * m.d) as u64).sum();
        let cache = if floats * 4 <= CACHE_LIMIT_BYTES {
            Some(store.load(&(0..store.len()).collect::<Vec<_>>())?)
        } else {
            None
        };
        Ok(Data { store, cache })
    }

    /// On-demand access only.
    pub fn lazy(store: &'a Store) -> Self {
        Data { store, cache: None }
    }

    pub fn store(&self) -> &Store {
        self.store
    }

    pub fn manifest(&self) -> &HStoreManifest {
        self.store.manifest()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch<f32>> {
        match &self.cache {
            Some(all) => {
                let recs: Vec<HiddenStateRecord> = indices.iter().map(|&i| all[i].clone()).collect();
                batch_tight(&recs)
            }
            None => batch_tight(&self.store.load(indices)?),
        }
    }
}

/// Positive class for binary metrics: provenance key `positive_class` when
/// present, otherwise class 1.
pub fn positive_class(manifest: &HStoreManifest) -> usize {
    manifest
        .provenance
        .get("positive_class")
        .and_then(Value::as_u64)
        .map(|c| c as usize)
        .filter(|&c| c < manifest.n_classes())
        .unwrap_or(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metric: f64,
    pub val_accuracy: f64,
    pub val_f1: f64,
    pub last_lr: f64,
}

/// Everything about a run that is a function of its inputs. Wall-clock times
/// are kept out so identical runs serialize identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: ProbeConfig,
    pub plan: TrainPlan,
    pub n_train: usize,
    pub n_val: usize,
    /// True when validation examples were carved from the train split.
    pub val_carved: bool,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_val_metric: Option<f64>,
    pub stopped_early: bool,
    /// SHA-256 of the best checkpoint's `probe.bin`.
    pub checkpoint_sha256: Option<String>,
    pub test: Option<MetricReport>,
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub params: ProbeParams<f32>,
    pub epoch_seconds: Vec<f64>,
}

struct Splits {
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
    carved: bool,
}

fn splits(store: &Store, plan: &TrainPlan) -> Result<Splits> {
    let mut train = store.split_indices(Split::Train);
    let mut val = store.split_indices(Split::Val);
    let test = store.split_indices(Split::Test);
    let carved = val.is_empty();
    if carved {
        if train.len() < 2 {
            return Err(ProbeError::EmptySplit(format!(
                "train has {} records, too few to carve a validation split",
                train.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        rng.set_stream(1);
        train.shuffle(&mut rng);
        let n_val = ((train.len() as f64 * plan.val_fraction).round() as usize).clamp(1, train.len() - 1);
        val = train.split_off(train.len() - n_val);
        train.sort_unstable();
        val.sort_unstable();
    }
    if train.is_empty() {
        return Err(ProbeError::EmptySplit("train".into()));
    }
    Ok(Splits {
        train,
        val,
        test,
        carved,
    })
}

fn check_compatible(config: &ProbeConfig, manifest: &HStoreManifest) -> Result<()> {
    config.validate()?;
    if config.n_layers != manifest.n_layers || config.d != manifest.d || config.n_classes != manifest.n_classes() {
        return Err(ProbeError::Shape(format!(
            "probe expects n_layers = {}, d = {}, {} classes; store has {}, {}, {}",
            config.n_layers,
            config.d,
            config.n_classes,
            manifest.n_layers,
            manifest.d,
            manifest.n_classes()
        )));
    }
    Ok(())
}

/// Class probabilities for the records at `indices`.
pub fn predict(params: &ProbeParams<f32>, data: &Data, indices: &[usize]) -> Result<ScoredPredictions> {
    let cfg = params.config();
    check_compatible(cfg, data.manifest())?;
    if indices.is_empty() {
        return Err(ProbeError::EmptySplit("nothing to predict".into()));
    }
    let c = cfg.n_classes;
    let mut scores = Vec::with_capacity(indices.len() * c);
    let mut labels = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let batch = data.batch(chunk)?;
        let out = forward(params, &batch, false)?;
        let z64: Vec<f64> = out.logits.iter().map(|&v| f64::from(v)).collect();
        scores.extend(probabilities(&z64, c));
        labels.extend_from_slice(&batch.labels);
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFinite("probe produced non-finite logits".into()));
    }
    ScoredPredictions::new(c, scores, labels, positive_class(data.manifest()))
}

/// Metric report for one split of the store.
pub fn evaluate(params: &ProbeParams<f32>, data: &Data, split: Split) -> Result<MetricReport> {
    let idx = data.store().split_indices(split);
    if idx.is_empty() {
        return Err(ProbeError::EmptySplit(split.to_string()));
    }
    let p = predict(params, data, &idx)?;
    Ok(metrics::report(&p, &data.manifest().label_names))
}

fn mean_nll(p: &ScoredPredictions) -> f64 {
    let total: f64 = (0..p.len())
        .map(|i| -p.row(i)[p.labels[i]].max(f64::MIN_POSITIVE).ln())
        .sum();
    total / p.len() as f64
}

fn select_metric(p: &ScoredPredictions, which: EarlyStopMetric) -> (f64, f64, f64) {
    let acc = metrics::accuracy(p);
    let f1 = if p.n_classes == 2 {
        metrics::f1_binary(p)
    } else {
        metrics::macro_f1(p)
    };
    let m = match which {
        EarlyStopMetric::F1 => f1,
        EarlyStopMetric::Accuracy => acc,
    };
    (m, acc, f1)
}

/// Trains a probe from `config.seed`-initialized weights.
///
/// Each step shuffles (per epoch), batches, runs forward and backward, then
/// takes an AdamW step at the scheduled rate. The parameters of the epoch with
/// the best validation metric are returned; ties go to the lower validation
/// loss, then to the earlier epoch.
/// Deterministic for fixed seeds.
pub fn train(config: &ProbeConfig, plan: &TrainPlan, data: &Data) -> Result<TrainOutcome> {
    plan.validate()?;
    check_compatible(config, data.manifest())?;
    let sp = splits(data.store(), plan)?;
    let class_weights: Option<Vec<f32>> = match &plan.class_weights {
        Some(w) if w.len() != config.n_classes => {
            return Err(ProbeError::Config(format!(
                "{} class weights for {} classes",
                w.len(),
                config.n_classes
            )))
        }
        Some(w) => Some(w.iter().map(|&v| v as f32).collect()),
        None => None,
    };

    let mut params = ProbeParams::<f32>::init(config)?;
    let mut best = params.clone();
    let mut state = AdamState::new(params.len());
    let steps_per_epoch = sp.train.len().div_ceil(plan.batch_size);
    let total_steps = plan.max_epochs * steps_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut order = sp.train.clone();

    let mut epochs = Vec::new();
    let mut epoch_seconds = Vec::new();
    let mut best_epoch: Option<usize> = None;
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_loss = f64::INFINITY;
    let mut stopped_early = false;
    let mut step = 0usize;

    for epoch in 0..plan.max_epochs {
        let started = Instant::now();
        if plan.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0f64;
        let mut lr = plan.learning_rate;
        for chunk in order.chunks(plan.batch_size) {
            let batch = data.batch(chunk)?;
            let loss = backward(&mut params, &batch, class_weights.as_deref())?;
            if !loss.is_finite() {
                return Err(ProbeError::Diverged {
                    epoch,
                    step,
                    loss: f64::from(loss),
                });
            }
            lr = match plan.schedule {
                Schedule::Cosine => cosine_lr(step, total_steps, plan.learning_rate),
                Schedule::Constant => plan.learning_rate,
            };
            let (values, grads) = (&mut params.values, &params.grads);
            adamw_step(values, grads, &mut state, lr, plan).map_err(|e| match e {
                ProbeError::NonFinite(_) => ProbeError::Diverged {
                    epoch,
                    step,
                    loss: f64::from(loss),
                },
                other => other,
            })?;
            if params.values.iter().any(|v| !v.is_finite()) {
                return Err(ProbeError::Diverged {
                    epoch,
                    step,
                    loss: f64::from(loss),
                });
            }
            loss_sum += f64::from(loss) * chunk.len() as f64;
            step += 1;
        }

        let preds = predict(&params, data, &sp.val)?;
        let (metric, val_accuracy, val_f1) = select_metric(&preds, plan.early_stop_metric);
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / sp.train.len() as f64,
            val_loss: mean_nll(&preds),
            val_metric: metric,
            val_accuracy,
            val_f1,
            last_lr: lr,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} val {:?} {:.4}",
            log.train_loss,
            plan.early_stop_metric,
            metric
        );
        epochs.push(log);
        epoch_seconds.push(started.elapsed().as_secs_f64());

        let val_loss = epochs.last().map_or(f64::INFINITY, |e: &EpochLog| e.val_loss);
        if metric > best_metric || (metric == best_metric && val_loss < best_loss) {
            best_metric = metric;
            best_loss = val_loss;
            best_epoch = Some(epoch);
            best.values.clone_from(&params.values);
        }
        if let (Some(p), Some(b)) = (plan.patience, best_epoch) {
            if epoch - b >= p.max(1) {
                stopped_early = true;
                break;
            }
        }
    }

    best.zero_grad();
    let test = if sp.test.is_empty() {
        None
    } else {
        let p = predict(&best, data, &sp.test)?;
        Some(metrics::report(&p, &data.manifest().label_names))
    };
    let report = TrainReport {
        config: config.clone(),
        plan: plan.clone(),
        n_train: sp.train.len(),
        n_val: sp.val.len(),
        val_carved: sp.carved,
        epochs,
        best_epoch,
        best_val_metric: best_epoch.map(|_| best_metric),
        stopped_early,
        checkpoint_sha256: None,
        test,
    };
    Ok(TrainOutcome {
        report,
        params: best,
        epoch_seconds,
    })
}

/// [`train`] over a store opened elsewhere.
pub fn train_store(config: &ProbeConfig, plan: &TrainPlan, store: &Store) -> Result<TrainOutcome> {
    train(config, plan, &Data::new(store)?)
}

/// Writes `checkpoint/`, `report.json` and `timings.json` under `dir` and
/// fills in the report's checkpoint hash. `store_dir` is recorded in the
/// checkpoint so later commands can find the training store.
pub fn write_run(dir: impl AsRef<Path>, outcome: &mut TrainOutcome, store_dir: Option<&Path>) -> Result<()> {
    let dir = dir.as_ref();
    let r = &outcome.report;
    let mut training = BTreeMap::new();
    if let Some(s) = store_dir {
        let s = s.canonicalize().unwrap_or_else(|_| s.to_path_buf());
        training.insert("store".to_string(), json!(s.display().to_string()));
    }
    training.insert("plan".to_string(), serde_json::to_value(&r.plan).unwrap_or(Value::Null));
    training.insert("best_epoch".to_string(), json!(r.best_epoch));
    training.insert("best_val_metric".to_string(), json!(r.best_val_metric));
    let meta = save_checkpoint(dir.join("checkpoint"), &outcome.params, training)?;
    outcome.report.checkpoint_sha256 = Some(meta.bin_sha256);

    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(&outcome.report).map_err(|e| ProbeError::json(&path, e))?;
    std::fs::write(&path, text + "\n").map_err(|e| ProbeError::io(&path, e))?;

    let path = dir.join("timings.json");
    let text = serde_json::to_string_pretty(&json!({ "epoch_seconds": outcome.epoch_seconds }))
        .map_err(|e| ProbeError::json(&path, e))?;
    std::fs::write(&path, text + "\n").map_err(|e| ProbeError::io(&path, e))?;
    Ok(())
}
