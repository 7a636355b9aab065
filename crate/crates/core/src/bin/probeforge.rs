use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Map, Value};

use probeforge_core::aggregators::{count_params, forward, load_checkpoint, probabilities, Mechanism, PoolOp, ProbeConfig};
use probeforge_core::analysis::{attention_report, token_report, token_report_csv};
use probeforge_core::bench::{bench_probe, BenchOptions, BenchShape, ExternalTiming};
use probeforge_core::hstore::{batch_tight, Split, Store};
use probeforge_core::synth::{generate, SynthMode, SynthSpec};
use probeforge_core::trainer::{
    evaluate, sensitivity, sensitivity_csv, sweep, train, write_run, Data, EarlyStopMetric, SweepGrid, TrainPlan,
};
use probeforge_core::{ProbeError, Result};

#[derive(Parser)]
#[command(name = "probeforge", version, about = "Train and analyze aggregation probes over cached hidden states")]
struct Cli {
    /// Print machine-readable JSON on stdout
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic store from a SynthSpec JSON file
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the spec seed
        #[arg(long)]
        seed: Option<u64>,
        /// Emit the dilution instance for the spec
        #[arg(long)]
        dilution: bool,
    },
    /// Train a probe on a store
    Train {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
        /// Comma-separated seeds; runs each and reports mean and std
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Train every point of a grid
    Sweep {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Metrics of a checkpoint on one split
    Eval {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Label, probabilities and optional aggregation weights for one record
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        record_id: String,
        /// Store holding the record; defaults to the store the checkpoint was trained on
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        trace: bool,
    },
    /// Stage-2 layer weight profiles stratified by label and correctness
    AttentionReport {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Write the CSV here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top relative token positions per layer by Stage-1 weight
    TokenReport {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 3)]
        top_k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time probe forward passes on random inputs
    Bench {
        #[arg(long, default_value_t = 512)]
        t: usize,
        #[arg(long, default_value_t = 3072)]
        d: usize,
        #[arg(long, default_value_t = 29)]
        n_layers: usize,
        #[arg(long, default_value_t = 2)]
        n_classes: usize,
        /// Mechanisms to time
        #[arg(long, value_delimiter = ',', default_value = "pooling,scoring_gate,mha")]
        mechanisms: Vec<Mechanism>,
        #[arg(long, value_delimiter = ',', default_value = "4")]
        downcast: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value = "mean")]
        pool_op: PoolOp,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        batch_size: usize,
        #[arg(long, default_value_t = 50)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON list of {"name", "ms_per_sample"} shown next to measured rows
        #[arg(long)]
        external: Option<PathBuf>,
        /// Also write the CSV table here
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Parameter count breakdown for a probe configuration
    Params {
        #[arg(long, default_value = "scoring_gate")]
        mechanism: Mechanism,
        #[arg(long, default_value_t = 3072)]
        d: usize,
        /// Captured matrices with a Stage-1 module each
        #[arg(long, default_value_t = 28)]
        n_layers: usize,
        #[arg(long, default_value_t = 2)]
        n_classes: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 4)]
        downcast: usize,
        #[arg(long)]
        bias: bool,
    },
    /// Summarize a store
    Inspect {
        #[arg(long)]
        store: PathBuf,
    },
}

/// Probe and plan settings. Flags override the JSON files, which override
/// built-in defaults.
#[derive(Args, Clone)]
struct Settings {
    /// ProbeConfig JSON; n_layers, d and n_classes default to the store's
    #[arg(long)]
    config: Option<PathBuf>,
    /// TrainPlan JSON
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    mechanism: Option<Mechanism>,
    #[arg(long)]
    pool_op: Option<PoolOp>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    downcast: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    metric: Option<String>,
    /// Seeds both initialization and shuffling
    #[arg(long)]
    seed: Option<u64>,
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| ProbeError::Io {
        path: path.into(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| ProbeError::Json {
        path: path.into(),
        source: e,
    })
}

/// Layers `file` then `flags` over `defaults`, recording where each field came from.
fn layer(defaults: Value, file: Option<Value>, flags: Map<String, Value>, sources: &mut BTreeMap<String, &'static str>) -> Result<Value> {
    let mut obj = match defaults {
        Value::Object(m) => m,
        _ => unreachable!("defaults are objects"),
    };
    for k in obj.keys() {
        sources.insert(k.clone(), "default");
    }
    if let Some(f) = file {
        let Value::Object(f) = f else {
            return Err(ProbeError::Config("config files must hold a JSON object".into()));
        };
        for (k, v) in f {
            sources.insert(k.clone(), "file");
            obj.insert(k, v);
        }
    }
    for (k, v) in flags {
        sources.insert(k.clone(), "flag");
        obj.insert(k, v);
    }
    Ok(Value::Object(obj))
}

fn resolve_settings(s: &Settings, store: &Store) -> Result<(ProbeConfig, TrainPlan)> {
    let m = store.manifest();
    let base = ProbeConfig::new(Mechanism::ScoringGate, m.n_layers, m.d, m.n_classes());
    let mut cfg_flags = Map::new();
    if let Some(v) = s.mechanism {
        cfg_flags.insert("mechanism".into(), json!(v));
    }
    if let Some(v) = s.pool_op {
        cfg_flags.insert("pool_op".into(), json!(v));
    }
    if let Some(v) = s.heads {
        cfg_flags.insert("n_heads".into(), json!(v));
    }
    if let Some(v) = s.downcast {
        cfg_flags.insert("downcast_factor".into(), json!(v));
    }
    let mut plan_flags = Map::new();
    if let Some(v) = s.lr {
        plan_flags.insert("learning_rate".into(), json!(v));
    }
    if let Some(v) = s.batch_size {
        plan_flags.insert("batch_size".into(), json!(v));
    }
    if let Some(v) = s.epochs {
        plan_flags.insert("max_epochs".into(), json!(v));
    }
    if let Some(v) = s.weight_decay {
        plan_flags.insert("weight_decay".into(), json!(v));
    }
    if let Some(v) = s.patience {
        plan_flags.insert("patience".into(), json!(v));
    }
    if let Some(v) = &s.metric {
        let m: EarlyStopMetric = serde_json::from_value(json!(v))
            .map_err(|_| ProbeError::Config(format!("unknown metric {v:?} (f1 or accuracy)")))?;
        plan_flags.insert("early_stop_metric".into(), json!(m));
    }
    if let Some(v) = s.seed {
        cfg_flags.insert("seed".into(), json!(v));
        plan_flags.insert("seed".into(), json!(v));
    }

    let mut cfg_src = BTreeMap::new();
    let cfg_file = s.config.as_deref().map(read_json).transpose()?;
    let cfg = layer(json!(base), cfg_file, cfg_flags, &mut cfg_src)?;
    let cfg: ProbeConfig = serde_json::from_value(cfg).map_err(|e| ProbeError::Config(format!("probe config: {e}")))?;

    let mut plan_src = BTreeMap::new();
    let plan_file = s.plan.as_deref().map(read_json).transpose()?;
    let plan = layer(json!(TrainPlan::default()), plan_file, plan_flags, &mut plan_src)?;
    let plan: TrainPlan = serde_json::from_value(plan).map_err(|e| ProbeError::Config(format!("train plan: {e}")))?;

    let cfg_v = json!(cfg);
    for (k, src) in &cfg_src {
        eprintln!("config {k} = {} ({src})", cfg_v.get(k).unwrap_or(&Value::Null));
    }
    let plan_v = json!(plan);
    for (k, src) in &plan_src {
        eprintln!("plan {k} = {} ({src})", plan_v.get(k).unwrap_or(&Value::Null));
    }
    cfg.validate()?;
    plan.validate()?;
    Ok((cfg, plan))
}

fn emit<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| ProbeError::Config(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| ProbeError::Io {
            path: parent.into(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| ProbeError::Io {
        path: path.into(),
        source: e,
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn cmd_train(json_out: bool, store: &Path, out: &Path, settings: &Settings, seeds: &[u64]) -> Result<()> {
    let store = Store::open(store)?;
    let data = Data::new(&store)?;
    let (cfg, plan) = resolve_settings(settings, &store)?;
    if seeds.is_empty() {
        let mut outcome = train(&cfg, &plan, &data)?;
        write_run(out, &mut outcome, Some(store.dir()))?;
        let r = &outcome.report;
        if json_out {
            return emit(r);
        }
        println!("best epoch: {:?}", r.best_epoch);
        println!("best val {:?}: {:?}", plan.early_stop_metric, r.best_val_metric);
        if let Some(t) = &r.test {
            println!("test f1 {:.4} accuracy {:.4}", t.f1, t.accuracy);
        }
        println!("checkpoint sha256: {}", r.checkpoint_sha256.as_deref().unwrap_or("-"));
        return Ok(());
    }

    let mut rows = Vec::new();
    for &seed in seeds {
        let (mut c, mut p) = (cfg.clone(), plan.clone());
        c.seed = seed;
        p.seed = seed;
        let mut outcome = train(&c, &p, &data)?;
        write_run(out.join(format!("seed-{seed}")), &mut outcome, Some(store.dir()))?;
        rows.push(outcome.report);
    }
    let collect = |f: &dyn Fn(&probeforge_core::trainer::TrainReport) -> Option<f64>| -> Option<(f64, f64)> {
        let xs: Option<Vec<f64>> = rows.iter().map(f).collect();
        xs.filter(|v| !v.is_empty()).map(|v| mean_std(&v))
    };
    let val = collect(&|r| r.best_val_metric);
    let test_f1 = collect(&|r| r.test.as_ref().map(|t| t.f1));
    let test_acc = collect(&|r| r.test.as_ref().map(|t| t.accuracy));
    let summary = json!({
        "seeds": seeds,
        "val_metric": val.map(|(m, s)| json!({"mean": m, "std": s})),
        "test_f1": test_f1.map(|(m, s)| json!({"mean": m, "std": s})),
        "test_accuracy": test_acc.map(|(m, s)| json!({"mean": m, "std": s})),
        "checkpoint_sha256": rows.iter().map(|r| r.checkpoint_sha256.clone()).collect::<Vec<_>>(),
    });
    write_file(&out.join("summary.json"), &(serde_json::to_string_pretty(&summary).unwrap_or_default() + "\n"))?;
    if json_out {
        return emit(&summary);
    }
    let fmt = |x: Option<(f64, f64)>| x.map_or("-".to_string(), |(m, s)| format!("{m:.4} ± {s:.4}"));
    println!("val {:?}: {}", plan.early_stop_metric, fmt(val));
    println!("test f1: {}", fmt(test_f1));
    println!("test accuracy: {}", fmt(test_acc));
    for (seed, r) in seeds.iter().zip(&rows) {
        println!("seed {seed} checkpoint sha256: {}", r.checkpoint_sha256.as_deref().unwrap_or("-"));
    }
    Ok(())
}

fn cmd_sweep(json_out: bool, store: &Path, grid: &Path, out: &Path, settings: &Settings, jobs: usize) -> Result<()> {
    let store = Store::open(store)?;
    let data = Data::new(&store)?;
    let (cfg, plan) = resolve_settings(settings, &store)?;
    let grid: SweepGrid = serde_json::from_value(read_json(grid)?).map_err(|e| ProbeError::Config(format!("grid: {e}")))?;
    let runs = sweep(&grid, &cfg, &plan, &data, jobs, Some(out))?;
    let rows = sensitivity(&grid, &runs);
    write_file(&out.join("sensitivity.csv"), &sensitivity_csv(&rows))?;
    let ranked: Vec<Value> = runs
        .iter()
        .map(|r| json!({"index": r.index, "point": r.point, "metric": r.metric, "error": r.error}))
        .collect();
    write_file(&out.join("sweep.json"), &(serde_json::to_string_pretty(&runs).unwrap_or_default() + "\n"))?;
    if json_out {
        return emit(&ranked);
    }
    for r in &runs {
        let point = serde_json::to_string(&r.point).unwrap_or_default();
        match (r.metric, &r.error) {
            (Some(m), _) => println!("#{:<4} {m:.4} {point}", r.index),
            (None, Some(e)) => println!("#{:<4} failed {point}: {e}", r.index),
            (None, None) => println!("#{:<4} - {point}", r.index),
        }
    }
    Ok(())
}

fn cmd_predict(json_out: bool, ckpt: &Path, id: &str, store: Option<&Path>, trace: bool) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let store_dir = match store {
        Some(s) => s.to_path_buf(),
        None => ck
            .meta
            .training
            .get("store")
            .and_then(Value::as_str)
            .map(PathBuf::from)
            .ok_or_else(|| ProbeError::Config("checkpoint does not name its store; pass --store".into()))?,
    };
    let store = Store::open(store_dir)?;
    let rec = store.record_by_id(id)?;
    let batch = batch_tight(std::slice::from_ref(&rec))?;
    let out = forward(&ck.params, &batch, trace)?;
    let c = ck.params.config().n_classes;
    let z: Vec<f64> = out.logits.iter().map(|&v| f64::from(v)).collect();
    let p = probabilities(&z, c);
    let pred = (0..c).fold(0, |best, k| if p[k] > p[best] { k } else { best });
    let names = &store.manifest().label_names;
    let tr = out.traces.and_then(|mut t| t.pop()).flatten();
    let result = json!({
        "record_id": rec.id,
        "label": names.get(pred),
        "label_index": pred,
        "true_label": names.get(rec.label),
        "probabilities": names.iter().cloned().zip(p.iter().copied()).collect::<BTreeMap<String, f64>>(),
        "trace": tr,
    });
    if json_out {
        return emit(&result);
    }
    println!("{}: {} ({:.4})", rec.id, names[pred], p[pred]);
    for (n, v) in names.iter().zip(&p) {
        println!("  p({n}) = {v:.6}");
    }
    if let Some(tr) = tr {
        let lw: Vec<String> = tr.layer_weights.iter().map(|w| format!("{w:.4}")).collect();
        println!("  layer weights: {}", lw.join(" "));
    }
    Ok(())
}

fn cmd_inspect(json_out: bool, store: &Path) -> Result<()> {
    let store = Store::open(store)?;
    let m = store.manifest();
    let mut per_split = BTreeMap::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let idx = store.split_indices(split);
        let mut labels = vec![0usize; m.n_classes()];
        for &i in &idx {
            labels[m.records[i].label] += 1;
        }
        per_split.insert(split.to_string(), json!({"n": idx.len(), "labels": labels}));
    }
    let t: Vec<usize> = m.records.iter().map(|r| r.t).collect();
    let summary = json!({
        "dir": store.dir(),
        "format_version": m.format_version,
        "n_records": store.len(),
        "n_layers": m.n_layers,
        "d": m.d,
        "dtype": m.dtype,
        "label_names": m.label_names,
        "t_min": t.iter().min(),
        "t_max": t.iter().max(),
        "splits": per_split,
        "provenance": m.provenance,
    });
    if json_out {
        return emit(&summary);
    }
    println!("{}", store.dir().display());
    println!("  records: {}  layers: {}  d: {}  dtype: {:?}", store.len(), m.n_layers, m.d, m.dtype);
    println!("  labels: {}", m.label_names.join(", "));
    if let (Some(lo), Some(hi)) = (t.iter().min(), t.iter().max()) {
        println!("  tokens per record: {lo}..={hi}");
    }
    for (k, v) in &per_split {
        println!("  {k}: {} {}", v["n"], v["labels"]);
    }
    for (k, v) in &m.provenance {
        println!("  provenance {k}: {v}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let json_out = cli.json;
    match cli.cmd {
        Cmd::Synth {
            spec,
            out,
            seed,
            dilution,
        } => {
            let mut spec: SynthSpec =
                serde_json::from_value(read_json(&spec)?).map_err(|e| ProbeError::Config(format!("synth spec: {e}")))?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            if dilution {
                spec.mode = SynthMode::Dilution;
            }
            let m = generate(&spec, &out)?;
            let summary = json!({"out": out, "n_records": m.records.len(), "provenance": m.provenance});
            if json_out {
                return emit(&summary);
            }
            println!("wrote {} records to {}", m.records.len(), out.display());
            for k in ["oracle_accuracy", "oracle_closed_form_accuracy", "single_site_oracle_accuracy", "mean_pool_oracle_accuracy"] {
                if let Some(v) = m.provenance.get(k) {
                    println!("  {k}: {v}");
                }
            }
            Ok(())
        }
        Cmd::Train {
            store,
            out,
            settings,
            seeds,
        } => cmd_train(json_out, &store, &out, &settings, &seeds),
        Cmd::Sweep {
            store,
            grid,
            out,
            settings,
            jobs,
        } => cmd_sweep(json_out, &store, &grid, &out, &settings, jobs),
        Cmd::Eval { store, ckpt, split } => {
            let store = Store::open(store)?;
            let ck = load_checkpoint(ckpt)?;
            let report = evaluate(&ck.params, &Data::new(&store)?, split)?;
            emit(&report)
        }
        Cmd::Predict {
            ckpt,
            record_id,
            store,
            trace,
        } => cmd_predict(json_out, &ckpt, &record_id, store.as_deref(), trace),
        Cmd::AttentionReport { store, ckpt, split, out } => {
            let store = Store::open(store)?;
            let ck = load_checkpoint(ckpt)?;
            let report = attention_report(&ck.params, &Data::new(&store)?, split)?;
            if let Some(path) = &out {
                write_file(path, &report.to_csv())?;
            }
            if json_out {
                emit(&report)
            } else {
                if out.is_none() {
                    print!("{}", report.to_csv());
                }
                Ok(())
            }
        }
        Cmd::TokenReport {
            store,
            ckpt,
            split,
            top_k,
            out,
        } => {
            let store = Store::open(store)?;
            let ck = load_checkpoint(ckpt)?;
            let rows = token_report(&ck.params, &Data::new(&store)?, split, top_k)?;
            let csv = token_report_csv(&rows);
            if let Some(path) = &out {
                write_file(path, &csv)?;
            }
            if json_out {
                emit(&rows)
            } else {
                if out.is_none() {
                    print!("{csv}");
                }
                Ok(())
            }
        }
        Cmd::Bench {
            t,
            d,
            n_layers,
            n_classes,
            mechanisms,
            downcast,
            heads,
            pool_op,
            samples,
            batch_size,
            warmup,
            seed,
            external,
            csv,
        } => {
            let mut configs = Vec::new();
            for mech in mechanisms {
                let base = ProbeConfig::new(mech, n_layers, d, n_classes).with_pool(pool_op).with_seed(seed);
                if mech == Mechanism::Mha {
                    configs.extend(downcast.iter().map(|&f| base.clone().with_mha(heads, f)));
                } else {
                    configs.push(base);
                }
            }
            let opts = BenchOptions {
                shape: BenchShape { t, d, n_layers },
                n_samples: samples,
                batch_size,
                warmup,
                seed,
            };
            let mut report = bench_probe(&configs, &opts)?;
            if let Some(path) = external {
                report.external = serde_json::from_value::<Vec<ExternalTiming>>(read_json(&path)?)
                    .map_err(|e| ProbeError::Config(format!("external timings: {e}")))?;
            }
            if let Some(path) = &csv {
                write_file(path, &report.to_csv())?;
            }
            if json_out {
                emit(&report)
            } else {
                print!("{}", report.to_csv());
                Ok(())
            }
        }
        Cmd::Params {
            mechanism,
            d,
            n_layers,
            n_classes,
            heads,
            downcast,
            bias,
        } => {
            let mut cfg = ProbeConfig::new(mechanism, n_layers, d, n_classes).with_mha(heads, downcast);
            cfg.mha_bias = bias;
            cfg.validate()?;
            let c = count_params(&cfg);
            if json_out {
                return emit(&json!({"config": cfg, "params": c}));
            }
            println!("mechanism: {mechanism}  d: {d}  n_layers: {n_layers}  classes: {n_classes}");
            println!("stage 1: {:>14}", group(c.stage1));
            println!("stage 2: {:>14}", group(c.stage2));
            println!("gates:   {:>14}  (stage 1 + stage 2)", group(c.stage1 + c.stage2));
            println!("head:    {:>14}", group(c.head));
            println!("total:   {:>14}  ({:.2}M)", group(c.total), c.total as f64 / 1e6);
            Ok(())
        }
        Cmd::Inspect { store } => cmd_inspect(json_out, &store),
    }
}

fn group(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PROBEFORGE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
