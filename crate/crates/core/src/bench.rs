//! Probe-only cost: analytic multiply-accumulate counts and single-threaded
//! wall-clock timing of the forward pass on seeded random inputs.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::aggregators::{forward, Mechanism, ProbeConfig, ProbeParams};
use crate::error::{ProbeError, Result};
use crate::hstore::Batch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchShape {
    pub t: usize,
    pub d: usize,
    pub n_layers: usize,
}

/// Multiply-accumulates of one forward pass on a single example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub stage1: u64,
    pub stage2: u64,
    /// The linear head, identical across mechanisms.
    pub head: u64,
    /// Additions and comparisons of mean/max pooling, not counted as MACs.
    pub pool_ops: u64,
}

impl FlopCount {
    /// Aggregation cost, head excluded.
    pub fn aggregation(&self) -> u64 {
        self.stage1 + self.stage2
    }
}

/// Canonical attention cost over `n` rows: Q/K/V/O projections of every row
/// (`4 n d d_inner`) plus scores and weighted values (`2 n^2 d_inner`).
fn mha_macs(n: u64, d: u64, di: u64) -> u64 {
    4 * n * d * di + 2 * n * n * di
}

/// Closed-form MAC count. Pooling does additions and comparisons only and
/// counts 0. The scoring gate counts one `d`-dot per scored row plus one
/// `d`-wide accumulate per combined row.
pub fn flop_count(config: &ProbeConfig, shape: BenchShape) -> FlopCount {
    let (t, d, nl) = (shape.t as u64, shape.d as u64, shape.n_layers as u64);
    let pool_ops = match config.mechanism {
        Mechanism::ScoringGate => 0,
        Mechanism::Pooling | Mechanism::Mha => nl * t * d + nl * d,
    };
    let (stage1, stage2) = match config.mechanism {
        Mechanism::Pooling => (0, 0),
        Mechanism::ScoringGate => (2 * nl * t * d, 2 * nl * d),
        Mechanism::Mha => {
            let di = (shape.d / config.downcast_factor.max(1)) as u64;
            (nl * mha_macs(t, d, di), mha_macs(nl, d, di))
        }
    };
    FlopCount {
        stage1,
        stage2,
        head: config.n_classes as u64 * d,
        pool_ops,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub shape: BenchShape,
    pub n_samples: usize,
    pub batch_size: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl BenchOptions {
    pub fn new(shape: BenchShape, n_samples: usize) -> Self {
        BenchOptions {
            shape,
            n_samples,
            batch_size: 1,
            warmup: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub label: String,
    pub config: ProbeConfig,
    pub flops: FlopCount,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub samples_per_sec: f64,
    pub param_bytes: usize,
    /// Summaries, pooled vector, logits and peak attention buffers.
    pub transient_bytes: usize,
}

/// Timing supplied from outside the tool (e.g. a full serving stack), shown
/// alongside the measured rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalTiming {
    pub name: String,
    pub ms_per_sample: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub options: BenchOptions,
    pub entries: Vec<BenchEntry>,
    #[serde(default)]
    pub external: Vec<ExternalTiming>,
}

pub fn config_label(c: &ProbeConfig) -> String {
    match c.mechanism {
        Mechanism::Pooling => format!("pooling-{}", c.pool_op),
        Mechanism::ScoringGate => "scoring_gate".into(),
        Mechanism::Mha => format!("mha-h{}-f{}-{}", c.n_heads, c.downcast_factor, c.pool_op),
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    // nearest rank
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn random_batch(opts: &BenchOptions) -> Batch<f32> {
    let s = opts.shape;
    let b = opts.batch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    Batch {
        b,
        n_layers: s.n_layers,
        t: s.t,
        d: s.d,
        data: (0..b * s.n_layers * s.t * s.d)
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect(),
        mask: vec![true; b * s.t],
        labels: vec![0; b],
    }
}

/// Times `forward` for each config on the same seeded inputs. Warmup calls are
/// excluded; latency statistics are per sample, from per-call times divided
/// by the batch size. `n_samples == 0` yields no entries.
pub fn bench_probe(configs: &[ProbeConfig], opts: &BenchOptions) -> Result<BenchReport> {
    if opts.batch_size == 0 {
        return Err(ProbeError::Config("batch_size must be at least 1".into()));
    }
    let mut entries = Vec::new();
    if opts.n_samples > 0 {
        let batch = random_batch(opts);
        for cfg in configs {
            let mut cfg = cfg.clone();
            cfg.n_layers = opts.shape.n_layers;
            cfg.d = opts.shape.d;
            let params = ProbeParams::<f32>::init(&cfg)?;
            let mut scratch_floats = 0;
            for _ in 0..opts.warmup {
                scratch_floats = forward(&params, &batch, false)?.attention_scratch_floats;
            }
            let calls = opts.n_samples.div_ceil(opts.batch_size);
            let mut per_sample_ms = Vec::with_capacity(calls);
            let started = Instant::now();
            for _ in 0..calls {
                let t0 = Instant::now();
                let out = forward(&params, &batch, false)?;
                per_sample_ms.push(t0.elapsed().as_secs_f64() * 1e3 / opts.batch_size as f64);
                scratch_floats = scratch_floats.max(out.attention_scratch_floats);
                std::hint::black_box(&out.logits);
            }
            let total_s = started.elapsed().as_secs_f64();
            let mean_ms = per_sample_ms.iter().sum::<f64>() / calls as f64;
            per_sample_ms.sort_by(f64::total_cmp);
            let s = opts.shape;
            let fixed_floats = s.n_layers * s.d + s.d + cfg.n_classes;
            entries.push(BenchEntry {
                label: config_label(&cfg),
                flops: flop_count(&cfg, s),
                mean_ms,
                median_ms: percentile(&per_sample_ms, 0.5),
                p95_ms: percentile(&per_sample_ms, 0.95),
                samples_per_sec: (calls * opts.batch_size) as f64 / total_s.max(f64::MIN_POSITIVE),
                param_bytes: params.size_bytes(),
                transient_bytes: 4 * (scratch_floats + fixed_floats),
                config: cfg,
            });
        }
    }
    Ok(BenchReport {
        options: opts.clone(),
        entries,
        external: Vec::new(),
    })
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "label,flops_stage1,flops_stage2,flops_head,mean_ms,median_ms,p95_ms,samples_per_sec,param_bytes,transient_bytes\n",
        );
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                e.label,
                e.flops.stage1,
                e.flops.stage2,
                e.flops.head,
                e.mean_ms,
                e.median_ms,
                e.p95_ms,
                e.samples_per_sec,
                e.param_bytes,
                e.transient_bytes
            );
        }
        for x in &self.external {
            let _ = writeln!(s, "{},,,,{},,,,,", x.name, x.ms_per_sample);
        }
        s
    }
}
