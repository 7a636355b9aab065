//! Reference implementations shared by the integration tests. Nothing here
//! calls into the kernels being checked; everything is plain loops in f64.
#![allow(dead_code)]

use probeforge_core::aggregators::{Mechanism, PoolOp, ProbeConfig, ProbeParams};
use probeforge_core::hstore::{Batch, HiddenStateRecord, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// A random probe plus a padded batch whose masks each keep at least one token.
pub struct Instance {
    pub params: ProbeParams<f64>,
    pub batch: Batch<f64>,
}

pub fn random_config(rng: &mut ChaCha8Rng, mechanism: Mechanism, op: PoolOp) -> ProbeConfig {
    let n_layers = rng.random_range(1..=3);
    let n_classes = if rng.random_bool(0.5) { 2 } else { 4 };
    let (d, heads, f) = match mechanism {
        Mechanism::Mha => *[(8, 2, 2), (8, 1, 2), (8, 2, 1), (4, 1, 1), (6, 1, 2), (8, 4, 2)]
            .get(rng.random_range(0..6))
            .unwrap(),
        _ => (rng.random_range(1..=8), 1, 1),
    };
    let mut cfg = ProbeConfig::new(mechanism, n_layers, d, n_classes)
        .with_pool(op)
        .with_mha(heads, f)
        .with_seed(rng.random());
    cfg.mha_bias = mechanism == Mechanism::Mha && rng.random_bool(0.5);
    cfg
}

pub fn random_batch(rng: &mut ChaCha8Rng, cfg: &ProbeConfig, b: usize, t: usize) -> Batch<f64> {
    let mut mask = vec![false; b * t];
    for i in 0..b {
        let len = rng.random_range(1..=t);
        mask[i * t..i * t + len].fill(true);
    }
    Batch {
        b,
        n_layers: cfg.n_layers,
        t,
        d: cfg.d,
        data: uniform(rng, b * cfg.n_layers * t * cfg.d, 1.5),
        mask,
        labels: (0..b).map(|_| rng.random_range(0..cfg.n_classes)).collect(),
    }
}

/// Random instance with every parameter (biases included) drawn uniformly.
pub fn random_instance(seed: u64, mechanism: Mechanism, op: PoolOp) -> Instance {
    let mut r = rng(seed);
    let cfg = random_config(&mut r, mechanism, op);
    let mut params = ProbeParams::<f64>::zeros(&cfg).unwrap();
    let n = params.len();
    params.values = uniform(&mut r, n, 0.8);
    let b = r.random_range(1..=3);
    let t = r.random_range(1..=5);
    let batch = random_batch(&mut r, &cfg, b, t);
    Instance { params, batch }
}

fn tensor<'a>(p: &'a ProbeParams<f64>, name: &str) -> &'a [f64] {
    p.tensor(name).unwrap_or_else(|| panic!("missing tensor {name}"))
}

fn pool(rows: &[Vec<f64>], op: PoolOp) -> Vec<f64> {
    let d = rows[0].len();
    let mut out = vec![0.0; d];
    for j in 0..d {
        out[j] = match op {
            PoolOp::Mean => rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64,
            PoolOp::Max => rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max),
        };
    }
    out
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Gate over `rows`: weights and combined vector.
pub fn gate(rows: &[Vec<f64>], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let scores: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().zip(w).map(|(a, b)| a * b).sum::<f64>().tanh())
        .collect();
    let a = softmax(&scores);
    let d = w.len();
    let mut v = vec![0.0; d];
    for (r, &ai) in rows.iter().zip(&a) {
        for j in 0..d {
            v[j] += ai * r[j];
        }
    }
    (a, v)
}

/// `x W` for `W` stored row-major `[rows(x), cols]`.
fn matvec(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (p, &xp) in x.iter().enumerate() {
        for c in 0..cols {
            out[c] += xp * w[p * cols + c];
        }
    }
    out
}

/// One attention module over `rows`, then pooling.
pub fn mha(p: &ProbeParams<f64>, prefix: &str, rows: &[Vec<f64>], op: PoolOp) -> Vec<f64> {
    let cfg = p.config();
    let (d, di, heads) = (cfg.d, cfg.d_inner(), cfg.n_heads);
    let dh = di / heads;
    let bias = |name: &str, n: usize| -> Vec<f64> {
        p.tensor(&format!("{prefix}.{name}")).map_or(vec![0.0; n], <[f64]>::to_vec)
    };
    let proj = |w: &str, b: &str| -> Vec<Vec<f64>> {
        let bv = bias(b, di);
        rows.iter()
            .map(|x| {
                let mut y = matvec(x, tensor(p, &format!("{prefix}.{w}")), di);
                for (a, c) in y.iter_mut().zip(&bv) {
                    *a += c;
                }
                y
            })
            .collect()
    };
    let (q, k, v) = (proj("w_q", "b_q"), proj("w_k", "b_k"), proj("w_v", "b_v"));
    let n = rows.len();
    let mut o = vec![vec![0.0; di]; n];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let a = softmax(&scores);
            for c in cols.clone() {
                o[i][c] = (0..n).map(|j| a[j] * v[j][c]).sum();
            }
        }
    }
    let bo = bias("b_o", d);
    let y: Vec<Vec<f64>> = o
        .iter()
        .map(|oi| {
            let mut r = matvec(oi, tensor(p, &format!("{prefix}.w_o")), d);
            for (a, c) in r.iter_mut().zip(&bo) {
                *a += c;
            }
            r
        })
        .collect();
    pool(&y, op)
}

/// Valid rows of layer `l` of example `i` as owned vectors.
pub fn layer_rows(batch: &Batch<f64>, i: usize, l: usize) -> Vec<Vec<f64>> {
    let (t, d) = (batch.t, batch.d);
    let x = batch.example(i);
    (0..t)
        .filter(|&tok| batch.mask_row(i)[tok])
        .map(|tok| x[(l * t + tok) * d..(l * t + tok + 1) * d].to_vec())
        .collect()
}

/// Stage-2 output `v` for example `i`.
pub fn oracle_v(p: &ProbeParams<f64>, batch: &Batch<f64>, i: usize) -> Vec<f64> {
    let cfg = p.config();
    let summaries: Vec<Vec<f64>> = (0..cfg.n_layers)
        .map(|l| {
            let rows = layer_rows(batch, i, l);
            match cfg.mechanism {
                Mechanism::Pooling => pool(&rows, cfg.pool_op),
                Mechanism::ScoringGate => gate(&rows, tensor(p, &format!("gate.token.{l}"))).1,
                Mechanism::Mha => mha(p, &format!("mha.token.{l}"), &rows, cfg.pool_op),
            }
        })
        .collect();
    match cfg.mechanism {
        Mechanism::Pooling => pool(&summaries, cfg.pool_op),
        Mechanism::ScoringGate => gate(&summaries, tensor(p, "gate.layer")).1,
        Mechanism::Mha => mha(p, "mha.layer", &summaries, cfg.pool_op),
    }
}

pub fn oracle_logits(p: &ProbeParams<f64>, batch: &Batch<f64>) -> Vec<f64> {
    let cfg = p.config();
    let (w, b) = (tensor(p, "head.weight"), tensor(p, "head.bias"));
    let mut out = Vec::new();
    for i in 0..batch.b {
        let v = oracle_v(p, batch, i);
        for c in 0..cfg.n_classes {
            out.push(b[c] + (0..cfg.d).map(|j| w[c * cfg.d + j] * v[j]).sum::<f64>());
        }
    }
    out
}

pub fn oracle_loss(p: &ProbeParams<f64>, batch: &Batch<f64>) -> f64 {
    let c = p.config().n_classes;
    let z = oracle_logits(p, batch);
    let mut total = 0.0;
    for i in 0..batch.b {
        let row = &z[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[batch.labels[i]];
    }
    total / batch.b as f64
}

/// Central differences of `f` at every coordinate of `x`.
pub fn numeric_grad(x: &mut [f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let up = f(x);
        x[i] = orig - eps;
        let down = f(x);
        x[i] = orig;
        g[i] = (up - down) / (2.0 * eps);
    }
    g
}

/// `||a - b|| / max(||a||, ||b||)`, 0 when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Average precision by explicit enumeration of every threshold taken from the
/// distinct scores: at threshold `s`, predict positive iff score >= s.
pub fn brute_force_ap(scores: &[f64], positive: &[bool]) -> f64 {
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &s in &thresholds {
        let tp = scores.iter().zip(positive).filter(|(&x, &p)| x >= s && p).count() as f64;
        let pp = scores.iter().filter(|&&x| x >= s).count() as f64;
        let recall = tp / n_pos;
        ap += (recall - prev_recall) * (tp / pp);
        prev_recall = recall;
    }
    ap
}

/// ROC curve through all `n + 1` thresholds, integrated with the trapezoid
/// rule.
pub fn trapezoid_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let n_neg = positive.len() as f64 - n_pos;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for &s in &thresholds {
        let tp = scores.iter().zip(positive).filter(|(&x, &p)| x >= s && p).count() as f64;
        let fp = scores.iter().zip(positive).filter(|(&x, &p)| x >= s && !p).count() as f64;
        pts.push((fp / n_neg, tp / n_pos));
    }
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

pub fn record(rng: &mut ChaCha8Rng, id: &str, n_layers: usize, t: usize, d: usize, label: usize) -> HiddenStateRecord {
    let tensor = (0..n_layers * t * d).map(|_| rng.random_range(-4.0f32..4.0)).collect();
    HiddenStateRecord::new(id, Split::Train, label, n_layers, t, d, tensor).unwrap()
}
