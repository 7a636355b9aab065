//! Aggregation-weight analysis over a store split: Stage-2 layer profiles
//! stratified by label and correctness, and Stage-1 token-position profiles.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::aggregators::{forward, params_sha256, probabilities, AttentionTrace, Mechanism, ProbeParams};
use crate::error::{ProbeError, Result};
use crate::hstore::{Batch, Split};
use crate::metrics::{stratify, ScoredPredictions};
use crate::trainer::{positive_class, Data};

const BATCH: usize = 64;
pub const N_BUCKETS: usize = 10;

struct Traced {
    preds: ScoredPredictions,
    traces: Vec<AttentionTrace>,
    /// Valid token count per example.
    lengths: Vec<usize>,
}

fn valid_len(batch: &Batch<f32>, i: usize) -> usize {
    batch.mask_row(i).iter().filter(|&&m| m).count()
}

fn collect(params: &ProbeParams<f32>, data: &Data, split: Split) -> Result<Traced> {
    let cfg = params.config();
    if cfg.mechanism == Mechanism::Pooling {
        return Err(ProbeError::Unsupported(
            "pooling probes have no aggregation weights to report".into(),
        ));
    }
    let idx = data.store().split_indices(split);
    if idx.is_empty() {
        return Err(ProbeError::EmptySplit(split.to_string()));
    }
    let c = cfg.n_classes;
    let (mut scores, mut labels, mut traces, mut lengths) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for chunk in idx.chunks(BATCH) {
        let batch = data.batch(chunk)?;
        let out = forward(params, &batch, true)?;
        let z: Vec<f64> = out.logits.iter().map(|&v| f64::from(v)).collect();
        scores.extend(probabilities(&z, c));
        labels.extend_from_slice(&batch.labels);
        for (i, tr) in out.traces.unwrap_or_default().into_iter().enumerate() {
            traces.push(tr.ok_or_else(|| ProbeError::Unsupported("probe produced no trace".into()))?);
            lengths.push(valid_len(&batch, i));
        }
    }
    let preds = ScoredPredictions::new(c, scores, labels, positive_class(data.manifest()))?;
    Ok(Traced { preds, traces, lengths })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupProfile {
    pub label: usize,
    pub label_name: String,
    pub correct: bool,
    pub n: usize,
    /// Per layer; empty when `n == 0`.
    pub mean_weight: Vec<f64>,
    /// Population standard deviation per layer.
    pub std_weight: Vec<f64>,
}

/// Cosine similarity of a misclassified group's profile to each non-empty
/// correctly classified group's profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MirrorCheck {
    pub label: usize,
    pub cosine_to_correct: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub checkpoint_sha256: String,
    pub split: Split,
    pub n_layers: usize,
    pub uniform_baseline: f64,
    pub groups: Vec<GroupProfile>,
    pub mirror: Vec<MirrorCheck>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Stage-2 layer-weight profile (mean and std per layer) for every
/// `(label, correct)` group of `split`. Attention probes report attention
/// received per layer; pooling probes are rejected.
pub fn attention_report(params: &ProbeParams<f32>, data: &Data, split: Split) -> Result<AttentionReport> {
    let traced = collect(params, data, split)?;
    let n_layers = params.config().n_layers;
    let names = &data.manifest().label_names;
    let groups: Vec<GroupProfile> = stratify(&traced.preds)
        .into_iter()
        .map(|g| {
            let n = g.indices.len();
            let (mut mean, mut std) = (Vec::new(), Vec::new());
            if n > 0 {
                mean = vec![0.0; n_layers];
                for &i in &g.indices {
                    for (m, &w) in mean.iter_mut().zip(&traced.traces[i].layer_weights) {
                        *m += w;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                std = (0..n_layers)
                    .map(|l| {
                        let var = g
                            .indices
                            .iter()
                            .map(|&i| (traced.traces[i].layer_weights[l] - mean[l]).powi(2))
                            .sum::<f64>()
                            / n as f64;
                        var.sqrt()
                    })
                    .collect();
            }
            GroupProfile {
                label: g.label,
                label_name: names.get(g.label).cloned().unwrap_or_else(|| g.label.to_string()),
                correct: g.correct,
                n,
                mean_weight: mean,
                std_weight: std,
            }
        })
        .collect();

    let mirror = groups
        .iter()
        .filter(|g| !g.correct && g.n > 0)
        .map(|err| MirrorCheck {
            label: err.label,
            cosine_to_correct: groups
                .iter()
                .filter(|g| g.correct && g.n > 0)
                .map(|g| (g.label_name.clone(), cosine(&err.mean_weight, &g.mean_weight)))
                .collect(),
        })
        .collect();

    Ok(AttentionReport {
        checkpoint_sha256: params_sha256(params),
        split,
        n_layers,
        uniform_baseline: 1.0 / n_layers as f64,
        groups,
        mirror,
    })
}

impl AttentionReport {
    /// `group_label,group_correct,layer,mean_weight,std_weight,n` rows under a
    /// `#` comment header. Empty groups have no rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# checkpoint_sha256: {}", self.checkpoint_sha256);
        let _ = writeln!(s, "# split: {}", self.split);
        let _ = writeln!(s, "# uniform_baseline: {}", self.uniform_baseline);
        let _ = writeln!(
            s,
            "# expectation (not asserted): at backbone scale the positive class tends to put its weight on later layers"
        );
        for m in &self.mirror {
            let name = self
                .groups
                .iter()
                .find(|g| g.label == m.label)
                .map_or_else(|| m.label.to_string(), |g| g.label_name.clone());
            let sims: Vec<String> = m.cosine_to_correct.iter().map(|(k, v)| format!("{k}={v:.6}")).collect();
            let _ = writeln!(s, "# mirror: misclassified {name} cosine to correct profiles: {}", sims.join(" "));
        }
        s.push_str("group_label,group_correct,layer,mean_weight,std_weight,n\n");
        for g in self.groups.iter().filter(|g| g.n > 0) {
            for l in 0..self.n_layers {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    g.label_name, g.correct, l, g.mean_weight[l], g.std_weight[l], g.n
                );
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRow {
    pub layer: usize,
    pub rank: usize,
    /// Decile of relative position, `0..10`.
    pub bucket: usize,
    pub mean_weight: f64,
}

/// Decile of token `pos` in a sequence of `t` tokens.
pub fn position_bucket(pos: usize, t: usize) -> usize {
    ((pos * N_BUCKETS) / t.max(1)).min(N_BUCKETS - 1)
}

/// Per layer, the `top_k` relative-position deciles by mean Stage-1 weight.
/// Each example contributes its summed token weight per decile; deciles no
/// example reaches are omitted. Ties rank the earlier decile first.
pub fn token_report(params: &ProbeParams<f32>, data: &Data, split: Split, top_k: usize) -> Result<Vec<TokenRow>> {
    let traced = collect(params, data, split)?;
    let n_layers = params.config().n_layers;
    let n = traced.traces.len() as f64;
    let mut rows = Vec::new();
    for l in 0..n_layers {
        let mut sums = [0.0f64; N_BUCKETS];
        let mut seen = [false; N_BUCKETS];
        for (tr, &len) in traced.traces.iter().zip(&traced.lengths) {
            // valid positions are a prefix of the padded row
            for (pos, &w) in tr.token_row(l)[..len].iter().enumerate() {
                let b = position_bucket(pos, len);
                sums[b] += w;
                seen[b] = true;
            }
        }
        let mut ranked: Vec<usize> = (0..N_BUCKETS).filter(|&b| seen[b]).collect();
        ranked.sort_by(|&a, &b| sums[b].total_cmp(&sums[a]).then(a.cmp(&b)));
        for (rank, &b) in ranked.iter().take(top_k).enumerate() {
            rows.push(TokenRow {
                layer: l,
                rank,
                bucket: b,
                mean_weight: sums[b] / n,
            });
        }
    }
    Ok(rows)
}

pub fn token_report_csv(rows: &[TokenRow]) -> String {
    let mut s = String::from("layer,rank,bucket,position_range,mean_weight\n");
    for r in rows {
        let lo = r.bucket as f64 / N_BUCKETS as f64;
        let hi = (r.bucket + 1) as f64 / N_BUCKETS as f64;
        let _ = writeln!(s, "{},{},{},{lo:.1}-{hi:.1},{}", r.layer, r.rank, r.bucket, r.mean_weight);
    }
    s
}
