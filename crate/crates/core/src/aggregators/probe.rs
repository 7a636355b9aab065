use serde::{Deserialize, Serialize};

use super::gate::{gate_backward, gate_forward, GateCache};
use super::mha::{mha_backward, mha_infer, mha_train_forward, MhaCache, MhaGrads, MhaScratch, MhaWeights};
use super::params::{MhaSlot, ProbeParams, Slots};
use super::pool::{pool_rows, valid_rows};
use super::ProbeConfig;
use crate::error::{ProbeError, Result};
use crate::hstore::Batch;
use crate::real::{axpy, log_sum_exp, softmax_in_place, Real};

/// Post-softmax aggregation weights captured for one example.
///
/// For the scoring gate these are the Stage-1 and Stage-2 gate weights. For
/// attention probes they are attention received per position, averaged over
/// heads and query positions (a diagnostic).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub n_layers: usize,
    pub t: usize,
    /// `[n_layers, t]`, zero at padded positions.
    pub token_weights: Vec<f64>,
    /// `[n_layers]`
    pub layer_weights: Vec<f64>,
}

impl AttentionTrace {
    pub fn token_row(&self, layer: usize) -> &[f64] {
        &self.token_weights[layer * self.t..(layer + 1) * self.t]
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<F> {
    pub n_classes: usize,
    /// `[b, n_classes]`
    pub logits: Vec<F>,
    /// One entry per example when tracing was requested; `None` entries for
    /// pooling probes, which have no weights.
    pub traces: Option<Vec<Option<AttentionTrace>>>,
    /// Peak floats held by attention working buffers during the call.
    pub attention_scratch_floats: usize,
}

impl<F: Real> ForwardOutput<F> {
    pub fn logits_row(&self, i: usize) -> &[F] {
        &self.logits[i * self.n_classes..(i + 1) * self.n_classes]
    }
}

/// Row-wise softmax of a `[b, n_classes]` logit matrix.
pub fn probabilities<F: Real>(logits: &[F], n_classes: usize) -> Vec<F> {
    let mut p = logits.to_vec();
    for row in p.chunks_mut(n_classes) {
        softmax_in_place(row);
    }
    p
}

fn check_batch<F: Real>(cfg: &ProbeConfig, batch: &Batch<F>) -> Result<()> {
    if batch.n_layers != cfg.n_layers || batch.d != cfg.d {
        return Err(ProbeError::Shape(format!(
            "batch is [_, {}, _, {}] but probe expects n_layers = {}, d = {}",
            batch.n_layers, batch.d, cfg.n_layers, cfg.d
        )));
    }
    if batch.data.len() != batch.b * batch.example_len()
        || batch.mask.len() != batch.b * batch.t
        || batch.labels.len() != batch.b
    {
        return Err(ProbeError::Shape("batch buffers inconsistent with its dims".into()));
    }
    Ok(())
}

fn mha_weights<'a, F: Real>(cfg: &ProbeConfig, values: &'a [F], slot: MhaSlot) -> MhaWeights<'a, F> {
    MhaWeights::from_region(
        &values[slot.start..slot.start + slot.len],
        cfg.d,
        cfg.d_inner(),
        cfg.n_heads,
        cfg.mha_bias,
    )
}

fn example_rows<F: Real>(batch: &Batch<F>, i: usize) -> Result<Vec<usize>> {
    let rows = valid_rows(batch.mask_row(i));
    if rows.is_empty() {
        return Err(ProbeError::EmptyMask(format!("batch row {i}")));
    }
    Ok(rows)
}

fn head<F: Real>(params: &ProbeParams<F>, v: &[F], logits: &mut [F]) {
    let cfg = params.config();
    let layout = params.layout();
    let w = &params.values[layout.head_w..layout.head_w + cfg.n_classes * cfg.d];
    let b = &params.values[layout.head_b..layout.head_b + cfg.n_classes];
    for (c, z) in logits.iter_mut().enumerate() {
        *z = b[c] + crate::real::dot(&w[c * cfg.d..(c + 1) * cfg.d], v);
    }
}

/// Forward pass over a padded batch. Deterministic; padded positions never
/// influence the output.
pub fn forward<F: Real>(params: &ProbeParams<F>, batch: &Batch<F>, trace: bool) -> Result<ForwardOutput<F>> {
    let cfg = params.config();
    check_batch(cfg, batch)?;
    let (n_layers, t, d, c) = (cfg.n_layers, batch.t, cfg.d, cfg.n_classes);
    let values = &params.values;
    let all_layers: Vec<usize> = (0..n_layers).collect();

    let mut logits = vec![F::zero(); batch.b * c];
    let mut traces = trace.then(Vec::new);
    let mut scratch = MhaScratch::default();
    let mut summaries = vec![F::zero(); n_layers * d];
    let mut v = vec![F::zero(); d];
    let mut argmax = Vec::new();

    for i in 0..batch.b {
        let rows = example_rows(batch, i)?;
        let x = batch.example(i);
        let mut tr = match (&traces, &params.layout().slots) {
            (Some(_), Slots::Pooling) | (None, _) => None,
            (Some(_), _) => Some(AttentionTrace {
                n_layers,
                t,
                token_weights: vec![0.0; n_layers * t],
                layer_weights: vec![0.0; n_layers],
            }),
        };

        match &params.layout().slots {
            Slots::Pooling => {
                for l in 0..n_layers {
                    let xl = &x[l * t * d..(l + 1) * t * d];
                    pool_rows(xl, d, &rows, cfg.pool_op, &mut summaries[l * d..(l + 1) * d], &mut argmax);
                }
                pool_rows(&summaries, d, &all_layers, cfg.pool_op, &mut v, &mut argmax);
            }
            Slots::Gate { token, layer } => {
                for l in 0..n_layers {
                    let xl = &x[l * t * d..(l + 1) * t * d];
                    let w = &values[token[l]..token[l] + d];
                    let cache = gate_forward(xl, d, &rows, w, &mut summaries[l * d..(l + 1) * d]);
                    if let Some(tr) = tr.as_mut() {
                        for (&r, &a) in rows.iter().zip(&cache.weights) {
                            tr.token_weights[l * t + r] = a.to_f64().unwrap_or(f64::NAN);
                        }
                    }
                }
                let w = &values[*layer..*layer + d];
                let cache = gate_forward(&summaries, d, &all_layers, w, &mut v);
                if let Some(tr) = tr.as_mut() {
                    for (dst, &a) in tr.layer_weights.iter_mut().zip(&cache.weights) {
                        *dst = a.to_f64().unwrap_or(f64::NAN);
                    }
                }
            }
            Slots::Mha { stage1, stage2 } => {
                let heads = cfg.n_heads as f64;
                let mut received = vec![F::zero(); t.max(n_layers)];
                for (l, slot) in stage1.iter().enumerate() {
                    let xl = &x[l * t * d..(l + 1) * t * d];
                    let w = mha_weights(cfg, values, *slot);
                    let recv = tr.as_ref().map(|_| {
                        received[..rows.len()].fill(F::zero());
                        &mut received[..rows.len()]
                    });
                    mha_infer(&w, xl, &rows, cfg.pool_op, &mut summaries[l * d..(l + 1) * d], &mut scratch, recv);
                    if let Some(tr) = tr.as_mut() {
                        let norm = heads * rows.len() as f64;
                        for (k, &r) in rows.iter().enumerate() {
                            tr.token_weights[l * t + r] = received[k].to_f64().unwrap_or(f64::NAN) / norm;
                        }
                    }
                }
                let w = mha_weights(cfg, values, *stage2);
                let recv = tr.as_ref().map(|_| {
                    received[..n_layers].fill(F::zero());
                    &mut received[..n_layers]
                });
                mha_infer(&w, &summaries, &all_layers, cfg.pool_op, &mut v, &mut scratch, recv);
                if let Some(tr) = tr.as_mut() {
                    let norm = heads * n_layers as f64;
                    for (dst, &r) in tr.layer_weights.iter_mut().zip(&received[..n_layers]) {
                        *dst = r.to_f64().unwrap_or(f64::NAN) / norm;
                    }
                }
            }
        }

        head(params, &v, &mut logits[i * c..(i + 1) * c]);
        if let Some(traces) = traces.as_mut() {
            traces.push(tr);
        }
    }

    Ok(ForwardOutput {
        n_classes: c,
        logits,
        traces,
        attention_scratch_floats: scratch.peak_floats,
    })
}

/// Mean cross-entropy of the batch, through [`forward`].
pub fn loss<F: Real>(params: &ProbeParams<F>, batch: &Batch<F>) -> Result<F> {
    let out = forward(params, batch, false)?;
    let mut total = F::zero();
    for (i, &y) in batch.labels.iter().enumerate() {
        let z = out.logits_row(i);
        total += log_sum_exp(z) - z[y];
    }
    Ok(total / F::from_usize_lossy(batch.b.max(1)))
}

enum BlockCache<F> {
    Pool,
    Gate(GateCache<F>),
    Mha(Box<MhaCache<F>>),
}

/// Fills `params.grads` with the gradient of the batch-mean cross-entropy and
/// returns that loss. With `class_weights`, each example's loss is scaled by
/// the weight of its label before averaging.
pub fn backward<F: Real>(params: &mut ProbeParams<F>, batch: &Batch<F>, class_weights: Option<&[F]>) -> Result<F> {
    let cfg = params.config().clone();
    check_batch(&cfg, batch)?;
    if let Some(cw) = class_weights {
        if cw.len() != cfg.n_classes {
            return Err(ProbeError::Config(format!(
                "{} class weights for {} classes",
                cw.len(),
                cfg.n_classes
            )));
        }
    }
    for &y in &batch.labels {
        if y >= cfg.n_classes {
            return Err(ProbeError::Shape(format!("label {y} out of range")));
        }
    }
    params.zero_grad();
    if batch.b == 0 {
        return Ok(F::zero());
    }

    let (n_layers, t, d, c) = (cfg.n_layers, batch.t, cfg.d, cfg.n_classes);
    let layout = params.layout().clone();
    let all_layers: Vec<usize> = (0..n_layers).collect();
    let inv_b = F::one() / F::from_usize_lossy(batch.b);
    let (values, grads) = (&params.values, &mut params.grads);

    let mut total = F::zero();
    let mut summaries = vec![F::zero(); n_layers * d];
    let mut v = vec![F::zero(); d];
    let mut z = vec![F::zero(); c];
    let mut dsum = vec![F::zero(); n_layers * d];

    for i in 0..batch.b {
        let rows = example_rows(batch, i)?;
        let x = batch.example(i);
        let y = batch.labels[i];
        let weight = class_weights.map_or(F::one(), |cw| cw[y]);

        let mut stage1: Vec<BlockCache<F>> = Vec::with_capacity(n_layers);
        let stage2 = match &layout.slots {
            Slots::Pooling => {
                for l in 0..n_layers {
                    let xl = &x[l * t * d..(l + 1) * t * d];
                    let mut am = Vec::new();
                    pool_rows(xl, d, &rows, cfg.pool_op, &mut summaries[l * d..(l + 1) * d], &mut am);
                }
                let mut am = Vec::new();
                pool_rows(&summaries, d, &all_layers, cfg.pool_op, &mut v, &mut am);
                BlockCache::Pool
            }
            Slots::Gate { token, layer } => {
                for l in 0..n_layers {
                    let xl = &x[l * t * d..(l + 1) * t * d];
                    let w = &values[token[l]..token[l] + d];
                    stage1.push(BlockCache::Gate(gate_forward(
                        xl,
                        d,
                        &rows,
                        w,
                        &mut summaries[l * d..(l + 1) * d],
                    )));
                }
                let w = &values[*layer..*layer + d];
                BlockCache::Gate(gate_forward(&summaries, d, &all_layers, w, &mut v))
            }
            Slots::Mha { stage1: slots, stage2 } => {
                for (l, slot) in slots.iter().enumerate() {
                    let xl = &x[l * t * d..(l + 1) * t * d];
                    let w = mha_weights(&cfg, values, *slot);
                    stage1.push(BlockCache::Mha(Box::new(mha_train_forward(
                        &w,
                        xl,
                        &rows,
                        cfg.pool_op,
                        &mut summaries[l * d..(l + 1) * d],
                    ))));
                }
                let w = mha_weights(&cfg, values, *stage2);
                BlockCache::Mha(Box::new(mha_train_forward(&w, &summaries, &all_layers, cfg.pool_op, &mut v)))
            }
        };

        // head and loss
        {
            let hw = &values[layout.head_w..layout.head_w + c * d];
            let hb = &values[layout.head_b..layout.head_b + c];
            for (k, zk) in z.iter_mut().enumerate() {
                *zk = hb[k] + crate::real::dot(&hw[k * d..(k + 1) * d], &v);
            }
        }
        let lse = log_sum_exp(&z);
        total += weight * (lse - z[y]);
        let mut dz: Vec<F> = z.iter().map(|&zk| (zk - lse).exp()).collect();
        dz[y] -= F::one();
        for g in dz.iter_mut() {
            *g *= weight * inv_b;
        }

        let mut dv = vec![F::zero(); d];
        for (k, &g) in dz.iter().enumerate() {
            axpy(g, &v, &mut grads[layout.head_w + k * d..layout.head_w + (k + 1) * d]);
            grads[layout.head_b + k] += g;
            axpy(g, &values[layout.head_w + k * d..layout.head_w + (k + 1) * d], &mut dv);
        }

        match (&layout.slots, stage2) {
            (Slots::Pooling, _) => {}
            (Slots::Gate { token, layer }, BlockCache::Gate(cache)) => {
                dsum.fill(F::zero());
                let w = &values[*layer..*layer + d];
                gate_backward(
                    &summaries,
                    d,
                    &all_layers,
                    w,
                    &cache,
                    &dv,
                    &mut grads[*layer..*layer + d],
                    Some(&mut dsum),
                );
                for (l, block) in stage1.iter().enumerate() {
                    let BlockCache::Gate(cache) = block else { unreachable!() };
                    let xl = &x[l * t * d..(l + 1) * t * d];
                    let w = &values[token[l]..token[l] + d];
                    gate_backward(
                        xl,
                        d,
                        &rows,
                        w,
                        cache,
                        &dsum[l * d..(l + 1) * d],
                        &mut grads[token[l]..token[l] + d],
                        None,
                    );
                }
            }
            (Slots::Mha { stage1: slots, stage2 }, BlockCache::Mha(cache)) => {
                dsum.fill(F::zero());
                let w = mha_weights(&cfg, values, *stage2);
                let mut g = MhaGrads::from_region(
                    &mut grads[stage2.start..stage2.start + stage2.len],
                    d,
                    cfg.d_inner(),
                    cfg.mha_bias,
                );
                mha_backward(&w, &summaries, &all_layers, cfg.pool_op, &cache, &dv, &mut g, Some(&mut dsum));
                for (l, (slot, block)) in slots.iter().zip(&stage1).enumerate() {
                    let BlockCache::Mha(cache) = block else { unreachable!() };
                    let xl = &x[l * t * d..(l + 1) * t * d];
                    let w = mha_weights(&cfg, values, *slot);
                    let mut g = MhaGrads::from_region(
                        &mut grads[slot.start..slot.start + slot.len],
                        d,
                        cfg.d_inner(),
                        cfg.mha_bias,
                    );
                    mha_backward(&w, xl, &rows, cfg.pool_op, cache, &dsum[l * d..(l + 1) * d], &mut g, None);
                }
            }
            _ => unreachable!("cache kind always matches the layout"),
        }
    }

    Ok(total * inv_b)
}
