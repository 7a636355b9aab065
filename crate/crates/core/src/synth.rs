//! Synthetic hidden-state stores with class signal planted at known
//! `(layer, token)` sites, plus the likelihood-ratio oracle for them.
//!
//! Every cell is `N(0, sigma^2 I)`. At each signal site the mean of class `c`
//! is shifted by `mu * u_c`, with `u_c` orthonormal class directions. Example
//! `i` draws from its own ChaCha stream, in the order: length, site tokens,
//! noise. The oracle replays the first two to find the sites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use statrs::distribution::{ContinuousCDF, Normal};
use std::path::Path;

use crate::error::{ProbeError, Result};
use crate::hstore::{DType, HStoreManifest, HiddenStateRecord, Split, Store, StoreWriter};

const CHUNK: usize = 256;
const DIRECTION_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenPolicy {
    Fixed(usize),
    RandomOne,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalSite {
    pub layer: usize,
    pub tokens: TokenPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    /// Shift the class mean at every signal site.
    Planted,
    /// One random token per example carries `+mu * u_c` on every signal layer
    /// and the other `T - 1` tokens carry `-mu * u_c / (T - 1)`, so the token
    /// mean is class-independent. Site token policies are ignored.
    Dilution,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_layers: usize,
    /// Inclusive `[min, max]` sequence length, drawn uniformly per example.
    pub t_range: (usize, usize),
    pub d: usize,
    pub n_classes: usize,
    pub n_examples: usize,
    pub signal_sites: Vec<SignalSite>,
    pub signal_strength: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: SynthMode,
    /// Examples are assigned to splits in index order by these fractions.
    #[serde(default)]
    pub splits: SplitFractions,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
}

fn default_mode() -> SynthMode {
    SynthMode::Planted
}
fn default_dtype() -> DType {
    DType::F32
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ProbeError::Config(m));
        let (t_min, t_max) = self.t_range;
        if self.n_layers == 0 || self.d == 0 {
            return bad("n_layers and d must be positive".into());
        }
        if self.n_classes < 2 || self.n_classes > self.d {
            return bad(format!(
                "need 2 <= n_classes <= d for orthonormal class directions (C = {}, d = {})",
                self.n_classes, self.d
            ));
        }
        if t_min == 0 || t_min > t_max {
            return bad(format!("bad t_range [{t_min}, {t_max}]"));
        }
        if !(self.signal_strength >= 0.0 && self.signal_strength.is_finite()) {
            return bad(format!("signal_strength {} must be finite and >= 0", self.signal_strength));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be finite and > 0", self.noise_sigma));
        }
        for s in &self.signal_sites {
            if s.layer >= self.n_layers {
                return bad(format!("signal layer {} out of range", s.layer));
            }
            if let TokenPolicy::Fixed(k) = s.tokens {
                if k >= t_min {
                    return bad(format!("fixed token {k} not present when T = {t_min}"));
                }
            }
        }
        let f = self.splits;
        if [f.train, f.val, f.test].iter().any(|v| !(*v >= 0.0)) || ((f.train + f.val + f.test) - 1.0).abs() > 1e-9 {
            return bad("split fractions must be non-negative and sum to 1".into());
        }
        if self.mode == SynthMode::Dilution {
            if t_min < 2 {
                return bad("dilution needs at least two tokens per example".into());
            }
            if self.signal_sites.is_empty() {
                return bad("dilution needs at least one signal layer".into());
            }
        }
        Ok(())
    }

    fn signal_layers(&self) -> Vec<usize> {
        let mut ls: Vec<usize> = self.signal_sites.iter().map(|s| s.layer).collect();
        ls.sort_unstable();
        ls.dedup();
        ls
    }

    pub fn label(&self, i: usize) -> usize {
        i % self.n_classes
    }

    pub fn split(&self, i: usize) -> Split {
        let n = self.n_examples as f64;
        let n_train = (n * self.splits.train).round() as usize;
        let n_val = (n * (self.splits.train + self.splits.val)).round() as usize;
        if i < n_train {
            Split::Train
        } else if i < n_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Orthonormal class directions `[n_classes, d]` by Gram-Schmidt on seeded
/// Gaussian draws.
pub fn class_directions(spec: &SynthSpec) -> Vec<f64> {
    let (c, d) = (spec.n_classes, spec.d);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(DIRECTION_STREAM);
    let mut u = vec![0.0f64; c * d];
    let mut k = 0;
    while k < c {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for j in 0..k {
            let prev = &u[j * d..(j + 1) * d];
            let p: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(prev) {
                *x -= p * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        for (dst, x) in u[k * d..(k + 1) * d].iter_mut().zip(&v) {
            *dst = x / norm;
        }
        k += 1;
    }
    u
}

/// The random choices of one example that precede its noise.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    t: usize,
    /// Per site: the token(s) shifted.
    site_tokens: Vec<Vec<usize>>,
    /// Dilution: the token carrying the signal.
    signal_token: usize,
}

fn example_rng(spec: &SynthSpec, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(i as u64);
    rng
}

fn draw_layout(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Layout {
    let t = rng.random_range(spec.t_range.0..=spec.t_range.1);
    let mut site_tokens = Vec::with_capacity(spec.signal_sites.len());
    let mut signal_token = 0;
    match spec.mode {
        SynthMode::Planted => {
            for s in &spec.signal_sites {
                site_tokens.push(match s.tokens {
                    TokenPolicy::Fixed(k) => vec![k],
                    TokenPolicy::RandomOne => vec![rng.random_range(0..t)],
                    TokenPolicy::All => (0..t).collect(),
                });
            }
        }
        SynthMode::Dilution => signal_token = rng.random_range(0..t),
    }
    Layout {
        t,
        site_tokens,
        signal_token,
    }
}

fn make_example(spec: &SynthSpec, dirs: &[f64], i: usize) -> Result<HiddenStateRecord> {
    let (n_layers, d) = (spec.n_layers, spec.d);
    let mut rng = example_rng(spec, i);
    let lay = draw_layout(spec, &mut rng);
    let t = lay.t;
    let sigma = spec.noise_sigma;
    let mut x: Vec<f64> = (0..n_layers * t * d)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let label = spec.label(i);
    let u = &dirs[label * d..(label + 1) * d];
    let mu = spec.signal_strength;
    let mut shift = |l: usize, tok: usize, scale: f64| {
        let cell = &mut x[(l * t + tok) * d..(l * t + tok + 1) * d];
        for (v, &uj) in cell.iter_mut().zip(u) {
            *v += scale * uj;
        }
    };
    match spec.mode {
        SynthMode::Planted => {
            for (s, toks) in spec.signal_sites.iter().zip(&lay.site_tokens) {
                for &tok in toks {
                    shift(s.layer, tok, mu);
                }
            }
        }
        SynthMode::Dilution => {
            let off = -mu / (t - 1) as f64;
            for l in spec.signal_layers() {
                for tok in 0..t {
                    shift(l, tok, if tok == lay.signal_token { mu } else { off });
                }
            }
        }
    }
    HiddenStateRecord::new(
        format!("synth-{i:06}"),
        spec.split(i),
        label,
        n_layers,
        t,
        d,
        x.into_iter().map(|v| v as f32).collect(),
    )
}

/// Regenerates example `i` in memory.
pub fn example(spec: &SynthSpec, i: usize) -> Result<HiddenStateRecord> {
    spec.validate()?;
    make_example(spec, &class_directions(spec), i)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Class scores `sum_cells <x_cell, u_c>` over `cells` of layer `l`.
fn project(rec: &HiddenStateRecord, dirs: &[f64], c: usize, cells: &[(usize, usize, f64)]) -> Vec<f64> {
    let d = rec.d;
    (0..c)
        .map(|k| {
            let u = &dirs[k * d..(k + 1) * d];
            cells
                .iter()
                .map(|&(l, tok, w)| {
                    let cell = &rec.layer(l)[tok * d..(tok + 1) * d];
                    w * cell.iter().zip(u).map(|(&a, &b)| f64::from(a) * b).sum::<f64>()
                })
                .sum()
        })
        .collect()
}

/// Likelihood-ratio prediction reading only the true signal sites. Noise is
/// isotropic and the directions have unit norm, so this is the argmax of the
/// summed projections with each cell weighted by its planted shift.
fn oracle_predict(spec: &SynthSpec, dirs: &[f64], rec: &HiddenStateRecord, i: usize) -> usize {
    let lay = draw_layout(spec, &mut example_rng(spec, i));
    let mut cells = Vec::new();
    match spec.mode {
        SynthMode::Planted => {
            for (s, toks) in spec.signal_sites.iter().zip(&lay.site_tokens) {
                cells.extend(toks.iter().map(|&tok| (s.layer, tok, 1.0)));
            }
        }
        SynthMode::Dilution => {
            let off = -1.0 / (lay.t - 1) as f64;
            for l in spec.signal_layers() {
                for tok in 0..lay.t {
                    cells.push((l, tok, if tok == lay.signal_token { 1.0 } else { off }));
                }
            }
        }
    }
    argmax(&project(rec, dirs, spec.n_classes, &cells))
}

/// Prediction from the token mean of each signal layer, projected on the class
/// directions.
fn mean_pool_predict(spec: &SynthSpec, dirs: &[f64], rec: &HiddenStateRecord) -> usize {
    let w = 1.0 / rec.t as f64;
    let cells: Vec<(usize, usize, f64)> = spec
        .signal_layers()
        .into_iter()
        .flat_map(|l| (0..rec.t).map(move |tok| (l, tok, w)))
        .collect();
    argmax(&project(rec, dirs, spec.n_classes, &cells))
}

fn check_store(spec: &SynthSpec, store: &Store) -> Result<()> {
    let m = store.manifest();
    if m.n_layers != spec.n_layers || m.d != spec.d || m.n_classes() != spec.n_classes || store.len() != spec.n_examples {
        return Err(ProbeError::Shape("store was not generated from this spec".into()));
    }
    Ok(())
}

fn accuracy_by<P>(spec: &SynthSpec, store: &Store, pred: P) -> Result<f64>
where
    P: Fn(&HiddenStateRecord, usize) -> usize + Sync,
{
    spec.validate()?;
    check_store(spec, store)?;
    if store.is_empty() {
        return Err(ProbeError::EmptySplit("store has no records".into()));
    }
    let correct = (0..store.len())
        .into_par_iter()
        .map(|i| {
            let rec = store.record(i)?;
            Ok(usize::from(pred(&rec, i) == rec.label))
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / store.len() as f64)
}

/// Empirical accuracy of the planted-likelihood-ratio classifier on `store`,
/// which must have been generated from `spec` (records in index order).
pub fn oracle_accuracy(spec: &SynthSpec, store: &Store) -> Result<f64> {
    let dirs = class_directions(spec);
    accuracy_by(spec, store, |rec, i| oracle_predict(spec, &dirs, rec, i))
}

/// Empirical accuracy of classifying the token-mean of the signal layers.
pub fn mean_pool_oracle_accuracy(spec: &SynthSpec, store: &Store) -> Result<f64> {
    let dirs = class_directions(spec);
    accuracy_by(spec, store, |rec, _| mean_pool_predict(spec, &dirs, rec))
}

/// Expected two-class oracle accuracy `1 - Phi(-mu sqrt(K) / (sigma sqrt 2))`,
/// with `K` the sum of squared planted shift multiplicities of each example,
/// averaged over the spec's examples. `None` for more than two classes.
pub fn closed_form_oracle_accuracy(spec: &SynthSpec) -> Result<Option<f64>> {
    spec.validate()?;
    if spec.n_classes != 2 || spec.n_examples == 0 {
        return Ok(None);
    }
    let normal = Normal::standard();
    let total: f64 = (0..spec.n_examples)
        .into_par_iter()
        .map(|i| {
            let lay = draw_layout(spec, &mut example_rng(spec, i));
            let k = match spec.mode {
                SynthMode::Planted => {
                    let mut mult = std::collections::HashMap::new();
                    for (s, toks) in spec.signal_sites.iter().zip(&lay.site_tokens) {
                        for &tok in toks {
                            *mult.entry((s.layer, tok)).or_insert(0u64) += 1;
                        }
                    }
                    mult.values().map(|m| (m * m) as f64).sum::<f64>()
                }
                SynthMode::Dilution => {
                    let t = lay.t as f64;
                    spec.signal_layers().len() as f64 * (1.0 + 1.0 / (t - 1.0))
                }
            };
            normal.cdf(spec.signal_strength * k.sqrt() / (spec.noise_sigma * std::f64::consts::SQRT_2))
        })
        .sum();
    Ok(Some(total / spec.n_examples as f64))
}

/// Writes the store for `spec` to `out`. Oracle estimates are recorded in the
/// manifest provenance. Output does not depend on thread count.
pub fn generate(spec: &SynthSpec, out: impl AsRef<Path>) -> Result<HStoreManifest> {
    spec.validate()?;
    let out = out.as_ref();
    let dirs = class_directions(spec);
    let labels = (0..spec.n_classes).map(|c| format!("class_{c}")).collect();
    let mut writer = StoreWriter::create(out, HStoreManifest::new(spec.d, spec.n_layers, spec.dtype, labels))?;
    let mut start = 0;
    while start < spec.n_examples {
        let end = (start + CHUNK).min(spec.n_examples);
        let recs: Vec<HiddenStateRecord> = (start..end)
            .into_par_iter()
            .map(|i| make_example(spec, &dirs, i))
            .collect::<Result<_>>()?;
        for r in &recs {
            writer.push(r)?;
        }
        start = end;
    }
    writer.manifest_mut().provenance.insert("synth".into(), json!(spec));
    writer.manifest_mut().provenance.insert("positive_class".into(), json!(1));
    let manifest = writer.finish()?;
    if spec.n_examples == 0 {
        return Ok(manifest);
    }

    let store = Store::open(out)?;
    let mut prov = manifest.provenance.clone();
    let oracle = oracle_accuracy(spec, &store)?;
    prov.insert("oracle_accuracy".into(), json!(oracle));
    if let Some(cf) = closed_form_oracle_accuracy(spec)? {
        prov.insert("oracle_closed_form_accuracy".into(), json!(cf));
    }
    if spec.mode == SynthMode::Dilution {
        prov.insert("single_site_oracle_accuracy".into(), json!(oracle));
        prov.insert("mean_pool_oracle_accuracy".into(), json!(mean_pool_oracle_accuracy(spec, &store)?));
    }
    let mut manifest = manifest;
    manifest.provenance = prov;
    let path = out.join(crate::hstore::MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| ProbeError::json(&path, e))?;
    std::fs::write(&path, text).map_err(|e| ProbeError::io(&path, e))?;
    Ok(manifest)
}

/// [`generate`] in dilution mode. Refuses specs whose sequences can be a
/// single token.
pub fn dilution_instance(spec: &SynthSpec, out: impl AsRef<Path>) -> Result<HStoreManifest> {
    let spec = SynthSpec {
        mode: SynthMode::Dilution,
        ..spec.clone()
    };
    generate(&spec, out)
}
