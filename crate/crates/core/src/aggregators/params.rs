use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Mechanism, ProbeConfig};
use crate::error::{ProbeError, Result};
use crate::real::Real;

/// One named tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Start offsets of one attention module. The module's tensors are contiguous
/// in the order `w_q, w_k, w_v, w_o[, b_q, b_k, b_v, b_o]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct MhaSlot {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Slots {
    Pooling,
    Gate { token: Vec<usize>, layer: usize },
    Mha { stage1: Vec<MhaSlot>, stage2: MhaSlot },
}

/// Canonical ordering of every trainable tensor. The checkpoint payload and
/// the optimizer state follow this order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub tensors: Vec<TensorSpec>,
    pub(crate) slots: Slots,
    pub(crate) head_w: usize,
    pub(crate) head_b: usize,
    pub total: usize,
}

struct LayoutBuilder {
    tensors: Vec<TensorSpec>,
    offset: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        let len = shape.iter().product();
        let offset = self.offset;
        self.tensors.push(TensorSpec {
            name,
            shape,
            offset,
            len,
        });
        self.offset += len;
        offset
    }

    fn mha_module(&mut self, prefix: &str, d: usize, di: usize, bias: bool) -> MhaSlot {
        let start = self.offset;
        self.push(format!("{prefix}.w_q"), vec![d, di]);
        self.push(format!("{prefix}.w_k"), vec![d, di]);
        self.push(format!("{prefix}.w_v"), vec![d, di]);
        self.push(format!("{prefix}.w_o"), vec![di, d]);
        if bias {
            self.push(format!("{prefix}.b_q"), vec![di]);
            self.push(format!("{prefix}.b_k"), vec![di]);
            self.push(format!("{prefix}.b_v"), vec![di]);
            self.push(format!("{prefix}.b_o"), vec![d]);
        }
        MhaSlot {
            start,
            len: self.offset - start,
        }
    }
}

impl ParamLayout {
    pub fn new(config: &ProbeConfig) -> Self {
        let (d, n_layers) = (config.d, config.n_layers);
        let mut b = LayoutBuilder {
            tensors: Vec::new(),
            offset: 0,
        };
        let slots = match config.mechanism {
            Mechanism::Pooling => Slots::Pooling,
            Mechanism::ScoringGate => {
                let token = (0..n_layers)
                    .map(|l| b.push(format!("gate.token.{l}"), vec![d]))
                    .collect();
                let layer = b.push("gate.layer".into(), vec![d]);
                Slots::Gate { token, layer }
            }
            Mechanism::Mha => {
                let di = config.d_inner();
                let stage1 = (0..n_layers)
                    .map(|l| b.mha_module(&format!("mha.token.{l}"), d, di, config.mha_bias))
                    .collect();
                let stage2 = b.mha_module("mha.layer", d, di, config.mha_bias);
                Slots::Mha { stage1, stage2 }
            }
        };
        let head_w = b.push("head.weight".into(), vec![config.n_classes, d]);
        let head_b = b.push("head.bias".into(), vec![config.n_classes]);
        ParamLayout {
            tensors: b.tensors,
            slots,
            head_w,
            head_b,
            total: b.offset,
        }
    }

    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Closed-form parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub stage1: usize,
    pub stage2: usize,
    pub head: usize,
    pub total: usize,
}

pub fn count_params(config: &ProbeConfig) -> ParamCount {
    let d = config.d;
    let head = config.n_classes * d + config.n_classes;
    let (stage1, stage2) = match config.mechanism {
        Mechanism::Pooling => (0, 0),
        Mechanism::ScoringGate => (config.n_layers * d, d),
        Mechanism::Mha => {
            let di = config.d_inner();
            let bias = if config.mha_bias { 3 * di + d } else { 0 };
            let module = 4 * d * di + bias;
            (config.n_layers * module, module)
        }
    };
    ParamCount {
        stage1,
        stage2,
        head,
        total: stage1 + stage2 + head,
    }
}

/// All trainable tensors of a probe in one flat buffer, with a gradient buffer
/// of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeParams<F> {
    config: ProbeConfig,
    layout: ParamLayout,
    pub values: Vec<F>,
    pub grads: Vec<F>,
}

impl<F: Real> ProbeParams<F> {
    /// Seeded fan-in initialization: `U(-1/sqrt(d), 1/sqrt(d))` for gates, head
    /// and `W_Q/W_K/W_V`, `U(-1/sqrt(d_inner), 1/sqrt(d_inner))` for `W_O`,
    /// zero biases.
    pub fn init(config: &ProbeConfig) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let scale_d = 1.0 / (config.d as f64).sqrt();
        let scale_inner = 1.0 / (config.d_inner().max(1) as f64).sqrt();
        for spec in params.layout.tensors.clone() {
            let scale = if spec.name.ends_with(".w_o") {
                scale_inner
            } else if spec.name == "head.bias" || spec.name.contains(".b_") {
                0.0
            } else {
                scale_d
            };
            let dst = &mut params.values[spec.offset..spec.offset + spec.len];
            for v in dst.iter_mut() {
                let u: f64 = rng.random_range(-1.0..1.0);
                *v = F::lit(u * scale);
            }
        }
        Ok(params)
    }

    pub fn zeros(config: &ProbeConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        Ok(ProbeParams {
            config: config.clone(),
            values: vec![F::zero(); layout.total],
            grads: vec![F::zero(); layout.total],
            layout,
        })
    }

    pub fn from_values(config: &ProbeConfig, values: Vec<F>) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        if values.len() != params.values.len() {
            return Err(ProbeError::Shape(format!(
                "expected {} parameter values, got {}",
                params.values.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ProbeError::NonFinite(format!("parameter value at flat index {i}")));
        }
        params.values = values;
        Ok(params)
    }

    pub fn config(&self) -> &ProbeConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grads.fill(F::zero());
    }

    pub fn tensor(&self, name: &str) -> Option<&[F]> {
        let s = self.layout.find(name)?;
        Some(&self.values[s.offset..s.offset + s.len])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [F]> {
        let s = self.layout.find(name)?.clone();
        Some(&mut self.values[s.offset..s.offset + s.len])
    }

    pub fn grad(&self, name: &str) -> Option<&[F]> {
        let s = self.layout.find(name)?;
        Some(&self.grads[s.offset..s.offset + s.len])
    }

    /// Sets every tensor whose name starts with `prefix` to `value`.
    pub fn fill_prefix(&mut self, prefix: &str, value: F) {
        for spec in &self.layout.tensors {
            if spec.name.starts_with(prefix) {
                self.values[spec.offset..spec.offset + spec.len].fill(value);
            }
        }
    }

    pub fn cast<G: Real>(&self) -> ProbeParams<G> {
        let conv = |v: &F| G::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(G::nan());
        ProbeParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            values: self.values.iter().map(conv).collect(),
            grads: self.grads.iter().map(conv).collect(),
        }
    }

    pub fn size_bytes(&self) -> usize {
        self.values.len() * std::mem::size_of::<F>()
    }
}
