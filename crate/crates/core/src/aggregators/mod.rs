//! Two-stage token x layer aggregation probes.
//!
//! Stage 1 reduces each layer's `[t, d]` hidden states to a `d`-vector, Stage 2
//! reduces the `n_layers` summaries to one `d`-vector, and a linear head maps
//! that to class logits. Both stages use the same mechanism: fixed pooling, a
//! scoring gate (`tanh` score, masked softmax, convex combination) or downcast
//! multi-head self-attention followed by pooling.

mod checkpoint;
mod gate;
mod mha;
mod params;
mod pool;
mod probe;

use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};

pub use checkpoint::{load_checkpoint, params_sha256, save_checkpoint, Checkpoint, CheckpointMeta};
pub use gate::scoring_gate;
pub use mha::{mha_block, MhaWeights};
pub use params::{count_params, ParamCount, ParamLayout, ProbeParams, TensorSpec};
pub use pool::token_pool;
pub use probe::{backward, forward, loss, probabilities, AttentionTrace, ForwardOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Pooling,
    ScoringGate,
    Mha,
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] = [Mechanism::Pooling, Mechanism::ScoringGate, Mechanism::Mha];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Pooling => "pooling",
            Mechanism::ScoringGate => "scoring_gate",
            Mechanism::Mha => "mha",
        }
    }
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mechanism {
    type Err = ProbeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooling" => Ok(Mechanism::Pooling),
            "scoring_gate" | "scoring" => Ok(Mechanism::ScoringGate),
            "mha" => Ok(Mechanism::Mha),
            other => Err(ProbeError::Config(format!("unknown mechanism {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolOp {
    Mean,
    Max,
}

impl PoolOp {
    pub const ALL: [PoolOp; 2] = [PoolOp::Mean, PoolOp::Max];
}

impl std::fmt::Display for PoolOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoolOp::Mean => "mean",
            PoolOp::Max => "max",
        })
    }
}

impl std::str::FromStr for PoolOp {
    type Err = ProbeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(PoolOp::Mean),
            "max" => Ok(PoolOp::Max),
            other => Err(ProbeError::Config(format!("unknown pool op {other:?}"))),
        }
    }
}

/// Architecture of a probe. Shapes of every trainable tensor follow from this
/// alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub mechanism: Mechanism,
    #[serde(default = "default_pool_op")]
    pub pool_op: PoolOp,
    pub n_layers: usize,
    pub d: usize,
    pub n_classes: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_downcast")]
    pub downcast_factor: usize,
    /// Biases on the Q/K/V/O projections. Off by default.
    #[serde(default)]
    pub mha_bias: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_pool_op() -> PoolOp {
    PoolOp::Mean
}
fn default_heads() -> usize {
    4
}
fn default_downcast() -> usize {
    4
}

impl ProbeConfig {
    pub fn new(mechanism: Mechanism, n_layers: usize, d: usize, n_classes: usize) -> Self {
        ProbeConfig {
            mechanism,
            pool_op: default_pool_op(),
            n_layers,
            d,
            n_classes,
            n_heads: default_heads(),
            downcast_factor: default_downcast(),
            mha_bias: false,
            seed: 0,
        }
    }

    pub fn with_pool(mut self, op: PoolOp) -> Self {
        self.pool_op = op;
        self
    }

    pub fn with_mha(mut self, n_heads: usize, downcast_factor: usize) -> Self {
        self.n_heads = n_heads;
        self.downcast_factor = downcast_factor;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn d_inner(&self) -> usize {
        self.d / self.downcast_factor.max(1)
    }

    pub fn d_head(&self) -> usize {
        self.d_inner() / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d == 0 {
            return Err(ProbeError::Config(format!(
                "n_layers ({}) and d ({}) must be positive",
                self.n_layers, self.d
            )));
        }
        if self.n_classes < 2 {
            return Err(ProbeError::Config(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if self.mechanism == Mechanism::Mha {
            if self.n_heads == 0 || self.downcast_factor == 0 {
                return Err(ProbeError::Config(
                    "n_heads and downcast_factor must be positive".into(),
                ));
            }
            if self.d % self.downcast_factor != 0 {
                return Err(ProbeError::Config(format!(
                    "d = {} is not divisible by downcast factor {}",
                    self.d, self.downcast_factor
                )));
            }
            if self.d_inner() % self.n_heads != 0 {
                return Err(ProbeError::Config(format!(
                    "d_inner = {} is not divisible by {} heads",
                    self.d_inner(),
                    self.n_heads
                )));
            }
        }
        Ok(())
    }
}
