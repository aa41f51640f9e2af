//! Forecaster architectures over the sensor graph.
//!
//! Four variants share one parameter bank and embedding pipeline: a graph
//! convolutional GRU seq2seq, a graph convolutional transformer, and their
//! graph-free counterparts where the spatial mix collapses to a dense
//! layer. Inputs at every step are the projected speed value plus the
//! sensor embedding plus the activity (or timestamp) embedding.

mod checkpoint;
mod gcrn;
mod layers;
mod transformer;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layers::positional_encoding;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::activity::TIMESTAMP_FEATURE_LEN;
use crate::diffengine::{NodeId, ParamStore, SparseOperator, Tape, Tensor};
use crate::graphbuild::SensorAdjacency;
use crate::sparse::SparseMatrix;
use crate::Real;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("adjacency is {got} sensors, model expects {expected}")]
    AdjacencyMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// Graph-convolutional GRU seq2seq.
    Gcrn,
    /// Graph-convolutional transformer.
    Gctf,
    /// GRU seq2seq with dense spatial mix (no graph).
    Lstm,
    /// Transformer with dense spatial mix (no graph).
    Tf,
}

impl Architecture {
    pub fn uses_graph(self) -> bool {
        matches!(self, Architecture::Gcrn | Architecture::Gctf)
    }

    pub fn is_recurrent(self) -> bool {
        matches!(self, Architecture::Gcrn | Architecture::Lstm)
    }

    pub fn code(self) -> u32 {
        match self {
            Architecture::Gcrn => 0,
            Architecture::Gctf => 1,
            Architecture::Lstm => 2,
            Architecture::Tf => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => Architecture::Gcrn,
            1 => Architecture::Gctf,
            2 => Architecture::Lstm,
            3 => Architecture::Tf,
            _ => return None,
        })
    }
}

impl std::str::FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "gcrn" => Architecture::Gcrn,
            "gctf" | "gctransformer" => Architecture::Gctf,
            "lstm" => Architecture::Lstm,
            "tf" | "transformer" => Architecture::Tf,
            other => return Err(format!("unknown architecture `{other}`")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingMode {
    /// Weekly activity-frequency vectors through the embedding MLP.
    Activity,
    /// Weekday/time-of-day one-hots through the embedding MLP.
    Timestamp,
    None,
}

impl EmbeddingMode {
    pub fn code(self) -> u32 {
        match self {
            EmbeddingMode::Activity => 0,
            EmbeddingMode::Timestamp => 1,
            EmbeddingMode::None => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => EmbeddingMode::Activity,
            1 => EmbeddingMode::Timestamp,
            2 => EmbeddingMode::None,
            _ => return None,
        })
    }
}

impl std::str::FromStr for EmbeddingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "ae" | "activity" => EmbeddingMode::Activity,
            "te" | "timestamp" => EmbeddingMode::Timestamp,
            "none" => EmbeddingMode::None,
            other => return Err(format!("unknown embedding mode `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_sensors: usize,
    /// Hidden width D.
    pub dim: usize,
    /// History steps P.
    pub p_steps: usize,
    /// Horizon steps Q.
    pub q_steps: usize,
    /// Diffusion steps K of the dual-walk convolution.
    pub k_diffusion: usize,
    /// Transformer depth.
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_key: usize,
    pub embedding: EmbeddingMode,
    pub use_sensor_embedding: bool,
    pub architecture: Architecture,
    /// Activity categories feeding the embedding MLP.
    pub n_activity_categories: usize,
    /// Whether activity rows were mean-centered before the std division;
    /// kept with the model so inference normalizes inputs the same way.
    pub center_activity: bool,
}

impl ModelConfig {
    /// Reference settings: D=64, P=Q=12, K=1, 3 layers of 8 heads x key 8.
    pub fn defaults(n_sensors: usize, n_activity_categories: usize) -> Self {
        Self {
            n_sensors,
            dim: 64,
            p_steps: 12,
            q_steps: 12,
            k_diffusion: 1,
            n_layers: 3,
            n_heads: 8,
            d_key: 8,
            embedding: EmbeddingMode::Activity,
            use_sensor_embedding: true,
            architecture: Architecture::Gcrn,
            n_activity_categories,
            center_activity: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_sensors == 0 || self.dim == 0 || self.p_steps == 0 || self.q_steps == 0 {
            return Err(ModelError::InvalidConfig(
                "sensor count, dim and horizons must be positive".into(),
            ));
        }
        if self.k_diffusion == 0 {
            return Err(ModelError::InvalidConfig("k_diffusion must be >= 1".into()));
        }
        if !self.architecture.is_recurrent() {
            if self.n_layers == 0 {
                return Err(ModelError::InvalidConfig("n_layers must be >= 1".into()));
            }
            if self.n_heads * self.d_key != self.dim {
                return Err(ModelError::InvalidConfig(format!(
                    "n_heads * d_key must equal dim: {} * {} != {}",
                    self.n_heads, self.d_key, self.dim
                )));
            }
        }
        Ok(())
    }

    /// Width of the embedding-MLP input for the configured mode.
    pub fn embedding_input_width(&self) -> usize {
        match self.embedding {
            EmbeddingMode::Activity => self.n_activity_categories,
            EmbeddingMode::Timestamp => TIMESTAMP_FEATURE_LEN,
            EmbeddingMode::None => 0,
        }
    }
}

/// Walk operators handed to the convolution: row-normalized adjacency and
/// row-normalized transpose, each paired with its transpose for backward.
pub struct GraphOperators {
    pub fwd: Arc<SparseOperator<Real>>,
    pub bwd: Arc<SparseOperator<Real>>,
    n: usize,
}

impl GraphOperators {
    pub fn from_adjacency(adjacency: &SensorAdjacency) -> Self {
        Self {
            fwd: Arc::new(SparseOperator::new(adjacency.a_fwd.clone())),
            bwd: Arc::new(SparseOperator::new(adjacency.a_bwd.clone())),
            n: adjacency.n_sensors(),
        }
    }

    /// From a raw combined adjacency (normalizes both walks here).
    pub fn from_combined(a: &SparseMatrix<Real>) -> Self {
        let row_norm = |m: &SparseMatrix<Real>| {
            let factors: Vec<Real> = m
                .row_sums()
                .into_iter()
                .map(|s| if s > 0.0 { 1.0 / s } else { 0.0 })
                .collect();
            m.scale_rows(&factors)
        };
        Self {
            fwd: Arc::new(SparseOperator::new(row_norm(a))),
            bwd: Arc::new(SparseOperator::new(row_norm(&a.transpose()))),
            n: a.n_rows(),
        }
    }

    pub fn n_sensors(&self) -> usize {
        self.n
    }
}

/// One batch of model inputs. Rows are windows-major: row `b * N + n` is
/// sensor `n` of window `b`. Values are standardized speeds with missing
/// entries zeroed.
pub struct BatchInputs {
    pub batch: usize,
    /// P tensors of shape (B*N, 1).
    pub history: Vec<Tensor<Real>>,
    /// P+Q embedding inputs of shape (B, K_in); empty when mode is None.
    pub embedding_rows: Vec<Tensor<Real>>,
}

/// Decoder supervision: ground-truth future values for teacher forcing.
pub struct TeacherInputs<'a> {
    /// Q tensors of shape (B*N, 1), standardized.
    pub values: &'a [Tensor<Real>],
    /// Probability of feeding ground truth (scheduled sampling); 1.0 is
    /// plain teacher forcing.
    pub feed_probability: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

/// A model: config, parameter bank and the constant graph operators.
pub struct Forecaster {
    pub cfg: ModelConfig,
    pub store: ParamStore<Real>,
    graph: Option<GraphOperators>,
}

impl Forecaster {
    /// Builds a model with freshly initialized parameters. Architectures
    /// that convolve over the graph require `graph`.
    pub fn new(
        cfg: ModelConfig,
        graph: Option<GraphOperators>,
        seed: u64,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        if cfg.architecture.uses_graph() {
            let g = graph
                .as_ref()
                .ok_or_else(|| ModelError::InvalidConfig("graph adjacency required".into()))?;
            if g.n_sensors() != cfg.n_sensors {
                return Err(ModelError::AdjacencyMismatch {
                    expected: cfg.n_sensors,
                    got: g.n_sensors(),
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = layers::build_params(&cfg, &mut rng);
        let graph = if cfg.architecture.uses_graph() { graph } else { None };
        Ok(Self { cfg, store, graph })
    }

    pub fn graph(&self) -> Option<&GraphOperators> {
        self.graph.as_ref()
    }

    /// Trainable scalar count.
    pub fn n_parameters(&self) -> usize {
        self.store.trainable_count()
    }

    /// Runs the model over one batch. With `teacher` present the decoder is
    /// fed ground truth (subject to the feed probability); otherwise it
    /// consumes its own predictions. Returns a `(B*N, Q, 1)` node of
    /// standardized predictions on the tape.
    pub fn forward(
        &self,
        tape: &mut Tape<Real>,
        inputs: &BatchInputs,
        teacher: Option<TeacherInputs>,
    ) -> NodeId {
        assert_eq!(inputs.history.len(), self.cfg.p_steps, "history length");
        if self.cfg.embedding != EmbeddingMode::None {
            assert_eq!(
                inputs.embedding_rows.len(),
                self.cfg.p_steps + self.cfg.q_steps,
                "embedding rows must cover P+Q steps"
            );
        }
        if self.cfg.architecture.is_recurrent() {
            gcrn::forward(self, tape, inputs, teacher)
        } else {
            transformer::forward(self, tape, inputs, teacher)
        }
    }
}

/// Trainable scalar count for a configuration.
pub fn count_parameters(cfg: &ModelConfig) -> Result<usize, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(layers::build_params(cfg, &mut rng).trainable_count())
}

#[cfg(test)]
mod tests;
