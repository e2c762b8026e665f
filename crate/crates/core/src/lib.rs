//! Generalizable metric network toolkit over feature embeddings.
//!
//! Builds sample-pair features, trains a trunk encoder and a small metric
//! network with channel perturbation and a pair-identity center loss, and
//! evaluates retrieval by metric-network similarity or feature distance.

pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod metric_net;
pub mod model;
pub mod pair_space;
pub mod rng;
pub mod trainer;

pub use data::{generate_synthetic, split_probe_gallery, Dataset, Role, SampleRecord, SyntheticSpec};
pub use encoder::{DpConfig, DpMode, EncoderParams};
pub use error::{ErrorKind, GmnError, Result};
pub use io::{load_embeddings, save_embeddings, EmbeddingFormat};
pub use linalg::{Dense, Matrix};
pub use losses::LossBreakdown;
pub use metric_net::{similarity, similarity_matrix, MetricNetParams};
pub use model::GmnModel;
pub use pair_space::{pair_feature, NegativeScheme, PairFeature, PairOp, PairSamplingScheme};
pub use trainer::{train, Ablation, Checkpoint, ModelConfig, TrainConfig, TrainState, Trainer};
pub use evaluator::{evaluate, DomainGapReport, EvalConfig, EvalReport, Protocol};
pub use experiment::{ExperimentConfig, ExperimentData};
