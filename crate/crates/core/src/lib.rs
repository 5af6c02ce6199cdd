pub mod config;
pub mod data_io;
pub mod error;
pub mod features;
pub mod graph;
pub mod model;
pub mod multitask;
pub mod params;
pub mod stc;
pub mod tensor;
pub mod trainer;

pub use error::{Result, StsError};
pub use features::{AnomalyTensor, NormKind, NormStats};
pub use graph::{GridAdjacency, RegionGraph};
pub use model::{Ablation, Batch, MaskMode, MaskSource, Model, ModelConfig};
pub use multitask::LossConfig;
pub use params::{BoundParams, ParamStore};
pub use stc::{AttentionKind, AttentionTrace, DsaActivation, StcConfig};
pub use tensor::{Elementwise, Gradients, Tape, Tensor, Var};
pub use trainer::{Checkpoint, TrainConfig};
