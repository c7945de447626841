//! The conditional causal HMM: per-concept recurrent cells, the shared causal
//! module, prior and posterior networks, attention fusion and the generator.

mod concepts;
mod network;
mod params;

pub use concepts::{ConceptLayout, ConceptSet, Modality, CONCEPT_LABELS};
pub use network::{
    adjacency_from_weights, off_diagonal_mask, GaussianParams, Mode, NoiseStream, RolloutOutput,
    Session, StepInputs, StepOutput, WindowBatch, LOGVAR_BOUND,
};
pub use params::{
    Architecture, Branch, ConceptTransform, GaussianHead, GeneratorHead, GruCell, InputProjection,
    Layout, Linear, ModelConfig, ModelParams, ParamId, Side,
};
