//! Network architecture: feedback structure, attention blocks, full model.

pub mod attention;
pub mod config;
pub mod feedback;
pub mod fpan;

pub use attention::{gc_context_pool, ContextTransform, NonLocalBlock, PyramidNonLocal};
pub use config::{Ablation, AblationPreset, AttentionKind, ModelConfig, FULL_SIZE_TARGET};
pub use feedback::FeedbackStructure;
pub use fpan::{count_params_for, Features, Fpab, Fpan};

#[cfg(test)]
mod tests;
