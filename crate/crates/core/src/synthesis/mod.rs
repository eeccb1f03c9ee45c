//! Context-aware dubbing synthesizer: current-sentence encoding, context
//! adaptation, prosody prediction, length regulation and mel decoding.

mod ablation;
mod components;
mod model;
mod sample;

pub use ablation::{Ablation, Ablations};
pub use components::{
    compute_losses, length_regulate, span_pooling, AdaptorVars, ContextAwareAdaptor, CurrentEncoder, CurrentVars,
    GatedFusion, LossBreakdown, LossVars, LossWeights, MelDecoder, SpanEncoder, VariancePredictor, VarianceStats,
};
pub use model::{ContextEncoder, DubbingModel, ForwardOptions, ForwardVars, ModelConfig, Predictions};
pub use sample::DubbingSample;

#[cfg(test)]
mod tests;
