//! Differentiable building blocks shared by every model component.

mod attention;
mod downsample;
mod fft;
mod gradcheck;
mod layers;
mod sequence;

pub use attention::{AttentionOutput, AttentionVars, MultiHeadAttention};
pub use downsample::{downsampled_len, ConvDownsampleStack};
pub use fft::{FftBlock, FftConfig};
pub use gradcheck::{
    compare_gradients, gradient_check, numeric_input_gradient, GradCheckOptions, GradCheckReport,
    ParamCheck,
};
pub use layers::{sinusoid_positions, BatchNorm1d, Conv1d, Embedding, LayerNorm, Linear};
pub use sequence::FeatureSequence;
