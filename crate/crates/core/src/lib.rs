//! Multiscale multimodal context interaction model for expressive video
//! dubbing, with a synthetic corpus, dubbing metrics and a training harness.

pub mod aggregation;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod extraction;
pub mod fusion;
pub mod metrics;
pub mod nncore;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod synthesis;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use params::{Gradients, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Graph, Var};

/// Single-precision instantiations.
pub mod f32 {
    pub type Graph<'p> = crate::Graph<'p, f32>;
    pub type ParamStore = crate::ParamStore<f32>;
    pub type Gradients = crate::Gradients<f32>;
    pub type DubbingSample = crate::synthesis::DubbingSample<f32>;
    pub type ContextSentence = crate::extraction::ContextSentence<f32>;
    pub type FeatureSequence = crate::nncore::FeatureSequence<f32>;
    pub type Trainer = crate::train::Trainer<f32>;
    pub type Checkpoint = crate::checkpoint::Checkpoint<f32>;
}

/// Double-precision instantiations, used for gradient checks.
pub mod f64 {
    pub type Graph<'p> = crate::Graph<'p, f64>;
    pub type ParamStore = crate::ParamStore<f64>;
    pub type Gradients = crate::Gradients<f64>;
    pub type DubbingSample = crate::synthesis::DubbingSample<f64>;
    pub type ContextSentence = crate::extraction::ContextSentence<f64>;
    pub type FeatureSequence = crate::nncore::FeatureSequence<f64>;
    pub type Trainer = crate::train::Trainer<f64>;
    pub type Checkpoint = crate::checkpoint::Checkpoint<f64>;
}
