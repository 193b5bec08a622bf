//! Egocentric video-language pipeline at desk scale.
//!
//! Three stages run over a procedurally generated egocentric world:
//! narration-pair selection ([`corpus`]), two-tower contrastive
//! post-pretraining ([`encoders`]), and task heads for temporal grounding,
//! moment detection, long-term anticipation, recognition and retrieval, each
//! with its evaluation metric.

pub mod anticipation;
pub mod autograd;
pub mod checkpoint;
pub mod corpus;
pub mod encoders;
pub mod ensemble;
pub mod error;
pub mod features;
pub mod grounding;
pub mod io;
pub mod metrics;
pub mod moments;
pub mod nn;
pub mod pipeline;
pub mod retrieval;
pub mod rng;
pub mod segment;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use segment::TemporalSegment;
pub use tensor::Matrix;
