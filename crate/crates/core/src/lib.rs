//! Blind video quality assessment with a recurrent-memory vision transformer.
//!
//! Frames are embedded by a frozen spatial encoder, processed segment by
//! segment by the recurrent-memory transformer ([`rmvit`]), trained with a
//! content- and quality-aware contrastive objective ([`heads`], [`loss`]),
//! and finally mapped to quality scores by ridge regression ([`ridge`]),
//! evaluated with repeated source-split cross-validation ([`crossval`]).

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod crossval;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod labels;
pub mod loss;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod patch;
pub mod pipeline;
pub mod proxy;
pub mod ridge;
pub mod rmtt;
pub mod rmvit;
pub mod schedule;
pub mod seeding;
pub mod selfcheck;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod video;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
