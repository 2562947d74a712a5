//! Multi-scale residual-vector-quantized tokenizer for multichannel
//! biosignals, with Fourier-domain reconstruction targets and masked-token
//! pretraining.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod signal;
pub mod spectral;
pub mod encoder;
pub mod rvq;
pub mod checkpoint;
pub mod dataset;
pub mod tokenizer;
pub mod pretrain;
pub mod gradsuite;
