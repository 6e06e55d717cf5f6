//! Unsupervised full-resolution pansharpening.
//!
//! Fuses a high-resolution panchromatic band with a lower-resolution
//! multispectral image by training a compact residual CNN directly on the
//! target pair, using a two-term spectral/spatial consistency loss. Ships
//! with MTF-matched resampling, no-reference quality indexes, and a
//! synthetic sensor simulator so every stage can be verified against a
//! known ground truth.

pub mod adapt;
pub mod autodiff;
pub mod io;
pub mod network;
pub mod resample;
pub mod synth;
pub mod error;
pub mod loss;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::ImageTensor;
