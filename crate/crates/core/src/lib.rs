//! Surface vision transformers over icospheric patch sequences.
//!
//! The pipeline runs from geometry to learning:
//!
//! - [`geom`]: icosphere generation, subdivision and point location.
//! - [`resample`]: barycentric resampling and rotation of per-vertex signals.
//! - [`patching`]: icospheric patch tables and flattened patch sequences.
//! - [`tensor`]: a small reverse-mode differentiation engine over `f64` arrays.
//! - [`model`]: the transformer encoder, its heads, masked patch prediction and
//!   the scan-age embedding.
//! - [`train`]: optimizers, samplers, training loops, metrics and baselines.
//! - [`data`]: synthetic surface datasets and manifests.

pub mod binio;
pub mod data;
pub mod error;
pub mod geom;
pub mod model;
pub mod patching;
pub mod resample;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use geom::{Icosphere, TriMesh};
pub use patching::{PatchSequence, PatchTable};
pub use resample::{Rotation, SurfaceSignal};
pub use rng::SeedStream;
pub use tensor::Tensor;
