//! Cascaded affine + dense deformable registration of 3D volumes.
//!
//! The moving image is warped repeatedly, once per cascade stage, and every
//! stage's parameters are optimized jointly through reverse-mode gradients
//! that flow back through each warp.
//!
//! - [`field`]: volumes, flows, affine transforms and the warp/composition algebra
//! - [`losses`]: similarity and regularization terms
//! - [`autodiff`]: a recorded graph of those primitives with adjoints
//! - [`cascade`]: stage specs, the cascade objective and the optimizer loop
//! - [`metrics`]: overlap, landmark, endpoint-error and Jacobian statistics
//! - [`synth`]: phantoms and random B-spline deformations with known ground truth
//! - [`io`]: binary volume/flow files, landmark CSV and the run configuration

pub mod error;
pub mod field;
pub mod io;
pub mod autodiff;
pub mod cascade;
pub mod losses;
pub mod metrics;
pub mod synth;

pub use error::{Error, Result};
