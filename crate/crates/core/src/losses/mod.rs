//! Similarity and regularization losses, each a pure scalar function of
//! volumes, flows or affine parameters.
//!
//! The `*_backward` helpers return gradients with respect to the inputs and
//! back the differentiable tape in [`crate::autodiff`].

mod entropy;
mod regularize;
mod similarity;

pub use entropy::{entropy_estimate, mutual_information_loss, EntropyConfig, Kernel};
pub use regularize::{
    determinant_loss, invertibility_loss, orthogonality_loss, total_variation_loss,
};
pub use similarity::{correlation_loss, covariance, l2_loss};

pub(crate) use entropy::mutual_information_backward;
pub(crate) use regularize::{
    determinant_backward, orthogonality_backward, region_mean_sq, region_mean_sq_backward,
    total_variation_backward,
};
pub(crate) use similarity::{correlation_backward, l2_backward};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which image similarity drives the cascade.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityKind {
    #[default]
    Correlation,
    L2,
    MutualInformation,
}

/// Loss weights for one cascade stage. `determinant` and `orthogonality`
/// only apply to the affine stage; `regularizer` is the TV weight of a dense
/// stage.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub similarity: f64,
    pub regularizer: f64,
    pub determinant: f64,
    pub orthogonality: f64,
}

impl LossWeights {
    /// Affine row of the reference weight table.
    pub const AFFINE: LossWeights =
        LossWeights { similarity: 1.0, regularizer: 0.0, determinant: 0.1, orthogonality: 0.1 };

    /// Dense rows of the reference weight table, by dense-stage position.
    pub const DENSE: [LossWeights; 3] = [
        LossWeights { similarity: 0.0, regularizer: 1.0, determinant: 0.0, orthogonality: 0.0 },
        LossWeights { similarity: 0.05, regularizer: 1.0, determinant: 0.0, orthogonality: 0.0 },
        LossWeights { similarity: 1.0, regularizer: 1.0, determinant: 0.0, orthogonality: 0.0 },
    ];

    pub fn validate(&self) -> Result<()> {
        let all = [self.similarity, self.regularizer, self.determinant, self.orthogonality];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")))
        }
    }
}
