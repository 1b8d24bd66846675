use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::GridSpec;
use crate::losses::{EntropyConfig, LossWeights, SimilarityKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    Affine,
    Dense,
}

/// Resolution of a dense stage's parameter grid relative to the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenseResolution {
    Full,
    #[default]
    Half,
}

impl DenseResolution {
    pub fn divisor(self) -> usize {
        match self {
            DenseResolution::Full => 1,
            DenseResolution::Half => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub kind: StageKind,
    #[serde(default)]
    pub resolution: DenseResolution,
    pub weights: LossWeights,
}

impl StageSpec {
    pub fn affine(weights: LossWeights) -> Self {
        Self { kind: StageKind::Affine, resolution: DenseResolution::Full, weights }
    }

    pub fn dense(resolution: DenseResolution, weights: LossWeights) -> Self {
        Self { kind: StageKind::Dense, resolution, weights }
    }

    /// Parameter grid of a dense stage over `image`.
    pub fn parameter_grid(&self, image: &GridSpec) -> Result<GridSpec> {
        let k = self.resolution.divisor();
        let dims = image.dims();
        if dims.iter().any(|d| d % k != 0) {
            return Err(Error::Config(format!(
                "dense resolution 1/{k} does not divide image dims {dims:?}"
            )));
        }
        GridSpec::from_dims(dims.map(|d| d / k))
            .map_err(|_| Error::Config(format!("dense grid 1/{k} of {dims:?} is too small")))
    }
}

/// Moment-based optimizer settings. Step sizes are per parameter kind, since
/// affine matrix entries, translations and dense displacements live on very
/// different scales.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub dense_step: f64,
    pub affine_step: f64,
    pub translation_step: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub iterations: usize,
    /// Step sizes follow a cosine schedule from 1x down to this fraction at
    /// the last iteration; 1.0 keeps them constant.
    pub final_step_fraction: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            dense_step: 0.25,
            affine_step: 2e-3,
            translation_step: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            iterations: 80,
            final_step_fraction: 0.1,
        }
    }
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.dense_step, self.affine_step, self.translation_step, self.epsilon];
        if !pos.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::Config(format!("optimizer steps and epsilon must be > 0: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "moment decays must lie in [0, 1): {} {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.final_step_fraction > 0.0 && self.final_step_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "final_step_fraction must lie in (0, 1]: {}",
                self.final_step_fraction
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iteration count must be >= 1".into()));
        }
        Ok(())
    }
}

pub const DEFAULT_INVERTIBILITY_WEIGHT: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeSpec {
    pub stages: Vec<StageSpec>,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default = "default_inv")]
    pub invertibility_weight: f64,
    #[serde(default)]
    pub similarity: SimilarityKind,
    #[serde(default)]
    pub entropy: EntropyConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_inv() -> f64 {
    DEFAULT_INVERTIBILITY_WEIGHT
}

/// Reference weights for a cascade layout: the affine row for the affine
/// stage, dense rows by position, with the last dense stage always taking
/// the final dense row.
pub fn table_weights(kinds: &[StageKind]) -> Vec<LossWeights> {
    let n_dense = kinds.iter().filter(|k| **k == StageKind::Dense).count();
    let mut k = 0;
    kinds
        .iter()
        .map(|kind| match kind {
            StageKind::Affine => LossWeights::AFFINE,
            StageKind::Dense => {
                k += 1;
                let row = if k == n_dense { 2 } else { (k - 1).min(1) };
                LossWeights::DENSE[row]
            }
        })
        .collect()
}

impl CascadeSpec {
    /// Builds a cascade from a layout string such as `"ADD"`: `A` for the
    /// affine stage (first only), `D` for each half-resolution dense stage,
    /// with reference loss weights and default settings.
    pub fn preset(layout: &str) -> Result<Self> {
        let kinds = layout
            .chars()
            .map(|c| match c.to_ascii_uppercase() {
                'A' => Ok(StageKind::Affine),
                'D' => Ok(StageKind::Dense),
                other => Err(Error::Config(format!("unknown stage letter `{other}` in `{layout}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let stages = kinds
            .iter()
            .zip(table_weights(&kinds))
            .map(|(kind, w)| match kind {
                StageKind::Affine => StageSpec::affine(w),
                StageKind::Dense => StageSpec::dense(DenseResolution::Half, w),
            })
            .collect();
        let spec = Self {
            stages,
            optimizer: OptimizerSpec::default(),
            invertibility_weight: DEFAULT_INVERTIBILITY_WEIGHT,
            similarity: SimilarityKind::Correlation,
            entropy: EntropyConfig::default(),
            seed: 0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.optimizer.iterations = iterations;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("cascade needs at least one stage".into()));
        }
        if self.stages.iter().skip(1).any(|s| s.kind == StageKind::Affine) {
            return Err(Error::Config("an affine stage may only come first".into()));
        }
        for s in &self.stages {
            s.weights.validate()?;
        }
        if !(self.invertibility_weight.is_finite() && self.invertibility_weight >= 0.0) {
            return Err(Error::Config(format!(
                "invertibility weight must be finite and >= 0, got {}",
                self.invertibility_weight
            )));
        }
        self.entropy.validate()?;
        self.optimizer.validate()
    }

    /// Layout string, e.g. `"ADD"`.
    pub fn layout(&self) -> String {
        self.stages
            .iter()
            .map(|s| match s.kind {
                StageKind::Affine => 'A',
                StageKind::Dense => 'D',
            })
            .collect()
    }
}
