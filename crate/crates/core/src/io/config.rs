use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeSpec, OptimizerSpec, StageSpec, DEFAULT_INVERTIBILITY_WEIGHT};
use crate::error::{Error, Result};
use crate::losses::{EntropyConfig, SimilarityKind};
use crate::synth::{BSplineFieldSpec, PhantomSpec};

pub const SCHEMA_VERSION: u32 = 1;

/// Either a layout string such as `"ADD"` (stock loss weights) or an
/// explicit list of stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StagesConfig {
    Preset(String),
    Explicit(Vec<StageSpec>),
}

impl Default for StagesConfig {
    fn default() -> Self {
        StagesConfig::Preset("ADD".into())
    }
}

/// The `cascade` section; everything bar `stages` has the engine defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CascadeConfig {
    pub stages: StagesConfig,
    pub optimizer: OptimizerSpec,
    pub invertibility_weight: f64,
    pub similarity: SimilarityKind,
    pub entropy: EntropyConfig,
    pub seed: u64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            stages: StagesConfig::default(),
            optimizer: OptimizerSpec::default(),
            invertibility_weight: DEFAULT_INVERTIBILITY_WEIGHT,
            similarity: SimilarityKind::default(),
            entropy: EntropyConfig::default(),
            seed: 0,
        }
    }
}

impl CascadeConfig {
    pub fn to_spec(&self) -> Result<CascadeSpec> {
        let stages = match &self.stages {
            StagesConfig::Preset(layout) => CascadeSpec::preset(layout)?.stages,
            StagesConfig::Explicit(s) => s.clone(),
        };
        let spec = CascadeSpec {
            stages,
            optimizer: self.optimizer,
            invertibility_weight: self.invertibility_weight,
            similarity: self.similarity,
            entropy: self.entropy,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Settings for the `gradcheck` command: the cascade from the config is
/// checked on a seeded synthetic pair of `size³` voxels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub size: usize,
    pub coordinates: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self { size: 8, coordinates: 200, step: 1e-5, tolerance: 1e-4, seed: 0 }
    }
}

/// File names written inside the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputPaths {
    pub flow: String,
    pub warped: String,
    pub trace: String,
    pub metrics: String,
    /// Per-stage warped volumes become `<prefix><k>.mvol`.
    pub intermediate_prefix: String,
    pub fixed: String,
    pub moving: String,
    pub ground_truth: String,
    pub fixed_mask: String,
    pub moving_mask: String,
    pub fixed_landmarks: String,
    pub moving_landmarks: String,
}

impl Default for OutputPaths {
    fn default() -> Self {
        Self {
            flow: "flow.mflw".into(),
            warped: "warped.mvol".into(),
            trace: "trace.csv".into(),
            metrics: "metrics.json".into(),
            intermediate_prefix: "stage".into(),
            fixed: "fixed.mvol".into(),
            moving: "moving.mvol".into(),
            ground_truth: "gt_flow.mflw".into(),
            fixed_mask: "fixed_mask.mvol".into(),
            moving_mask: "moving_mask.mvol".into(),
            fixed_landmarks: "fixed_landmarks.csv".into(),
            moving_landmarks: "moving_landmarks.csv".into(),
        }
    }
}

/// Top-level JSON document. Every section is optional; unknown keys are
/// rejected and `schema_version`, when given, must equal [`SCHEMA_VERSION`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub cascade: CascadeConfig,
    pub phantom: PhantomSpec,
    pub bspline: BSplineFieldSpec,
    pub gradcheck: GradcheckSection,
    pub outputs: OutputPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            cascade: CascadeConfig::default(),
            phantom: PhantomSpec::default(),
            bspline: BSplineFieldSpec::default(),
            gradcheck: GradcheckSection::default(),
            outputs: OutputPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.cascade.to_spec()?;
        self.phantom.validate()?;
        self.bspline.validate()?;
        let g = &self.gradcheck;
        if g.size < 2 || g.coordinates == 0 || !(g.step > 0.0) || !(g.tolerance > 0.0) {
            return Err(Error::Config(format!("invalid gradcheck section {g:?}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::StageKind;

    #[test]
    fn empty_document_is_the_default() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.cascade.to_spec().unwrap(), CascadeSpec::preset("ADD").unwrap());
    }

    #[test]
    fn round_trips_through_json() {
        let mut cfg = RunConfig::default();
        cfg.cascade.stages = StagesConfig::Explicit(CascadeSpec::preset("AD").unwrap().stages);
        cfg.cascade.seed = 9;
        cfg.phantom.seed = 4;
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn preset_and_explicit_stages() {
        let cfg = RunConfig::from_json(r#"{"cascade": {"stages": "addd"}}"#).unwrap();
        assert_eq!(cfg.cascade.to_spec().unwrap().stages.len(), 4);
        let explicit = r#"{"cascade": {"stages": [
            {"kind": "dense", "resolution": "full",
             "weights": {"similarity": 1.0, "regularizer": 0.5, "determinant": 0.0, "orthogonality": 0.0}}
        ]}}"#;
        let spec = RunConfig::from_json(explicit).unwrap().cascade.to_spec().unwrap();
        assert_eq!(spec.stages[0].kind, StageKind::Dense);
        assert_eq!(spec.stages[0].weights.regularizer, 0.5);
    }

    #[test]
    fn rejects_bad_documents() {
        for text in [
            r#"{"bogus": 1}"#,
            r#"{"cascade": {"stages": "ADD", "extra": true}}"#,
            r#"{"phantom": {"dims": [8, 8, 8], "colour": 1}}"#,
            r#"{"schema_version": 2}"#,
            r#"{"cascade": {"stages": "AXD"}}"#,
            r#"{"gradcheck": {"step": 0}}"#,
            "not json",
        ] {
            assert!(matches!(RunConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }
}
