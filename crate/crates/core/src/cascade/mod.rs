//! The registration cascade: an optional affine stage followed by dense
//! stages, each aligning the fixed image with the moving image as warped by
//! all earlier stages. Every stage is a directly optimized parameter block,
//! and the whole chain is optimized jointly through the tape.

mod adam;
mod spec;

pub use spec::{
    table_weights, CascadeSpec, DenseResolution, OptimizerSpec, StageKind, StageSpec,
    DEFAULT_INVERTIBILITY_WEIGHT,
};

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::autodiff::{Bindings, ParameterSet, Pipeline, Tape, Value, Var};
use crate::error::{Error, Result};
use crate::field::{
    central_region, check_same_grid, AffineTransform, FlowField, GridSpec, Volume,
};
use crate::losses::{EntropyConfig, SimilarityKind};
use crate::metrics::{jacobian_stats, JacobianStats};
use crate::synth::{make_pair, make_phantom, random_bspline_flow, BSplineFieldSpec, PhantomSpec};

use adam::Adam;

/// Name of the parameter block of stage `k`.
pub fn stage_parameter_name(prefix: &str, k: usize, kind: StageKind) -> String {
    let tag = match kind {
        StageKind::Affine => "affine",
        StageKind::Dense => "dense",
    };
    format!("{prefix}stage{k}.{tag}")
}

/// Zero (identity) parameters for every stage of `spec` over `grid`.
pub fn initial_parameters(spec: &CascadeSpec, grid: &GridSpec) -> Result<ParameterSet> {
    initial_parameters_with_prefix(spec, grid, "")
}

fn initial_parameters_with_prefix(
    spec: &CascadeSpec,
    grid: &GridSpec,
    prefix: &str,
) -> Result<ParameterSet> {
    let mut params = ParameterSet::new();
    for (k, s) in spec.stages.iter().enumerate() {
        let v = match s.kind {
            StageKind::Affine => Value::Affine(AffineTransform::identity()),
            StageKind::Dense => Value::Flow(FlowField::zeros(s.parameter_grid(grid)?)),
        };
        params.insert(stage_parameter_name(prefix, k, s.kind), v)?;
    }
    Ok(params)
}

/// One weighted contribution to an objective.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossTerm {
    pub name: String,
    pub weight: f64,
    pub value: f64,
}

struct RecordedTerm {
    name: String,
    weight: f64,
    var: Var,
}

struct Recorded {
    warped: Vec<Var>,
    flows: Vec<Var>,
    composed: Option<Var>,
    last_similarity: Option<Var>,
    terms: Vec<RecordedTerm>,
}

fn similarity(tape: &mut Tape, kind: SimilarityKind, cfg: EntropyConfig, a: Var, b: Var) -> Result<Var> {
    match kind {
        SimilarityKind::Correlation => tape.correlation_loss(a, b),
        SimilarityKind::L2 => tape.l2_loss(a, b),
        SimilarityKind::MutualInformation => tape.mutual_information_loss(a, b, cfg),
    }
}

/// Records the cascade of `spec` with parameters from `bindings`.
fn record_cascade(
    tape: &mut Tape,
    fixed: Var,
    moving: Var,
    bindings: &Bindings,
    prefix: &str,
    spec: &CascadeSpec,
    compose: bool,
) -> Result<Recorded> {
    let grid = tape.volume(fixed)?.grid();
    let entropy = EntropyConfig { seed: spec.seed, ..spec.entropy };
    let mut out = Recorded {
        warped: Vec::new(),
        flows: Vec::new(),
        composed: None,
        last_similarity: None,
        terms: Vec::new(),
    };
    let mut current = moving;
    let mut affine_head = None;
    for (k, s) in spec.stages.iter().enumerate() {
        let p = bindings.get(&stage_parameter_name(prefix, k, s.kind))?;
        let w = s.weights;
        let mut term = |name: &str, weight: f64, var: Var| {
            out.terms.push(RecordedTerm { name: format!("{prefix}stage{k}.{name}"), weight, var })
        };
        let flow = match s.kind {
            StageKind::Affine => {
                let det = tape.determinant_loss(p)?;
                let ortho = tape.orthogonality_loss(p)?;
                term("determinant", w.determinant, det);
                term("orthogonality", w.orthogonality, ortho);
                affine_head = Some(p);
                tape.affine_to_flow(p, grid)?
            }
            StageKind::Dense => {
                let f = tape.resample(p, grid)?;
                let tv = tape.total_variation_loss(f)?;
                term("tv", w.regularizer, tv);
                f
            }
        };
        current = tape.warp(current, flow)?;
        let sim = similarity(tape, spec.similarity, entropy, fixed, current)?;
        term("similarity", w.similarity, sim);
        out.last_similarity = Some(sim);
        out.warped.push(current);
        out.flows.push(flow);
    }
    if compose {
        let mut acc: Option<Var> = None;
        for (k, &f) in out.flows.iter().enumerate() {
            acc = Some(match (acc, k, affine_head) {
                (None, _, _) => f,
                (Some(_), 1, Some(a)) => tape.compose_affine_with_flow(a, f)?,
                (Some(c), _, _) => tape.compose_flows(c, f)?,
            });
        }
        out.composed = acc;
    }
    Ok(out)
}

/// Weighted sum over the terms with nonzero weight; zero-weight terms are
/// still evaluated for reporting but kept off the gradient path.
fn total(tape: &mut Tape, terms: &[RecordedTerm]) -> Result<Var> {
    let active: Vec<(f64, Var)> =
        terms.iter().filter(|t| t.weight != 0.0).map(|t| (t.weight, t.var)).collect();
    tape.weighted_sum(&active)
}

fn term_values(tape: &Tape, terms: &[RecordedTerm]) -> Result<Vec<LossTerm>> {
    terms
        .iter()
        .map(|t| Ok(LossTerm { name: t.name.clone(), weight: t.weight, value: tape.scalar(t.var)? }))
        .collect()
}

fn check_pair(fixed: &Volume, moving: &Volume) -> Result<()> {
    check_same_grid(&fixed.grid(), &moving.grid(), "registration pair")?;
    if fixed.is_constant() || moving.is_constant() {
        return Err(Error::Degenerate("cannot register a constant image".into()));
    }
    Ok(())
}

/// Forward evaluation of the cascade at fixed parameters.
#[derive(Clone, Debug)]
pub struct CascadeOutput {
    /// Moving image after each stage.
    pub warped: Vec<Volume>,
    /// Full-resolution flow of each stage, in that stage's input frame.
    pub stage_flows: Vec<FlowField>,
    pub composed: FlowField,
    pub terms: Vec<LossTerm>,
    pub total_loss: f64,
}

pub fn run_cascade(
    fixed: &Volume,
    moving: &Volume,
    params: &ParameterSet,
    spec: &CascadeSpec,
) -> Result<CascadeOutput> {
    spec.validate()?;
    check_same_grid(&fixed.grid(), &moving.grid(), "run_cascade")?;
    let mut tape = Tape::new();
    let bindings = tape.bind(params);
    let (f, m) = (tape.constant_volume(fixed), tape.constant_volume(moving));
    let rec = record_cascade(&mut tape, f, m, &bindings, "", spec, true)?;
    let loss = total(&mut tape, &rec.terms)?;
    let composed = rec.composed.expect("cascade has at least one stage");
    Ok(CascadeOutput {
        warped: rec.warped.iter().map(|&v| tape.volume(v).cloned()).collect::<Result<_>>()?,
        stage_flows: rec.flows.iter().map(|&v| tape.flow(v).cloned()).collect::<Result<_>>()?,
        composed: tape.flow(composed)?.clone(),
        terms: term_values(&tape, &rec.terms)?,
        total_loss: tape.scalar(loss)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub terms: Vec<f64>,
    pub total: f64,
}

/// Objective per iteration; row `k` is evaluated after `k` updates.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossTrace {
    pub term_names: Vec<String>,
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    fn push(&mut self, iteration: usize, terms: &[LossTerm], total: f64) {
        if self.term_names.is_empty() {
            self.term_names = terms.iter().map(|t| t.name.clone()).collect();
        }
        self.rows.push(TraceRow { iteration, terms: terms.iter().map(|t| t.value).collect(), total });
    }

    pub fn initial(&self) -> Option<f64> {
        self.rows.first().map(|r| r.total)
    }

    pub fn last(&self) -> Option<f64> {
        self.rows.last().map(|r| r.total)
    }

    /// `iteration,<term...>,total` with one row per iteration.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration");
        for n in &self.term_names {
            s.push(',');
            s.push_str(n);
        }
        s.push_str(",total\n");
        for r in &self.rows {
            s.push_str(&r.iteration.to_string());
            for v in r.terms.iter().chain(std::iter::once(&r.total)) {
                s.push(',');
                s.push_str(&format!("{v:e}"));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsSnapshot {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Similarity between the fixed image and the last stage's output.
    pub final_similarity: f64,
    pub mean_flow_magnitude: f64,
    /// Absent for grids too thin for finite differences.
    pub jacobian: Option<JacobianStats>,
}

#[derive(Clone, Debug)]
pub struct RegistrationResult {
    pub composed: FlowField,
    pub stage_flows: Vec<FlowField>,
    pub warped: Vec<Volume>,
    pub params: ParameterSet,
    pub terms: Vec<LossTerm>,
    pub trace: LossTrace,
    pub wall_time: Duration,
    pub metrics: MetricsSnapshot,
    /// Set when the final objective exceeds the initial one.
    pub loss_increased: bool,
}

/// Registration that stopped early; carries the trace up to the failure.
#[derive(Debug, thiserror::Error)]
#[error("registration aborted after {} evaluations: {source}", trace.rows.len())]
pub struct RegistrationError {
    #[source]
    pub source: Error,
    pub trace: LossTrace,
}

impl From<RegistrationError> for Error {
    fn from(e: RegistrationError) -> Self {
        e.source
    }
}

fn before_start(source: Error) -> RegistrationError {
    RegistrationError { source, trace: LossTrace::default() }
}

/// One direction of a (possibly joint) objective.
struct Direction<'a> {
    fixed: &'a Volume,
    moving: &'a Volume,
    prefix: &'static str,
}

struct Evaluated {
    directions: Vec<Recorded>,
    terms: Vec<RecordedTerm>,
    loss: Var,
}

fn record_objective(
    tape: &mut Tape,
    bindings: &Bindings,
    dirs: &[Direction],
    spec: &CascadeSpec,
    compose: bool,
) -> Result<Evaluated> {
    let mut directions = Vec::new();
    let mut terms = Vec::new();
    let joint = dirs.len() == 2;
    for d in dirs {
        let (f, m) = (tape.constant_volume(d.fixed), tape.constant_volume(d.moving));
        let mut rec = record_cascade(tape, f, m, bindings, d.prefix, spec, compose || joint)?;
        terms.append(&mut rec.terms);
        directions.push(rec);
    }
    if joint {
        let region = central_region(&dirs[0].fixed.grid())?;
        let (c12, c21) = (directions[0].composed.unwrap(), directions[1].composed.unwrap());
        let inv = tape.invertibility_loss(c12, c21, region)?;
        terms.push(RecordedTerm {
            name: "invertibility".into(),
            weight: spec.invertibility_weight,
            var: inv,
        });
    }
    let loss = total(tape, &terms)?;
    Ok(Evaluated { directions, terms, loss })
}

fn optimize(dirs: &[Direction], spec: &CascadeSpec) -> Result<Vec<RegistrationResult>, RegistrationError> {
    spec.validate().map_err(before_start)?;
    for d in dirs {
        check_pair(d.fixed, d.moving).map_err(before_start)?;
    }
    let start = Instant::now();
    let grid = dirs[0].fixed.grid();
    let mut params = ParameterSet::new();
    for d in dirs {
        for (name, v) in initial_parameters_with_prefix(spec, &grid, d.prefix)
            .map_err(before_start)?
            .blocks()
        {
            params.insert(name, v.clone()).map_err(before_start)?;
        }
    }
    let mut adam = Adam::new(spec.optimizer, &params);
    let mut trace = LossTrace::default();
    let iterations = spec.optimizer.iterations;

    for it in 0..iterations {
        let step = (|| {
            let mut tape = Tape::new();
            let bindings = tape.bind(&params);
            let ev = record_objective(&mut tape, &bindings, dirs, spec, false)?;
            let terms = term_values(&tape, &ev.terms)?;
            let loss = tape.scalar(ev.loss)?;
            let grads = tape.backward(ev.loss, &bindings)?;
            Ok((terms, loss, grads))
        })();
        match step {
            Ok((terms, loss, grads)) => {
                trace.push(it, &terms, loss);
                adam.step(&mut params, &grads);
            }
            Err(source) => return Err(RegistrationError { source, trace }),
        }
    }

    let finish = (|| {
        let mut tape = Tape::new();
        let bindings = tape.bind(&params);
        let ev = record_objective(&mut tape, &bindings, dirs, spec, true)?;
        let terms = term_values(&tape, &ev.terms)?;
        let loss = tape.scalar(ev.loss)?;
        Ok((tape, ev, terms, loss))
    })();
    let (tape, ev, terms, loss) = match finish {
        Ok(x) => x,
        Err(source) => return Err(RegistrationError { source, trace }),
    };
    trace.push(iterations, &terms, loss);
    let wall_time = start.elapsed();
    let initial = trace.initial().unwrap_or(loss);

    let build = |rec: &Recorded| -> Result<RegistrationResult> {
        let composed = tape.flow(rec.composed.expect("composition was recorded"))?.clone();
        let final_similarity = tape.scalar(rec.last_similarity.expect("at least one stage"))?;
        let jacobian = grid.dims().iter().all(|&d| d >= 3).then(|| jacobian_stats(&composed)).transpose()?;
        Ok(RegistrationResult {
            stage_flows: rec.flows.iter().map(|&v| tape.flow(v).cloned()).collect::<Result<_>>()?,
            warped: rec.warped.iter().map(|&v| tape.volume(v).cloned()).collect::<Result<_>>()?,
            metrics: MetricsSnapshot {
                initial_loss: initial,
                final_loss: loss,
                final_similarity,
                mean_flow_magnitude: composed.mean_magnitude(),
                jacobian,
            },
            composed,
            params: params.clone(),
            terms: terms.clone(),
            trace: trace.clone(),
            wall_time,
            loss_increased: loss > initial,
        })
    };
    let mut results = Vec::new();
    for (d, rec) in dirs.iter().zip(&ev.directions) {
        let mut r = build(rec).map_err(|source| RegistrationError { source, trace: trace.clone() })?;
        if dirs.len() == 2 {
            r.params = params_with_prefix(&params, d.prefix);
        }
        results.push(r);
    }
    Ok(results)
}

fn params_with_prefix(params: &ParameterSet, prefix: &str) -> ParameterSet {
    let mut out = ParameterSet::new();
    for (name, v) in params.blocks() {
        if let Some(rest) = name.strip_prefix(prefix) {
            out.insert(rest, v.clone()).expect("names are unique");
        }
    }
    out
}

/// The cascade objective of `spec` for one image pair, as a function of the
/// stage parameters (see [`initial_parameters`]).
pub struct CascadeObjective<'a> {
    pub fixed: &'a Volume,
    pub moving: &'a Volume,
    pub spec: &'a CascadeSpec,
}

impl Pipeline for CascadeObjective<'_> {
    fn record(&self, tape: &mut Tape, params: &Bindings) -> Result<Var> {
        let dirs = [Direction { fixed: self.fixed, moving: self.moving, prefix: "" }];
        Ok(record_objective(tape, params, &dirs, self.spec, false)?.loss)
    }
}

/// The joint objective of [`register_bidirectional`]; parameter names carry
/// `fwd.` / `bwd.` prefixes.
pub struct BidirectionalObjective<'a> {
    pub i1: &'a Volume,
    pub i2: &'a Volume,
    pub spec: &'a CascadeSpec,
}

impl BidirectionalObjective<'_> {
    pub fn initial_parameters(&self) -> Result<ParameterSet> {
        let grid = self.i1.grid();
        let mut params = initial_parameters_with_prefix(self.spec, &grid, "fwd.")?;
        for (name, v) in initial_parameters_with_prefix(self.spec, &grid, "bwd.")?.blocks() {
            params.insert(name, v.clone())?;
        }
        Ok(params)
    }
}

impl Pipeline for BidirectionalObjective<'_> {
    fn record(&self, tape: &mut Tape, params: &Bindings) -> Result<Var> {
        let dirs = [
            Direction { fixed: self.i1, moving: self.i2, prefix: "fwd." },
            Direction { fixed: self.i2, moving: self.i1, prefix: "bwd." },
        ];
        Ok(record_objective(tape, params, &dirs, self.spec, false)?.loss)
    }
}

/// Registers `moving` onto `fixed`: zero-initialized parameters, Adam on the
/// full cascade objective for the configured number of iterations.
pub fn register(
    fixed: &Volume,
    moving: &Volume,
    spec: &CascadeSpec,
) -> Result<RegistrationResult, RegistrationError> {
    let dirs = [Direction { fixed, moving, prefix: "" }];
    Ok(optimize(&dirs, spec)?.pop().expect("one direction"))
}

/// Jointly registers `i2` onto `i1` and `i1` onto `i2`, adding the weighted
/// invertibility loss of the two composed flows over the central region.
/// Returns `(result12, result21)`; `result12.composed` maps `i1`'s lattice
/// into `i2`.
pub fn register_bidirectional(
    i1: &Volume,
    i2: &Volume,
    spec: &CascadeSpec,
) -> Result<(RegistrationResult, RegistrationResult), RegistrationError> {
    let dirs = [
        Direction { fixed: i1, moving: i2, prefix: "fwd." },
        Direction { fixed: i2, moving: i1, prefix: "bwd." },
    ];
    let mut r = optimize(&dirs, spec)?;
    let r21 = r.pop().expect("two directions");
    let r12 = r.pop().expect("two directions");
    Ok((r12, r21))
}

/// A small seeded problem for gradient checking: a synthetic `size³` pair
/// with a mild B-spline deformation, and parameters drawn uniformly from
/// `±0.05` (affine) and `±0.7` voxels (dense) so that samples sit well away
/// from lattice points.
pub struct CheckInstance {
    pub fixed: Volume,
    pub moving: Volume,
    pub params: ParameterSet,
}

pub fn gradient_check_instance(spec: &CascadeSpec, size: usize, seed: u64) -> Result<CheckInstance> {
    use rand::{Rng, SeedableRng};

    let phantom = make_phantom(&PhantomSpec {
        dims: [size; 3],
        blobs: 6,
        sigma: [1.5, 3.0],
        seed,
        ..Default::default()
    })?;
    let bs = BSplineFieldSpec { max_displacement: size as f64 / 8.0, seed, ..Default::default() };
    let pair = make_pair(&phantom, &random_bspline_flow(&bs, phantom.volume.grid())?)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut params = initial_parameters(spec, &pair.fixed.grid())?;
    for b in 0..params.len() {
        let v = params.block_mut(b);
        let amp = if matches!(v, Value::Affine(_)) { 0.05 } else { 0.7 };
        for i in 0..v.len() {
            v.set(i, amp * rng.gen_range(-1.0..1.0));
        }
    }
    Ok(CheckInstance { fixed: pair.fixed, moving: pair.moving, params })
}
