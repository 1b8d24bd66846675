//! Reverse-mode differentiation over the registration primitives.
//!
//! A [`Tape`] records every primitive application together with its output
//! value. [`Tape::backward`] walks the records in reverse and accumulates
//! adjoints using the hand-written adjoint of each primitive. Warps are
//! differentiable in both their image (trilinear weights) and their flow
//! (slope of the interpolant at the query point, zero on clamped axes), which
//! is what lets a late-stage loss reach early-stage parameters.

mod check;
mod params;
mod tape;

pub use check::{gradient_check, Coordinate, GradientCheckConfig, GradientCheckReport};
pub use params::{GradientSet, ParameterSet, Value};
pub use tape::{Bindings, Tape, Var};

use crate::error::Result;

/// A scalar loss expression over registered parameter blocks.
pub trait Pipeline {
    fn record(&self, tape: &mut Tape, params: &Bindings) -> Result<Var>;
}

impl<F> Pipeline for F
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    fn record(&self, tape: &mut Tape, params: &Bindings) -> Result<Var> {
        self(tape, params)
    }
}

/// Forward value of `pipeline` at `params`.
pub fn evaluate<P: Pipeline + ?Sized>(pipeline: &P, params: &ParameterSet) -> Result<f64> {
    let mut tape = Tape::new();
    let bindings = tape.bind(params);
    let loss = pipeline.record(&mut tape, &bindings)?;
    tape.scalar(loss)
}

/// Forward value and `d loss / d param` for every registered entry.
pub fn evaluate_with_gradients<P: Pipeline + ?Sized>(
    pipeline: &P,
    params: &ParameterSet,
) -> Result<(f64, GradientSet)> {
    let mut tape = Tape::new();
    let bindings = tape.bind(params);
    let loss = pipeline.record(&mut tape, &bindings)?;
    let value = tape.scalar(loss)?;
    let grads = tape.backward(loss, &bindings)?;
    Ok((value, grads))
}

#[cfg(test)]
mod tests;
