use crate::error::{shape_err, Error, Result};
use crate::field::{AffineTransform, FlowField, Volume};

/// A value flowing through the tape; gradients share the same shape.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Scalar(f64),
    Affine(AffineTransform),
    Volume(Volume),
    Flow(FlowField),
}

impl Value {
    pub fn len(&self) -> usize {
        match self {
            Value::Scalar(_) => 1,
            Value::Affine(_) => AffineTransform::PARAM_COUNT,
            Value::Volume(v) => v.data().len(),
            Value::Flow(f) => 3 * f.data().len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub(crate) fn kind(&self) -> &'static str {
        match self {
            Value::Scalar(_) => "scalar",
            Value::Affine(_) => "affine",
            Value::Volume(_) => "volume",
            Value::Flow(_) => "flow",
        }
    }

    /// Flat entry `i`, in the parameter layout (affine: A row-major then b;
    /// flow: interleaved components).
    pub fn get(&self, i: usize) -> f64 {
        match self {
            Value::Scalar(s) => *s,
            Value::Affine(t) => t.to_params()[i],
            Value::Volume(v) => v.data()[i],
            Value::Flow(f) => f.data()[i / 3][i % 3],
        }
    }

    pub(crate) fn set(&mut self, i: usize, x: f64) {
        match self {
            Value::Scalar(s) => *s = x,
            Value::Affine(t) => {
                let mut p = t.to_params();
                p[i] = x;
                *t = AffineTransform::from_params(&p);
            }
            Value::Volume(v) => v.data_mut()[i] = x,
            Value::Flow(f) => f.data_mut()[i / 3][i % 3] = x,
        }
    }

    pub(crate) fn zeros_like(&self) -> Value {
        match self {
            Value::Scalar(_) => Value::Scalar(0.0),
            Value::Affine(_) => Value::Affine(AffineTransform::identity()),
            Value::Volume(v) => Value::Volume(Volume::constant(v.grid(), 0.0)),
            Value::Flow(f) => Value::Flow(FlowField::zeros(f.grid())),
        }
    }

    pub(crate) fn is_finite(&self) -> bool {
        match self {
            Value::Scalar(s) => s.is_finite(),
            Value::Affine(t) => t.to_params().iter().all(|v| v.is_finite()),
            Value::Volume(v) => v.data().iter().all(|v| v.is_finite()),
            Value::Flow(f) => f.data().iter().flatten().all(|v| v.is_finite()),
        }
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Value::Scalar(s) => Some(*s),
            _ => None,
        }
    }

    pub fn as_affine(&self) -> Option<&AffineTransform> {
        match self {
            Value::Affine(t) => Some(t),
            _ => None,
        }
    }

    pub fn as_volume(&self) -> Option<&Volume> {
        match self {
            Value::Volume(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_flow(&self) -> Option<&FlowField> {
        match self {
            Value::Flow(f) => Some(f),
            _ => None,
        }
    }

    /// `self += scale * other`; shapes must agree.
    pub(crate) fn add_scaled(&mut self, other: &Value, scale: f64) -> Result<()> {
        match (self, other) {
            (Value::Scalar(a), Value::Scalar(b)) => *a += scale * b,
            (Value::Affine(a), Value::Affine(b)) => {
                for (ra, rb) in a.matrix.iter_mut().zip(&b.matrix) {
                    for (x, y) in ra.iter_mut().zip(rb) {
                        *x += scale * y;
                    }
                }
                for (x, y) in a.translation.iter_mut().zip(&b.translation) {
                    *x += scale * y;
                }
            }
            (Value::Volume(a), Value::Volume(b)) if a.grid() == b.grid() => {
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x += scale * y;
                }
            }
            (Value::Flow(a), Value::Flow(b)) if a.grid() == b.grid() => {
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    for c in 0..3 {
                        x[c] += scale * y[c];
                    }
                }
            }
            (a, b) => {
                return Err(shape_err(format!("cannot accumulate {} into {}", b.kind(), a.kind())))
            }
        }
        Ok(())
    }
}

/// Ordered, uniquely named parameter blocks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    blocks: Vec<(String, Value)>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Value) -> Result<()> {
        let name = name.into();
        if self.blocks.iter().any(|(n, _)| *n == name) {
            return Err(Error::Config(format!("duplicate parameter block `{name}`")));
        }
        self.blocks.push((name, value));
        Ok(())
    }

    pub fn with(mut self, name: impl Into<String>, value: Value) -> Result<Self> {
        self.insert(name, value)?;
        Ok(self)
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&str, &Value)> {
        self.blocks.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub(crate) fn block_mut(&mut self, i: usize) -> &mut Value {
        &mut self.blocks[i].1
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Total number of scalar entries.
    pub fn entry_count(&self) -> usize {
        self.blocks.iter().map(|(_, v)| v.len()).sum()
    }
}

/// Gradients congruent with a [`ParameterSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    blocks: Vec<(String, Value)>,
}

impl GradientSet {
    pub(crate) fn new(blocks: Vec<(String, Value)>) -> Self {
        Self { blocks }
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&str, &Value)> {
        self.blocks.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub(crate) fn block(&self, i: usize) -> &Value {
        &self.blocks[i].1
    }

    /// Largest absolute entry over all blocks.
    pub fn max_abs(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|(_, v)| (0..v.len()).map(move |i| v.get(i).abs()))
            .fold(0.0, f64::max)
    }
}
