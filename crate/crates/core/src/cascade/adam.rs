use crate::autodiff::{GradientSet, ParameterSet, Value};
use crate::field::AffineTransform;

use super::spec::OptimizerSpec;

/// Adam with bias-corrected moments and a step size chosen per entry from
/// the kind of block it belongs to.
pub(crate) struct Adam {
    spec: OptimizerSpec,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(spec: OptimizerSpec, params: &ParameterSet) -> Self {
        let steps: Vec<Vec<f64>> = params
            .blocks()
            .map(|(_, v)| match v {
                Value::Affine(_) => (0..AffineTransform::PARAM_COUNT)
                    .map(|i| if i < 9 { spec.affine_step } else { spec.translation_step })
                    .collect(),
                other => vec![spec.dense_step; other.len()],
            })
            .collect();
        let zeros = || steps.iter().map(|s| vec![0.0; s.len()]).collect();
        Self { spec, m: zeros(), v: zeros(), steps, t: 0 }
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &GradientSet) {
        self.t += 1;
        let OptimizerSpec { beta1, beta2, epsilon, iterations, final_step_fraction: f, .. } = self.spec;
        let progress = (self.t - 1) as f64 / (iterations.max(2) - 1) as f64;
        let scale = f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos());
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for b in 0..params.len() {
            let g = grads.block(b);
            let p = params.block_mut(b);
            let (m, v, lr) = (&mut self.m[b], &mut self.v[b], &self.steps[b]);
            for i in 0..p.len() {
                let gi = g.get(i);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let update = scale * lr[i] * (m[i] / c1) / ((v[i] / c2).sqrt() + epsilon);
                p.set(i, p.get(i) - update);
            }
        }
    }
}
