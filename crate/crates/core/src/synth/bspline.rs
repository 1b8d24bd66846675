use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::field::{FlowField, GridSpec, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BSplineFieldSpec {
    pub control_points: [usize; 3],
    /// Bound on every displacement component, in voxels.
    pub max_displacement: f64,
    pub seed: u64,
}

impl Default for BSplineFieldSpec {
    fn default() -> Self {
        Self { control_points: [5; 3], max_displacement: 12.0, seed: 0 }
    }
}

impl BSplineFieldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.control_points.iter().any(|&n| n < 2) {
            return Err(Error::Config(format!(
                "B-spline control grid needs >= 2 points per axis, got {:?}",
                self.control_points
            )));
        }
        if !(self.max_displacement >= 0.0 && self.max_displacement.is_finite()) {
            return Err(Error::Config(format!(
                "max displacement must be finite and >= 0, got {}",
                self.max_displacement
            )));
        }
        Ok(())
    }
}

/// Uniform cubic B-spline basis at offset `t` in [0, 1) for the four
/// control points `i-1 .. i+2`.
fn basis(t: f64) -> [f64; 4] {
    let u = 1.0 - t;
    [
        u * u * u / 6.0,
        (3.0 * t * t * t - 6.0 * t * t + 4.0) / 6.0,
        (-3.0 * t * t * t + 3.0 * t * t + 3.0 * t + 1.0) / 6.0,
        t * t * t / 6.0,
    ]
}

/// Control indices and weights for every lattice coordinate of one axis.
/// Control `k` sits at `k * (d - 1) / (n - 1)`; indices beyond the control
/// grid are clamped, which keeps the weights a partition of unity.
fn axis_taps(d: usize, n: usize) -> Vec<([usize; 4], [f64; 4])> {
    let spacing = (d - 1) as f64 / (n - 1) as f64;
    (0..d)
        .map(|x| {
            let u = x as f64 / spacing;
            let i = (u.floor() as usize).min(n - 1);
            let w = basis(u - i as f64);
            let idx = std::array::from_fn(|m| (i + m).saturating_sub(1).min(n - 1));
            (idx, w)
        })
        .collect()
}

/// Dense field from control displacements laid out x-fastest on a
/// `control_dims` grid.
pub fn bspline_flow_from_controls(
    controls: &[Vec3],
    control_dims: [usize; 3],
    grid: GridSpec,
) -> Result<FlowField> {
    if control_dims.iter().any(|&n| n < 2) || controls.len() != control_dims.iter().product::<usize>() {
        return Err(shape_err(format!(
            "{} control points do not fill a {control_dims:?} control grid (>= 2 per axis)",
            controls.len()
        )));
    }
    let dims = grid.dims();
    let taps: Vec<_> = (0..3).map(|a| axis_taps(dims[a], control_dims[a])).collect();
    let [cx, cy, _] = control_dims;
    let mut data = Vec::with_capacity(grid.len());
    for z in 0..dims[2] {
        let (iz, wz) = taps[2][z];
        for y in 0..dims[1] {
            let (iy, wy) = taps[1][y];
            for x in 0..dims[0] {
                let (ix, wx) = taps[0][x];
                let mut v = [0.0; 3];
                for c in 0..4 {
                    for b in 0..4 {
                        let wyz = wz[c] * wy[b];
                        let row = (iz[c] * cy + iy[b]) * cx;
                        for a in 0..4 {
                            let w = wyz * wx[a];
                            let p = controls[row + ix[a]];
                            v[0] += w * p[0];
                            v[1] += w * p[1];
                            v[2] += w * p[2];
                        }
                    }
                }
                data.push(v);
            }
        }
    }
    Ok(FlowField::from_raw(grid, data))
}

/// Cubic B-spline field with control displacements uniform in
/// `[-max, max]^3`; every component stays within `max` because the basis
/// weights are a convex combination.
pub fn random_bspline_flow(spec: &BSplineFieldSpec, grid: GridSpec) -> Result<FlowField> {
    spec.validate()?;
    let n: usize = spec.control_points.iter().product();
    let m = spec.max_displacement;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let controls: Vec<Vec3> = (0..n)
        .map(|_| if m == 0.0 { [0.0; 3] } else { std::array::from_fn(|_| rng.gen_range(-m..=m)) })
        .collect();
    bspline_flow_from_controls(&controls, spec.control_points, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::total_variation_loss;
    use crate::metrics::jacobian_stats;

    #[test]
    fn basis_is_a_partition_of_unity() {
        for k in 0..=20 {
            let t = k as f64 / 20.0;
            assert!((basis(t).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        assert_eq!(basis(0.0)[3], 0.0);
    }

    #[test]
    fn zero_max_gives_zero_flow() {
        let g = GridSpec::cube(16).unwrap();
        let f = random_bspline_flow(&BSplineFieldSpec { max_displacement: 0.0, ..Default::default() }, g)
            .unwrap();
        assert_eq!(f, FlowField::zeros(g));
    }

    #[test]
    fn constant_controls_give_constant_field() {
        let g = GridSpec::new(17, 12, 9).unwrap();
        let t = [1.25, -3.5, 0.75];
        let f = bspline_flow_from_controls(&vec![t; 4 * 5 * 6], [4, 5, 6], g).unwrap();
        for d in f.data() {
            for a in 0..3 {
                assert!((d[a] - t[a]).abs() < 1e-12);
            }
        }
        assert!(bspline_flow_from_controls(&vec![t; 10], [4, 5, 6], g).is_err());
    }

    #[test]
    fn default_fields_respect_the_displacement_bound() {
        let g = GridSpec::cube(32).unwrap();
        for seed in 0..20 {
            let f = random_bspline_flow(&BSplineFieldSpec { seed, ..Default::default() }, g).unwrap();
            assert!(f.max_abs_component() <= 12.0);
            assert!(f.max_abs_component() > 1.0);
            assert!(total_variation_loss(&f) <= 10.0 * 144.0);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let g = GridSpec::cube(12).unwrap();
        let s = BSplineFieldSpec { seed: 5, ..Default::default() };
        assert_eq!(random_bspline_flow(&s, g).unwrap(), random_bspline_flow(&s, g).unwrap());
        let t = BSplineFieldSpec { seed: 6, ..Default::default() };
        assert_ne!(random_bspline_flow(&s, g).unwrap(), random_bspline_flow(&t, g).unwrap());
    }

    #[test]
    #[ignore = "calibration run over 100 seeds at 64^3"]
    fn folding_baseline() {
        let g = GridSpec::cube(64).unwrap();
        let mut clean = 0;
        for seed in 0..100 {
            let f = random_bspline_flow(&BSplineFieldSpec { seed, ..Default::default() }, g).unwrap();
            let s = jacobian_stats(&f).unwrap();
            eprintln!("seed {seed}: folding {:.5} std {:.4}", s.folding_fraction, s.std_jacobian);
            clean += (s.folding_fraction == 0.0) as usize;
        }
        eprintln!("clean {clean}/100");
    }
}
