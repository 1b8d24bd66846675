//! Clamp-then-interpolate trilinear sampling of lattice functions.

use super::{GridSpec, Vec3, Volume};
use crate::error::{Error, Result};

/// Interpolation cell of a query point: the 8 corner offsets, their weights,
/// and per-axis flags recording whether the axis was clamped.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    lo: [usize; 3],
    t: [f64; 3],
    free: [bool; 3],
}

impl Stencil {
    /// Corner `c` sits at offset `(c & 1, (c >> 1) & 1, c >> 2)` from the
    /// cell origin. Cells are chosen by `floor`; the last cell absorbs the
    /// upper face so every in-bound point has a full 8-point stencil.
    #[inline]
    pub fn new(grid: &GridSpec, p: Vec3) -> Self {
        let dims = grid.dims();
        let mut lo = [0usize; 3];
        let mut t = [0.0; 3];
        let mut free = [true; 3];
        for a in 0..3 {
            let hi = (dims[a] - 1) as f64;
            let q = if p[a] < 0.0 {
                free[a] = false;
                0.0
            } else if p[a] > hi {
                free[a] = false;
                hi
            } else {
                p[a]
            };
            // q >= 0, so truncation is floor (and avoids a libm call).
            let cell = (q as usize).min(dims[a] - 2);
            lo[a] = cell;
            t[a] = q - cell as f64;
        }
        let sx = 1;
        let sy = dims[0];
        let sz = dims[0] * dims[1];
        let base = lo[0] + sy * lo[1] + sz * lo[2];
        let idx = [
            base,
            base + sx,
            base + sy,
            base + sx + sy,
            base + sz,
            base + sx + sz,
            base + sy + sz,
            base + sx + sy + sz,
        ];
        let [tx, ty, tz] = t;
        let (ux, uy, uz) = (1.0 - tx, 1.0 - ty, 1.0 - tz);
        let w = [
            ux * uy * uz,
            tx * uy * uz,
            ux * ty * uz,
            tx * ty * uz,
            ux * uy * tz,
            tx * uy * tz,
            ux * ty * tz,
            tx * ty * tz,
        ];
        Self { idx, w, lo, t, free }
    }

    /// `dw[a][c]`: derivative of corner weight `c` with respect to the
    /// query coordinate along axis `a`; zero on clamped axes.
    #[inline]
    pub fn weight_derivatives(&self) -> [[f64; 8]; 3] {
        let [tx, ty, tz] = self.t;
        let (ux, uy, uz) = (1.0 - tx, 1.0 - ty, 1.0 - tz);
        let mut dw = [
            [-uy * uz, uy * uz, -ty * uz, ty * uz, -uy * tz, uy * tz, -ty * tz, ty * tz],
            [-ux * uz, -tx * uz, ux * uz, tx * uz, -ux * tz, -tx * tz, ux * tz, tx * tz],
            [-ux * uy, -tx * uy, -ux * ty, -tx * ty, ux * uy, tx * uy, ux * ty, tx * ty],
        ];
        for a in 0..3 {
            if !self.free[a] {
                dw[a] = [0.0; 8];
            }
        }
        dw
    }

    #[inline]
    pub fn interpolate(&self, data: &[f64]) -> f64 {
        let mut v = 0.0;
        for c in 0..8 {
            v += self.w[c] * data[self.idx[c]];
        }
        v
    }

    #[inline]
    pub fn interpolate3(&self, data: &[Vec3]) -> Vec3 {
        let mut v = [0.0; 3];
        for c in 0..8 {
            let d = data[self.idx[c]];
            let w = self.w[c];
            v[0] += w * d[0];
            v[1] += w * d[1];
            v[2] += w * d[2];
        }
        v
    }

    /// Gradient of the interpolated scalar with respect to the query point.
    #[inline]
    pub fn gradient(&self, data: &[f64]) -> Vec3 {
        let dw = self.weight_derivatives();
        let mut g = [0.0; 3];
        for c in 0..8 {
            let v = data[self.idx[c]];
            g[0] += dw[0][c] * v;
            g[1] += dw[1][c] * v;
            g[2] += dw[2][c] * v;
        }
        g
    }

    /// Compact identity of the containing cell and clamp state; two query
    /// points with equal signatures lie in the same smooth piece.
    #[inline]
    pub fn signature(&self) -> u64 {
        let mut h = 0u64;
        for a in 0..3 {
            h = h.wrapping_mul(0x100000001b3) ^ (self.lo[a] as u64);
            h = h.wrapping_mul(0x100000001b3) ^ (self.free[a] as u64);
        }
        h
    }
}

/// Samples `v` at `p`: clamps each coordinate to the lattice cuboid, then
/// interpolates from the 8 enclosing lattice points.
pub fn trilinear_sample(v: &Volume, p: Vec3) -> Result<f64> {
    if p.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite sample point {p:?}")));
    }
    Ok(Stencil::new(&v.grid(), p).interpolate(v.data()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(n: usize) -> Volume {
        Volume::from_fn(GridSpec::cube(n).unwrap(), |p| p[0])
    }

    #[test]
    fn constant_volume_samples_constant() {
        let v = Volume::constant(GridSpec::cube(4).unwrap(), 2.5);
        for p in [[0.3, 1.7, 2.2], [-4.0, 9.0, 1.0], [3.0, 3.0, 3.0]] {
            assert!((trilinear_sample(&v, p).unwrap() - 2.5).abs() < 1e-14);
        }
    }

    #[test]
    fn exact_at_lattice_points() {
        let g = GridSpec::cube(4).unwrap();
        let v = Volume::from_fn(g, |p| (p[0] * 7.0 + p[1] * p[1] - p[2]).sin());
        assert_eq!(trilinear_sample(&v, [1.0, 2.0, 3.0]).unwrap(), v.get(1, 2, 3));
    }

    #[test]
    fn ramp_midpoint() {
        assert_eq!(trilinear_sample(&ramp(4), [1.5, 0.0, 0.0]).unwrap(), 1.5);
    }

    #[test]
    fn out_of_bounds_clamps_to_nearest() {
        let v = ramp(4);
        assert_eq!(trilinear_sample(&v, [-2.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(trilinear_sample(&v, [10.0, 1.0, 1.0]).unwrap(), 3.0);
    }

    #[test]
    fn rejects_non_finite_points() {
        assert!(trilinear_sample(&ramp(4), [f64::NAN, 0.0, 0.0]).is_err());
        assert!(trilinear_sample(&ramp(4), [0.0, f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn clamped_axis_has_zero_gradient() {
        let v = ramp(4);
        let s = Stencil::new(&v.grid(), [5.0, 1.2, 1.2]);
        assert_eq!(s.gradient(v.data())[0], 0.0);
        let s = Stencil::new(&v.grid(), [1.2, 1.2, 1.2]);
        assert!((s.gradient(v.data())[0] - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn reproduces_affine_functions(
            c in prop::array::uniform3(-3.0f64..3.0),
            d in -5.0f64..5.0,
            p in prop::array::uniform3(0.0f64..6.0),
        ) {
            let g = GridSpec::new(7, 8, 9).unwrap();
            let v = Volume::from_fn(g, |x| c[0] * x[0] + c[1] * x[1] + c[2] * x[2] + d);
            let expect = c[0] * p[0] + c[1] * p[1] + c[2] * p[2] + d;
            prop_assert!((trilinear_sample(&v, p).unwrap() - expect).abs() < 1e-10);
        }
    }
}
