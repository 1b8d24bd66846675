//! Lattice volumes, displacement fields and affine transforms, plus the
//! sampling, warping and composition algebra built on them.
//!
//! Coordinates are zero-based lattice indices with unit spacing, so the
//! domain of a grid with dims `(nx, ny, nz)` is the cuboid
//! `[0, nx-1] x [0, ny-1] x [0, nz-1]`. Data is stored x-fastest.

mod histogram;
pub(crate) mod sample;
mod warp;

pub use histogram::{histogram_match, DEFAULT_HISTOGRAM_BINS};
pub use sample::trilinear_sample;
pub use warp::{
    affine_to_flow, central_region, compose_affine_with_flow, compose_flows, resample_flow,
    valid_domain, warp_flow, warp_volume,
};
pub(crate) use warp::{
    compose_affine_with_flow_backward, for_each_voxel, resample_flow_backward, warp_flow_backward,
    warp_volume_backward,
};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

pub type Vec3 = [f64; 3];

/// Dimensions of a regular 3D lattice with unit spacing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[usize; 3]", into = "[usize; 3]")]
pub struct GridSpec {
    dims: [usize; 3],
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        Self::from_dims([nx, ny, nz])
    }

    pub fn from_dims(dims: [usize; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidArgument(format!(
                "grid dims must all be >= 2, got {dims:?}"
            )));
        }
        Ok(Self { dims })
    }

    pub fn cube(n: usize) -> Result<Self> {
        Self::from_dims([n; 3])
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Linear offset of lattice point `(x, y, z)`.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    /// Lattice position of `index` as a real 3-vector.
    #[inline]
    pub fn position(&self, index: usize) -> Vec3 {
        let [x, y, z] = self.coords(index);
        [x as f64, y as f64, z as f64]
    }

    /// Largest valid coordinate along each axis.
    #[inline]
    pub fn upper_bounds(&self) -> Vec3 {
        self.dims.map(|d| (d - 1) as f64)
    }

    /// True when `p` lies in the closed cuboid spanned by the lattice.
    #[inline]
    pub fn contains(&self, p: Vec3) -> bool {
        let hi = self.upper_bounds();
        (0..3).all(|a| p[a] >= 0.0 && p[a] <= hi[a])
    }
}

impl TryFrom<[usize; 3]> for GridSpec {
    type Error = Error;

    fn try_from(dims: [usize; 3]) -> Result<Self> {
        Self::from_dims(dims)
    }
}

impl From<GridSpec> for [usize; 3] {
    fn from(g: GridSpec) -> Self {
        g.dims
    }
}

pub(crate) fn check_same_grid(a: &GridSpec, b: &GridSpec, what: &str) -> Result<()> {
    if a != b {
        return Err(shape_err(format!(
            "{what}: grid {:?} does not match {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn check_finite<'a>(values: impl IntoIterator<Item = &'a f64>, what: &str) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} contains non-finite values")))
    }
}

/// Scalar intensity field on a lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    grid: GridSpec,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(grid: GridSpec, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(shape_err(format!(
                "volume data has {} values, grid {:?} needs {}",
                data.len(),
                grid.dims(),
                grid.len()
            )));
        }
        check_finite(&data, "volume")?;
        Ok(Self { grid, data })
    }

    pub fn constant(grid: GridSpec, value: f64) -> Self {
        Self { grid, data: vec![value; grid.len()] }
    }

    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(Vec3) -> f64) -> Self {
        let data = (0..grid.len()).map(|i| f(grid.position(i))).collect();
        Self { grid, data }
    }

    /// Skips the finiteness scan; callers guarantee the invariant.
    pub(crate) fn from_raw(grid: GridSpec, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), grid.len());
        Self { grid, data }
    }

    #[inline]
    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { grid: self.grid, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn is_constant(&self) -> bool {
        let (lo, hi) = self.min_max();
        lo == hi
    }
}

/// Per-voxel displacement field in voxel units.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    grid: GridSpec,
    data: Vec<Vec3>,
}

impl FlowField {
    pub fn new(grid: GridSpec, data: Vec<Vec3>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(shape_err(format!(
                "flow data has {} vectors, grid {:?} needs {}",
                data.len(),
                grid.dims(),
                grid.len()
            )));
        }
        check_finite(data.iter().flatten(), "flow")?;
        Ok(Self { grid, data })
    }

    /// Builds a flow from interleaved `[x0, y0, z0, x1, ...]` components.
    pub fn from_interleaved(grid: GridSpec, values: &[f64]) -> Result<Self> {
        if values.len() != 3 * grid.len() {
            return Err(shape_err(format!(
                "flow data has {} components, grid {:?} needs {}",
                values.len(),
                grid.dims(),
                3 * grid.len()
            )));
        }
        let data = values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Self::new(grid, data)
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self::constant(grid, [0.0; 3])
    }

    pub fn constant(grid: GridSpec, value: Vec3) -> Self {
        Self { grid, data: vec![value; grid.len()] }
    }

    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(Vec3) -> Vec3) -> Self {
        let data = (0..grid.len()).map(|i| f(grid.position(i))).collect();
        Self { grid, data }
    }

    pub(crate) fn from_raw(grid: GridSpec, data: Vec<Vec3>) -> Self {
        debug_assert_eq!(data.len(), grid.len());
        Self { grid, data }
    }

    #[inline]
    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    #[inline]
    pub fn data(&self) -> &[Vec3] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [Vec3] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Vec3> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> Vec3 {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn interleaved(&self) -> Vec<f64> {
        self.data.iter().flatten().copied().collect()
    }

    pub fn add(&self, other: &FlowField) -> Result<FlowField> {
        check_same_grid(&self.grid, &other.grid, "flow add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| add3(*a, *b)).collect();
        Ok(Self { grid: self.grid, data })
    }

    pub fn sub(&self, other: &FlowField) -> Result<FlowField> {
        check_same_grid(&self.grid, &other.grid, "flow sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| sub3(*a, *b)).collect();
        Ok(Self { grid: self.grid, data })
    }

    pub fn scale(&self, s: f64) -> FlowField {
        Self { grid: self.grid, data: self.data.iter().map(|v| v.map(|c| c * s)).collect() }
    }

    /// Largest absolute displacement component.
    pub fn max_abs_component(&self) -> f64 {
        self.data.iter().flatten().fold(0.0, |m, c| m.max(c.abs()))
    }

    pub fn mean_magnitude(&self) -> f64 {
        self.data.iter().map(|v| norm3(*v)).sum::<f64>() / self.data.len() as f64
    }
}

#[inline]
pub(crate) fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub(crate) fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn norm3(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub type Mat3 = [[f64; 3]; 3];

/// The affine flow `f(x) = A x + b`. `A` is the deviation from identity, so
/// the point map is `x -> (I + A) x + b`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct AffineTransform {
    pub matrix: Mat3,
    pub translation: Vec3,
}

impl AffineTransform {
    pub const PARAM_COUNT: usize = 12;

    pub fn new(matrix: Mat3, translation: Vec3) -> Result<Self> {
        check_finite(matrix.iter().flatten().chain(translation.iter()), "affine transform")?;
        Ok(Self { matrix, translation })
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn translation(b: Vec3) -> Self {
        Self { matrix: [[0.0; 3]; 3], translation: b }
    }

    /// Parameters in the order `A` row-major, then `b`.
    pub fn to_params(&self) -> [f64; 12] {
        let mut p = [0.0; 12];
        for r in 0..3 {
            p[3 * r..3 * r + 3].copy_from_slice(&self.matrix[r]);
        }
        p[9..].copy_from_slice(&self.translation);
        p
    }

    pub fn from_params(p: &[f64; 12]) -> Self {
        let mut matrix = [[0.0; 3]; 3];
        for r in 0..3 {
            matrix[r].copy_from_slice(&p[3 * r..3 * r + 3]);
        }
        Self { matrix, translation: [p[9], p[10], p[11]] }
    }

    /// Displacement at `x`: `A x + b`.
    #[inline]
    pub fn displacement(&self, x: Vec3) -> Vec3 {
        let m = &self.matrix;
        let b = &self.translation;
        [
            m[0][0] * x[0] + m[0][1] * x[1] + m[0][2] * x[2] + b[0],
            m[1][0] * x[0] + m[1][1] * x[1] + m[1][2] * x[2] + b[1],
            m[2][0] * x[0] + m[2][1] * x[1] + m[2][2] * x[2] + b[2],
        ]
    }

    /// `I + A`.
    pub fn linear_part(&self) -> Mat3 {
        let mut m = self.matrix;
        for (i, row) in m.iter_mut().enumerate() {
            row[i] += 1.0;
        }
        m
    }

    /// Builds the transform whose point map has linear part `linear`.
    pub fn from_linear_part(linear: Mat3, translation: Vec3) -> Self {
        let mut matrix = linear;
        for (i, row) in matrix.iter_mut().enumerate() {
            row[i] -= 1.0;
        }
        Self { matrix, translation }
    }
}

pub(crate) fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Cofactor matrix, so that `d det(m) / d m = cofactor(m)`.
pub(crate) fn cofactor3(m: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for (i, row) in c.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (i1, i2) = ((i + 1) % 3, (i + 2) % 3);
            let (j1, j2) = ((j + 1) % 3, (j + 2) % 3);
            *v = m[i1][j1] * m[i2][j2] - m[i1][j2] * m[i2][j1];
        }
    }
    c
}

/// Half-open box of lattice indices, `lower <= idx < upper` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionBox {
    lower: [usize; 3],
    upper: [usize; 3],
}

impl RegionBox {
    pub fn new(grid: &GridSpec, lower: [usize; 3], upper: [usize; 3]) -> Result<Self> {
        let dims = grid.dims();
        for a in 0..3 {
            if lower[a] >= upper[a] || upper[a] > dims[a] {
                return Err(Error::InvalidArgument(format!(
                    "region {lower:?}..{upper:?} is empty or outside grid {dims:?}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn full(grid: &GridSpec) -> Self {
        Self { lower: [0; 3], upper: grid.dims() }
    }

    pub fn lower(&self) -> [usize; 3] {
        self.lower
    }

    pub fn upper(&self) -> [usize; 3] {
        self.upper
    }

    pub fn voxel_count(&self) -> usize {
        (0..3).map(|a| self.upper[a] - self.lower[a]).product()
    }

    pub fn fits(&self, grid: &GridSpec) -> bool {
        let dims = grid.dims();
        (0..3).all(|a| self.upper[a] <= dims[a])
    }

    /// Linear indices of the region's voxels in x-fastest order.
    pub fn indices<'a>(&'a self, grid: &'a GridSpec) -> impl Iterator<Item = usize> + 'a {
        let [x0, y0, z0] = self.lower;
        let [x1, y1, z1] = self.upper;
        (z0..z1).flat_map(move |z| {
            (y0..y1).flat_map(move |y| (x0..x1).map(move |x| grid.index(x, y, z)))
        })
    }

    pub(crate) fn check(&self, grid: &GridSpec) -> Result<()> {
        if self.fits(grid) {
            Ok(())
        } else {
            Err(shape_err(format!(
                "region {:?}..{:?} exceeds grid {:?}",
                self.lower,
                self.upper,
                grid.dims()
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rejects_thin_axes() {
        assert!(GridSpec::new(1, 4, 4).is_err());
        assert_eq!(GridSpec::new(2, 3, 4).unwrap().len(), 24);
    }

    #[test]
    fn index_round_trips() {
        let g = GridSpec::new(3, 4, 5).unwrap();
        for i in 0..g.len() {
            let [x, y, z] = g.coords(i);
            assert_eq!(g.index(x, y, z), i);
        }
    }

    #[test]
    fn volume_rejects_bad_payloads() {
        let g = GridSpec::cube(2).unwrap();
        assert!(matches!(Volume::new(g, vec![0.0; 7]), Err(Error::Shape(_))));
        let mut d = vec![0.0; 8];
        d[3] = f64::NAN;
        assert!(matches!(Volume::new(g, d), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn affine_params_round_trip() {
        let p: [f64; 12] = std::array::from_fn(|i| i as f64 * 0.5 - 2.0);
        assert_eq!(AffineTransform::from_params(&p).to_params(), p);
    }

    #[test]
    fn cofactor_is_determinant_gradient() {
        let m = [[1.2, 0.3, -0.1], [0.05, 0.9, 0.2], [-0.3, 0.1, 1.1]];
        let c = cofactor3(&m);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let mut p = m;
                let mut q = m;
                p[i][j] += h;
                q[i][j] -= h;
                let fd = (det3(&p) - det3(&q)) / (2.0 * h);
                assert!((fd - c[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn region_validation() {
        let g = GridSpec::cube(4).unwrap();
        assert!(RegionBox::new(&g, [1, 1, 1], [1, 3, 3]).is_err());
        assert!(RegionBox::new(&g, [0, 0, 0], [5, 4, 4]).is_err());
        let r = RegionBox::new(&g, [1, 1, 1], [3, 3, 3]).unwrap();
        assert_eq!(r.voxel_count(), 8);
        assert_eq!(r.indices(&g).count(), 8);
    }
}
