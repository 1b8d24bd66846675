//! Evaluation measures: segmentation overlap, landmark distance, endpoint
//! error and Jacobian-determinant statistics.

mod jacobian;

pub use jacobian::{jacobian_determinants, jacobian_stats, JacobianStats};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::field::{
    check_same_grid, norm3, sample::Stencil, sub3, warp_volume, FlowField, GridSpec, RegionBox,
    Vec3, Volume,
};

/// Boolean label per voxel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMask {
    grid: GridSpec,
    data: Vec<bool>,
}

impl SegmentationMask {
    pub fn new(grid: GridSpec, data: Vec<bool>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(shape_err(format!(
                "mask has {} voxels, grid {:?} needs {}",
                data.len(),
                grid.dims(),
                grid.len()
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(Vec3) -> bool) -> Self {
        let data = (0..grid.len()).map(|i| f(grid.position(i))).collect();
        Self { grid, data }
    }

    /// Voxels where `v >= threshold`.
    pub fn from_volume(v: &Volume, threshold: f64) -> Self {
        Self { grid: v.grid(), data: v.data().iter().map(|&x| x >= threshold).collect() }
    }

    pub fn to_volume(&self) -> Volume {
        Volume::from_raw(self.grid, self.data.iter().map(|&b| b as u8 as f64).collect())
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Copy with everything outside `region` cleared.
    pub fn restricted(&self, region: &RegionBox) -> Result<Self> {
        region.check(&self.grid)?;
        let mut data = vec![false; self.data.len()];
        for i in region.indices(&self.grid) {
            data[i] = self.data[i];
        }
        Ok(Self { grid: self.grid, data })
    }
}

/// Named points in voxel coordinates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    points: Vec<(String, Vec3)>,
}

impl LandmarkSet {
    pub fn new(points: Vec<(String, Vec3)>) -> Result<Self> {
        let mut set = Self::default();
        for (name, p) in points {
            set.push(name, p)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, name: impl Into<String>, p: Vec3) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate landmark `{name}`")));
        }
        if !p.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidArgument(format!("landmark `{name}` is not finite")));
        }
        self.points.push((name, p));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<Vec3> {
        self.points.iter().find(|(n, _)| n == name).map(|(_, p)| *p)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Vec3)> {
        self.points.iter().map(|(n, p)| (n.as_str(), *p))
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Errors unless every point lies inside the cuboid of `grid`.
    pub fn check_bounds(&self, grid: &GridSpec) -> Result<()> {
        match self.points.iter().find(|(_, p)| !grid.contains(*p)) {
            Some((n, p)) => Err(Error::InvalidArgument(format!(
                "landmark `{n}` at {p:?} lies outside grid {:?}",
                grid.dims()
            ))),
            None => Ok(()),
        }
    }
}

/// `|A & B| / |A | B|`.
pub fn seg_iou(a: &SegmentationMask, b: &SegmentationMask) -> Result<f64> {
    check_same_grid(&a.grid, &b.grid, "seg_iou")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Err(Error::Degenerate("seg_iou of two empty masks".into()));
    }
    Ok(inter as f64 / union as f64)
}

/// Warps the mask as a 0/1 volume and keeps voxels with value `>= 0.5`.
pub fn warp_mask(m: &SegmentationMask, f: &FlowField) -> Result<SegmentationMask> {
    let w = warp_volume(&m.to_volume(), f)?;
    Ok(SegmentationMask::from_volume(&w, 0.5))
}

/// Mean distance between `x + f(x)` for each fixed-image landmark `x` and
/// the moving-image landmark with the same name.
pub fn landmark_distance(moving: &LandmarkSet, fixed: &LandmarkSet, f: &FlowField) -> Result<f64> {
    if moving.len() != fixed.len() {
        return Err(Error::InvalidArgument(format!(
            "landmark sets differ in size: {} vs {}",
            moving.len(),
            fixed.len()
        )));
    }
    if fixed.is_empty() {
        return Err(Error::Degenerate("no landmarks".into()));
    }
    let grid = f.grid();
    let mut sum = 0.0;
    for (name, x) in fixed.iter() {
        let y = moving
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("landmark `{name}` missing from moving set")))?;
        let d = Stencil::new(&grid, x).interpolate3(f.data());
        sum += norm3(sub3([x[0] + d[0], x[1] + d[1], x[2] + d[2]], y));
    }
    Ok(sum / fixed.len() as f64)
}

/// Mean `|f(x) - g(x)|` over `region`.
pub fn endpoint_error(f: &FlowField, g: &FlowField, region: &RegionBox) -> Result<f64> {
    let grid = f.grid();
    check_same_grid(&grid, &g.grid(), "endpoint_error")?;
    region.check(&grid)?;
    let (a, b) = (f.data(), g.data());
    let sum: f64 = region.indices(&grid).map(|i| norm3(sub3(a[i], b[i]))).sum();
    Ok(sum / region.voxel_count() as f64)
}
